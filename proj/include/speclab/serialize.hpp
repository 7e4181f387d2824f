#pragma once

#include <map>
#include <string>
#include <vector>

#include "speclab/model.hpp"

namespace speclab {

// Single binary container per model: 8-byte magic, u32 version, integer
// config entries, then named tensors (u32 name length, name, u32 rank, u64
// dims, raw little-endian f64 data). Round-trips are bit-exact.
struct TensorFile {
    std::map<std::string, int64_t> config;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor& tensor(const std::string& name) const;
    int64_t config_value(const std::string& key) const;
};

void save_tensor_file(const std::string& path, const TensorFile& file);
TensorFile load_tensor_file(const std::string& path);

void save_target(const std::string& path, const TargetModel& model);
TargetModel load_target(const std::string& path);

// Draft files hold only the draft-owned tensors; embedding and lm_head are
// re-tied to the target on load.
void save_draft(const std::string& path, const DraftModel& model);
DraftModel load_draft(const std::string& path, const TargetModel& target);

void save_router(const std::string& path, const RouterHead& router);
RouterHead load_router(const std::string& path);

std::map<std::string, int64_t> config_to_entries(const ModelConfig& cfg);
ModelConfig config_from_entries(const std::map<std::string, int64_t>& entries);

}  // namespace speclab
