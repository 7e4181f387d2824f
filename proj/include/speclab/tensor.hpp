#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "speclab/errors.hpp"
#include "speclab/rng.hpp"

namespace speclab {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
struct Node;
}  // namespace detail

// Dense 64-bit float tensor with optional reverse-mode gradient tracking.
// Values are validated to be finite at every op boundary; a NaN/Inf anywhere
// raises ContractError. Copies are shallow (shared storage); data written by
// a producing op is never mutated afterwards. Leaf data may be updated in
// place between forward passes (optimizer steps).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int64_t numel() const;
    int64_t dim(size_t axis) const;
    size_t rank() const;

    std::span<const double> data() const;
    // In-place mutation; only valid for leaves between graph builds.
    std::span<double> mutable_data();

    bool requires_grad() const;
    void set_requires_grad(bool value);
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    double item() const;          // scalar tensors only
    double at(int64_t i) const;   // flat index
    double at(int64_t r, int64_t c) const;

    Tensor detach() const;  // same storage, no graph, no grad requirement
    Tensor clone() const;   // deep copy of data (leaf)

    // Identity of the underlying storage; used for tie checks.
    const void* storage_id() const;

    std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Thread-local switch controlling whether ops record backward nodes.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// ---- elementwise / structural ops ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor silu(const Tensor& a);
// ln(max(t, floor)); gradient is 0 where the clamp is active.
Tensor log_clamped(const Tensor& a, double floor = 1e-12);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);  // [m×k]·[k×n]
Tensor transpose(const Tensor& a);                // 2-D only

// ---- indexing / assembly ----
Tensor reshape(const Tensor& t, Shape shape);  // same numel, contiguous
Tensor gather_rows(const Tensor& t, std::span<const int64_t> rows);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_cols(const Tensor& t, int64_t c0, int64_t c1);
Tensor slice_rows(const Tensor& t, int64_t r0, int64_t r1);

// ---- normalizations / activations over rows ----
// `mask` entries: nonzero = position participates. Masked-out outputs are 0.
Tensor softmax(const Tensor& t, int axis = -1);
Tensor log_softmax(const Tensor& t, int axis = -1);
Tensor masked_softmax_rows(const Tensor& t, std::span<const uint8_t> mask);
Tensor masked_log_softmax_rows(const Tensor& t, std::span<const uint8_t> mask);
Tensor rms_norm(const Tensor& x, const Tensor& gain);  // rows of x, gain [cols]
Tensor l2_normalize_rows(const Tensor& x);

// ---- reductions / losses ----
Tensor sum(const Tensor& t);
Tensor mean(const Tensor& t);
Tensor smooth_l1(const Tensor& pred, const Tensor& target, double beta = 1.0);
// Rows of log_probs/target_probs are distributions; soft targets supported.
Tensor cross_entropy(const Tensor& log_probs, const Tensor& target_probs);
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
// Mean of the selected (row, col) entries of a 2-D tensor.
Tensor pick_mean(const Tensor& t, std::span<const std::pair<int64_t, int64_t>> picks);

// Populates grads of every requires_grad tensor reachable from `loss`.
// Grads accumulate across calls; zero_grad() between backward passes.
void backward(const Tensor& loss);

}  // namespace speclab
