#pragma once

#include <string>

#include "speclab/engine.hpp"
#include "speclab/training.hpp"

namespace speclab {

// Flat key=value run configuration tying model, training and engine settings
// together with paths and the run-level seed. A persisted config replays to
// bit-identical artifacts.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    EngineConfig engine;
    std::string corpus_path;  // empty: built-in seeded Markov corpus
    int64_t corpus_len = 65536;
    std::string weights_dir = "weights";
    std::string out_dir = "out";
    uint64_t seed = 0;

    // Applies `seed` to the training/engine sub-seeds.
    void propagate_seed();

    void set(const std::string& key, const std::string& value);
    std::string to_string() const;

    static RunConfig from_file(const std::string& path);
    void save(const std::string& path) const;
};

}  // namespace speclab
