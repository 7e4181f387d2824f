#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace speclab {

// Seeded order-2 Markov byte source over a small alphabet. Self-contained
// replacement for a text dataset; deterministic for a given (seed, length).
std::vector<int32_t> markov_corpus(uint64_t seed, int64_t length);

// Raw bytes of a file as token ids.
std::vector<int32_t> load_corpus_file(const std::string& path);

// markov-by-default: empty path generates `fallback_len` Markov bytes.
std::vector<int32_t> load_corpus(const std::string& path, uint64_t seed, int64_t fallback_len);

}  // namespace speclab
