#include "speclab/corpus.hpp"

#include <array>
#include <fstream>

#include "speclab/errors.hpp"
#include "speclab/rng.hpp"

namespace speclab {

namespace {

// Alphabet of 32 printable bytes; keeps the transition table small while the
// token space stays the full byte range.
constexpr int kAlphabet = 32;

int32_t symbol_to_byte(int s) {
    static const char extra[] = {' ', '.', ',', '\n', '0', '1'};
    if (s < 26) return 'a' + s;
    return static_cast<int32_t>(static_cast<unsigned char>(extra[s - 26]));
}

}  // namespace

std::vector<int32_t> markov_corpus(uint64_t seed, int64_t length) {
    if (length <= 0) throw DataError("markov_corpus: length must be positive");
    Rng rng(seed ^ 0x9e3779b97f4a7c15ull);

    // Per (prev2, prev1) state: four likely successors with fixed weights,
    // plus a small uniform smoothing component.
    constexpr int kBranches = 4;
    constexpr double kSmooth = 0.04;
    static const std::array<double, kBranches> kWeights = {0.55, 0.25, 0.12, 0.08};

    const int states = kAlphabet * kAlphabet;
    std::vector<std::array<int, kBranches>> successors(states);
    for (auto& succ : successors) {
        for (int b = 0; b < kBranches; ++b) {
            int sym;
            bool fresh;
            do {
                sym = static_cast<int>(rng.uniform_int(kAlphabet));
                fresh = true;
                for (int j = 0; j < b; ++j) fresh = fresh && succ[j] != sym;
            } while (!fresh);
            succ[b] = sym;
        }
    }

    std::vector<int32_t> out;
    out.reserve(static_cast<size_t>(length));
    int prev2 = 0, prev1 = 0;
    for (int64_t i = 0; i < length; ++i) {
        int sym;
        if (rng.uniform() < kSmooth) {
            sym = static_cast<int>(rng.uniform_int(kAlphabet));
        } else {
            const double r = rng.uniform();
            double acc = 0.0;
            sym = successors[prev2 * kAlphabet + prev1][kBranches - 1];
            for (int b = 0; b < kBranches; ++b) {
                acc += kWeights[b];
                if (r < acc) {
                    sym = successors[prev2 * kAlphabet + prev1][b];
                    break;
                }
            }
        }
        out.push_back(symbol_to_byte(sym));
        prev2 = prev1;
        prev1 = sym;
    }
    return out;
}

std::vector<int32_t> load_corpus_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open corpus file: " + path);
    std::vector<int32_t> out;
    char c;
    while (is.get(c)) out.push_back(static_cast<int32_t>(static_cast<unsigned char>(c)));
    if (out.empty()) throw DataError("corpus file is empty: " + path);
    return out;
}

std::vector<int32_t> load_corpus(const std::string& path, uint64_t seed, int64_t fallback_len) {
    if (path.empty()) return markov_corpus(seed, fallback_len);
    return load_corpus_file(path);
}

}  // namespace speclab
