#pragma once

#include <array>
#include <span>
#include <vector>

#include "akd/vocab.hpp"

namespace akd {

struct BleuStats {
    std::array<std::size_t, 4> correct{};
    std::array<std::size_t, 4> total{};
    std::size_t hyp_len = 0;
    std::size_t ref_len = 0;
};

BleuStats bleu_stats(std::span<const Sentence> hypotheses, std::span<const Sentence> references);
double bleu_from_stats(const BleuStats& stats);

// Corpus BLEU-4 on a 0..100 scale with exponential smoothing of zero
// n-gram counts (each zero-count order halves the pseudo-precision again).
double corpus_bleu(std::span<const Sentence> hypotheses, std::span<const Sentence> references);

}  // namespace akd
