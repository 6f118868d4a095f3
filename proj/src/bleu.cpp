#include "akd/bleu.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "akd/errors.hpp"

namespace akd {

namespace {

using Ngram = std::vector<std::string>;

std::map<Ngram, std::size_t> count_ngrams(const Sentence& s, std::size_t n) {
    std::map<Ngram, std::size_t> counts;
    if (s.size() < n) return counts;
    for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[Ngram(s.begin() + i, s.begin() + i + n)];
    return counts;
}

}  // namespace

BleuStats bleu_stats(std::span<const Sentence> hypotheses, std::span<const Sentence> references) {
    if (hypotheses.size() != references.size()) {
        throw ContractError("corpus_bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                            std::to_string(references.size()) + " references");
    }
    BleuStats st;
    for (std::size_t i = 0; i < hypotheses.size(); ++i) {
        const auto& hyp = hypotheses[i];
        const auto& ref = references[i];
        st.hyp_len += hyp.size();
        st.ref_len += ref.size();
        for (std::size_t n = 1; n <= 4; ++n) {
            const auto h = count_ngrams(hyp, n);
            const auto r = count_ngrams(ref, n);
            for (const auto& [gram, c] : h) {
                auto it = r.find(gram);
                if (it != r.end()) st.correct[n - 1] += std::min(c, it->second);
            }
            st.total[n - 1] += hyp.size() >= n ? hyp.size() - n + 1 : 0;
        }
    }
    return st;
}

double bleu_from_stats(const BleuStats& st) {
    std::array<double, 4> precision{};
    if (std::all_of(st.correct.begin(), st.correct.end(), [](std::size_t c) { return c == 0; })) return 0.0;
    double smooth = 1.0;
    for (std::size_t n = 0; n < 4; ++n) {
        if (st.total[n] == 0) break;
        if (st.correct[n] == 0) {
            smooth *= 2.0;
            precision[n] = 100.0 / (smooth * static_cast<double>(st.total[n]));
        } else {
            precision[n] = 100.0 * static_cast<double>(st.correct[n]) / static_cast<double>(st.total[n]);
        }
    }
    double bp = 1.0;
    if (st.hyp_len < st.ref_len) {
        bp = st.hyp_len > 0 ? std::exp(1.0 - static_cast<double>(st.ref_len) / static_cast<double>(st.hyp_len)) : 0.0;
    }
    double log_sum = 0.0;
    for (double p : precision) log_sum += p > 0.0 ? std::log(p) : -9999999999.0;
    return bp * std::exp(log_sum / 4.0);
}

double corpus_bleu(std::span<const Sentence> hypotheses, std::span<const Sentence> references) {
    return bleu_from_stats(bleu_stats(hypotheses, references));
}

}  // namespace akd
