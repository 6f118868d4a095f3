#include "akd/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <random>

#include "akd/errors.hpp"

namespace akd {

std::size_t ParallelCorpus::target_tokens() const {
    std::size_t n = 0;
    for (const auto& p : pairs) n += p.tgt.size() + 1;  // + eos
    return n;
}

void ParallelCorpus::validate() const {
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& p = pairs[i];
        if (p.src.empty() || p.tgt.empty()) {
            throw DataError(name + ": pair " + std::to_string(i) + " has an empty side");
        }
        for (const auto* side : {&p.src, &p.tgt}) {
            for (auto id : *side) {
                if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
                    throw DataError(name + ": pair " + std::to_string(i) + " has id " +
                                    std::to_string(id) + " outside vocabulary of " +
                                    std::to_string(vocab_size));
                }
            }
        }
    }
}

double length_ratio(std::size_t src_len, std::size_t tgt_len) {
    if (src_len == 0 || tgt_len == 0) return std::numeric_limits<double>::infinity();
    const double s = static_cast<double>(src_len), t = static_cast<double>(tgt_len);
    return std::max(s / t, t / s);
}

ParallelCorpus encode_corpus(const TextCorpus& text, const Vocabulary& vocab, EncodeReport* report,
                             double max_length_ratio) {
    EncodeReport local;
    ParallelCorpus out;
    out.name = text.name;
    out.vocab_hash = vocab.hash();
    out.vocab_size = vocab.size();
    out.pairs.reserve(text.pairs.size());
    for (const auto& pair : text.pairs) {
        ++local.pairs_read;
        if (pair.src.empty() || pair.tgt.empty()) {
            ++local.dropped_empty;
            continue;
        }
        if (max_length_ratio > 0.0 &&
            length_ratio(pair.src.size(), pair.tgt.size()) > max_length_ratio) {
            ++local.dropped_length_ratio;
            continue;
        }
        out.pairs.push_back({vocab.encode(pair.src, &local.unk_tokens),
                             vocab.encode(pair.tgt, &local.unk_tokens)});
    }
    if (report) *report = local;
    return out;
}

namespace {

std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open corpus file " + path.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(is, line)) lines.push_back(std::move(line));
    return lines;
}

}  // namespace

TextCorpus read_text_corpus(const std::filesystem::path& src_path,
                            const std::filesystem::path& tgt_path, std::string name) {
    const auto src = read_lines(src_path);
    const auto tgt = read_lines(tgt_path);
    if (src.size() != tgt.size()) {
        throw DataError("line count mismatch: " + src_path.string() + " has " +
                        std::to_string(src.size()) + " lines, " + tgt_path.string() + " has " +
                        std::to_string(tgt.size()));
    }
    TextCorpus out;
    out.name = name.empty() ? src_path.stem().string() : std::move(name);
    out.pairs.reserve(src.size());
    for (std::size_t i = 0; i < src.size(); ++i)
        out.pairs.push_back({split_tokens(src[i]), split_tokens(tgt[i])});
    return out;
}

void write_text_corpus(const TextCorpus& corpus, const std::filesystem::path& src_path,
                       const std::filesystem::path& tgt_path) {
    std::ofstream s(src_path, std::ios::binary), t(tgt_path, std::ios::binary);
    if (!s || !t) throw DataError("cannot write corpus " + src_path.string());
    for (const auto& p : corpus.pairs) {
        s << join_tokens(p.src) << '\n';
        t << join_tokens(p.tgt) << '\n';
    }
}

ParallelCorpus load_parallel(const std::filesystem::path& src_path,
                             const std::filesystem::path& tgt_path, const Vocabulary& vocab,
                             EncodeReport* report, double max_length_ratio) {
    const auto text = read_text_corpus(src_path, tgt_path);
    EncodeReport local;
    auto corpus = encode_corpus(text, vocab, &local, max_length_ratio);
    if (local.dropped_length_ratio || local.dropped_empty) {
        std::cerr << "load_parallel: " << src_path.string() << ": dropped "
                  << local.dropped_length_ratio << " pairs by length ratio, " << local.dropped_empty
                  << " empty\n";
    }
    if (report) *report = local;
    return corpus;
}

MiniBatch make_batch(std::span<const SentencePair> pairs, std::size_t batch_id) {
    MiniBatch b;
    b.batch_id = batch_id;
    b.batch_size = pairs.size();
    for (const auto& p : pairs) {
        b.src_len = std::max(b.src_len, p.src.size());
        b.tgt_len = std::max(b.tgt_len, p.tgt.size() + 1);
    }
    b.src_ids.assign(b.batch_size * b.src_len, kPadId);
    b.src_mask.assign(b.batch_size * b.src_len, 0);
    b.tgt_in.assign(b.batch_size * b.tgt_len, kPadId);
    b.tgt_out.assign(b.batch_size * b.tgt_len, kPadId);
    b.tgt_mask.assign(b.batch_size * b.tgt_len, 0);
    for (std::size_t r = 0; r < pairs.size(); ++r) {
        const auto& p = pairs[r];
        for (std::size_t j = 0; j < p.src.size(); ++j) {
            b.src_ids[r * b.src_len + j] = p.src[j];
            b.src_mask[r * b.src_len + j] = 1;
        }
        const std::size_t n = p.tgt.size();
        for (std::size_t j = 0; j <= n; ++j) {
            b.tgt_in[r * b.tgt_len + j] = j == 0 ? kBosId : p.tgt[j - 1];
            b.tgt_out[r * b.tgt_len + j] = j == n ? kEosId : p.tgt[j];
            b.tgt_mask[r * b.tgt_len + j] = 1;
        }
        b.token_count += n + 1;
    }
    return b;
}

MiniBatch make_batch(const ParallelCorpus& corpus, std::span<const std::size_t> indices,
                     std::size_t batch_id) {
    std::vector<SentencePair> pairs;
    pairs.reserve(indices.size());
    for (auto i : indices) pairs.push_back(corpus.pairs.at(i));
    auto b = make_batch(pairs, batch_id);
    b.pair_index.assign(indices.begin(), indices.end());
    return b;
}

namespace {

constexpr std::size_t kSortWindow = 256;

std::size_t padded_target(const SentencePair& p) { return p.tgt.size() + 1; }

std::vector<std::vector<std::size_t>> pack(const ParallelCorpus& corpus,
                                           std::span<const std::size_t> order,
                                           std::size_t max_tokens) {
    std::vector<std::vector<std::size_t>> groups;
    std::vector<std::size_t> current;
    std::size_t longest = 0;
    for (auto i : order) {
        const std::size_t len = padded_target(corpus.pairs[i]);
        const std::size_t grown = std::max(longest, len);
        if (!current.empty() && (current.size() + 1) * grown > max_tokens) {
            groups.push_back(std::move(current));
            current.clear();
            longest = 0;
        }
        current.push_back(i);
        longest = std::max(longest, len);
    }
    if (!current.empty()) groups.push_back(std::move(current));
    return groups;
}

}  // namespace

EpochBatches make_epoch_batches(const ParallelCorpus& corpus, std::size_t max_tokens,
                                std::uint64_t epoch_seed) {
    EpochBatches out;
    std::vector<std::size_t> order;
    order.reserve(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& p = corpus.pairs[i];
        if (padded_target(p) > max_tokens || p.src.size() > max_tokens) {
            ++out.skipped;
            continue;
        }
        order.push_back(i);
    }
    if (out.skipped) {
        std::cerr << "make_epoch_batches: " << corpus.name << ": skipped " << out.skipped
                  << " pairs longer than max_tokens=" << max_tokens << '\n';
    }
    std::mt19937_64 rng(epoch_seed);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += kSortWindow) {
        const auto end = std::min(order.size(), start + kSortWindow);
        std::stable_sort(order.begin() + start, order.begin() + end, [&](auto a, auto b) {
            return padded_target(corpus.pairs[a]) < padded_target(corpus.pairs[b]);
        });
    }
    auto groups = pack(corpus, order, max_tokens);
    std::shuffle(groups.begin(), groups.end(), rng);
    out.batches.reserve(groups.size());
    for (std::size_t b = 0; b < groups.size(); ++b)
        out.batches.push_back(make_batch(corpus, groups[b], b));
    return out;
}

std::vector<MiniBatch> make_eval_batches(const ParallelCorpus& corpus, std::size_t max_tokens) {
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<MiniBatch> out;
    auto groups = pack(corpus, order, max_tokens);
    for (std::size_t b = 0; b < groups.size(); ++b) out.push_back(make_batch(corpus, groups[b], b));
    return out;
}

}  // namespace akd
