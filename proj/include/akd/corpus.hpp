#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "akd/vocab.hpp"

namespace akd {

struct SentencePair {
    TokenIds src;
    TokenIds tgt;
};

// Id-encoded parallel data tied to one vocabulary.
struct ParallelCorpus {
    std::string name;
    std::vector<SentencePair> pairs;
    std::uint64_t vocab_hash = 0;
    std::size_t vocab_size = 0;

    std::size_t size() const { return pairs.size(); }
    std::size_t target_tokens() const;
    // Throws DataError on empty sequences or out-of-range ids.
    void validate() const;
};

struct EncodeReport {
    std::size_t pairs_read = 0;
    std::size_t dropped_length_ratio = 0;
    std::size_t dropped_empty = 0;
    std::size_t unk_tokens = 0;
};

// Larger of |src|/|tgt| and |tgt|/|src|.
double length_ratio(std::size_t src_len, std::size_t tgt_len);

// Encodes a text corpus; pairs whose length ratio exceeds `max_length_ratio`
// are dropped and counted. A ratio <= 0 disables the filter.
ParallelCorpus encode_corpus(const TextCorpus& text, const Vocabulary& vocab,
                             EncodeReport* report = nullptr, double max_length_ratio = 1.5);

// Reads line-aligned, whitespace-tokenized files. Line count mismatch is a
// DataError naming both counts.
TextCorpus read_text_corpus(const std::filesystem::path& src_path,
                            const std::filesystem::path& tgt_path, std::string name = {});
void write_text_corpus(const TextCorpus& corpus, const std::filesystem::path& src_path,
                       const std::filesystem::path& tgt_path);

ParallelCorpus load_parallel(const std::filesystem::path& src_path,
                             const std::filesystem::path& tgt_path, const Vocabulary& vocab,
                             EncodeReport* report = nullptr, double max_length_ratio = 1.5);

// Padded mini-batch. Row-major [batch x src_len] and [batch x tgt_len]
// matrices; tgt_in is bos + y, tgt_out is y + eos.
struct MiniBatch {
    std::size_t batch_size = 0;
    std::size_t src_len = 0;
    std::size_t tgt_len = 0;
    std::vector<std::int32_t> src_ids;
    std::vector<std::int32_t> tgt_in;
    std::vector<std::int32_t> tgt_out;
    std::vector<std::uint8_t> src_mask;
    std::vector<std::uint8_t> tgt_mask;
    std::size_t token_count = 0;
    std::size_t batch_id = 0;
    std::vector<std::size_t> pair_index;  // positions in the source corpus
};

MiniBatch make_batch(const ParallelCorpus& corpus, std::span<const std::size_t> indices,
                     std::size_t batch_id = 0);
MiniBatch make_batch(std::span<const SentencePair> pairs, std::size_t batch_id = 0);

inline constexpr std::size_t kFullMaxTokens = 4028;
inline constexpr std::size_t kDeskMaxTokens = 512;

struct EpochBatches {
    std::vector<MiniBatch> batches;
    std::size_t skipped = 0;  // pairs whose padded cost alone exceeds max_tokens
};

// Shuffles with `epoch_seed`, sorts by target length inside shuffled windows,
// then packs greedily so that sentences x max target length <= max_tokens.
// Batch order is shuffled as well. Every kept pair lands in exactly one batch.
EpochBatches make_epoch_batches(const ParallelCorpus& corpus, std::size_t max_tokens,
                                std::uint64_t epoch_seed);

// Sequential packing without shuffling, for evaluation.
std::vector<MiniBatch> make_eval_batches(const ParallelCorpus& corpus, std::size_t max_tokens);

}  // namespace akd
