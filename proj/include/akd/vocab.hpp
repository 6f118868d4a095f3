#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace akd {

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kBosId = 1;
inline constexpr std::int32_t kEosId = 2;
inline constexpr std::int32_t kUnkId = 3;
inline constexpr std::size_t kNumReserved = 4;

using TokenIds = std::vector<std::int32_t>;
using Sentence = std::vector<std::string>;

struct TextPair {
    Sentence src;
    Sentence tgt;
};

// Tokenized parallel text before id encoding.
struct TextCorpus {
    std::string name;
    std::vector<TextPair> pairs;
};

Sentence split_tokens(std::string_view line);
std::string join_tokens(std::span<const std::string> tokens);

// Joint source/target token table. Ids 0..3 are pad/bos/eos/unk.
class Vocabulary {
public:
    Vocabulary();
    // `tokens` excludes the reserved entries; duplicates are rejected.
    explicit Vocabulary(std::vector<std::string> tokens);

    std::size_t size() const { return tokens_.size(); }
    std::int32_t id(std::string_view token) const;
    bool contains(std::string_view token) const;
    const std::string& token(std::int32_t id) const;
    const std::vector<std::string>& tokens() const { return tokens_; }

    TokenIds encode(std::span<const std::string> sentence, std::size_t* unk_count = nullptr) const;
    // Drops pad/bos and stops at eos.
    Sentence decode(std::span<const std::int32_t> ids) const;

    // FNV-1a over the newline-joined token list; identifies a vocabulary
    // across model and corpus files.
    std::uint64_t hash() const { return hash_; }

    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::int32_t> ids_;
    std::uint64_t hash_ = 0;
};

// Union vocabulary over both sides of every corpus. Tokens seen fewer than
// `min_freq` times are left out. Order: frequency descending, then
// lexicographic, so the result does not depend on corpus order.
Vocabulary build_vocab(std::span<const TextCorpus> corpora, std::size_t min_freq = 1);

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 1469598103934665603ULL);

}  // namespace akd
