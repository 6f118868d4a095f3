#include "akd/vocab.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "akd/errors.hpp"

namespace akd {

namespace {

const std::vector<std::string> kReservedTokens = {"<pad>", "<s>", "</s>", "<unk>"};

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

Sentence split_tokens(std::string_view line) {
    Sentence out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
        std::size_t j = i;
        while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
        if (j > i) out.emplace_back(line.substr(i, j - i));
        i = j;
    }
    return out;
}

std::string join_tokens(std::span<const std::string> tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += tokens[i];
    }
    return out;
}

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) {
    tokens_ = kReservedTokens;
    tokens_.insert(tokens_.end(), std::make_move_iterator(tokens.begin()),
                   std::make_move_iterator(tokens.end()));
    std::string joined;
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (tokens_[i].empty() || tokens_[i].find_first_of(" \t\r\n") != std::string::npos) {
            throw DataError("vocabulary token " + std::to_string(i) + " is empty or has whitespace");
        }
        if (!ids_.emplace(tokens_[i], static_cast<std::int32_t>(i)).second) {
            throw DataError("duplicate vocabulary token '" + tokens_[i] + "'");
        }
        joined += tokens_[i];
        joined += '\n';
    }
    hash_ = fnv1a64(joined);
}

std::int32_t Vocabulary::id(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    return it == ids_.end() ? kUnkId : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return ids_.count(std::string(token)) > 0; }

const std::string& Vocabulary::token(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw DataError("token id " + std::to_string(id) + " outside vocabulary of " +
                        std::to_string(tokens_.size()));
    }
    return tokens_[id];
}

TokenIds Vocabulary::encode(std::span<const std::string> sentence, std::size_t* unk_count) const {
    TokenIds out;
    out.reserve(sentence.size());
    for (const auto& tok : sentence) {
        const auto i = id(tok);
        if (i == kUnkId && unk_count && tok != kReservedTokens[kUnkId]) ++*unk_count;
        out.push_back(i);
    }
    return out;
}

Sentence Vocabulary::decode(std::span<const std::int32_t> ids) const {
    Sentence out;
    for (auto i : ids) {
        if (i == kEosId) break;
        if (i == kPadId || i == kBosId) continue;
        out.push_back(token(i));
    }
    return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write vocabulary " + path.string());
    os << "# akd-vocab fnv1a64=" << hex64(hash_) << " size=" << tokens_.size() << '\n';
    for (const auto& t : tokens_) os << t << '\n';
    if (!os) throw DataError("failed writing vocabulary " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw LoadError("cannot open vocabulary " + path.string());
    std::string header;
    std::getline(is, header);
    const std::string key = "fnv1a64=";
    const auto at = header.find(key);
    if (header.rfind("# akd-vocab", 0) != 0 || at == std::string::npos) {
        throw LoadError("vocabulary " + path.string() + " lacks the '# akd-vocab' header");
    }
    const std::string expected = header.substr(at + key.size(), 16);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        tokens.push_back(line);
    }
    if (tokens.size() < kNumReserved ||
        !std::equal(kReservedTokens.begin(), kReservedTokens.end(), tokens.begin())) {
        throw LoadError("vocabulary " + path.string() + " does not start with the reserved tokens");
    }
    Vocabulary vocab(std::vector<std::string>(tokens.begin() + kNumReserved, tokens.end()));
    if (hex64(vocab.hash()) != expected) {
        throw LoadError("vocabulary " + path.string() + " hash mismatch: header " + expected +
                        ", content " + hex64(vocab.hash()));
    }
    return vocab;
}

Vocabulary build_vocab(std::span<const TextCorpus> corpora, std::size_t min_freq) {
    std::map<std::string, std::size_t> counts;
    std::size_t total = 0;
    for (const auto& corpus : corpora) {
        for (const auto& pair : corpus.pairs) {
            for (const auto* side : {&pair.src, &pair.tgt}) {
                for (const auto& tok : *side) {
                    ++counts[tok];
                    ++total;
                }
            }
        }
    }
    if (total == 0) throw DataError("build_vocab: no tokens in input corpora");
    std::vector<std::pair<std::string, std::size_t>> entries;
    for (auto& [tok, n] : counts) {
        if (n < min_freq) continue;
        if (std::find(kReservedTokens.begin(), kReservedTokens.end(), tok) != kReservedTokens.end())
            continue;
        entries.emplace_back(tok, n);
    }
    std::stable_sort(entries.begin(), entries.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> tokens;
    tokens.reserve(entries.size());
    for (auto& e : entries) tokens.push_back(std::move(e.first));
    return Vocabulary(std::move(tokens));
}

}  // namespace akd
