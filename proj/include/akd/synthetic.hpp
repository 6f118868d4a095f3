#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "akd/vocab.hpp"

namespace akd {

// Word-class sizes and production probabilities of the toy grammar that
// produces the shared target ("English-like") side.
struct GrammarSpec {
    std::size_t determiners = 6;
    std::size_t nouns = 80;
    std::size_t adjectives = 40;
    std::size_t transitive_verbs = 30;
    std::size_t intransitive_verbs = 20;
    std::size_t adverbs = 14;
    std::size_t prepositions = 10;
    double adjective_prob = 0.3;
    double adverb_prob = 0.3;
    // Clause template weights: intransitive, transitive, transitive + PP.
    std::array<double, 3> template_weights = {0.3, 0.45, 0.25};

    std::size_t num_types() const {
        return determiners + nouns + adjectives + transitive_verbs + intransitive_verbs + adverbs +
               prepositions;
    }
    void validate() const;
};

// A related set of synthetic source languages that all translate into the
// same target stream.
struct FamilySpec {
    std::vector<std::string> names;
    // Symmetric with unit diagonal; entry (i, j) is the fraction of word types
    // whose cipher token is shared between languages i and j.
    std::vector<std::vector<double>> relatedness;
    GrammarSpec grammar;
    std::vector<std::size_t> sizes;  // sentences per language

    std::size_t num_languages() const { return names.size(); }
    void validate() const;

    // Language 0 is the pivot; language i > 0 shares a fraction r[i-1] of
    // its table with it. Off-diagonal pairs among the others are r_i * r_j,
    // which is what independent sharing with the pivot produces.
    static FamilySpec star(std::vector<std::string> names, const std::vector<double>& to_pivot,
                           std::vector<std::size_t> sizes, GrammarSpec grammar = {});
};

// Constituent order of a clause: a permutation of {subject, verb, object}.
// Target order is {0, 1, 2}.
struct WordOrder {
    std::array<std::uint8_t, 3> slots = {0, 1, 2};
    bool adjective_after_noun = false;
    bool operator==(const WordOrder&) const = default;
};

struct CipherLanguage {
    std::string name;
    std::vector<std::string> table;  // target type index -> source token
    WordOrder order;
    std::size_t parent = 0;  // language the table was derived from (self for roots)
};

struct SyntheticFamily {
    FamilySpec spec;
    std::vector<std::string> target_lexicon;
    std::vector<CipherLanguage> languages;
    std::vector<TextCorpus> corpora;  // one per language, spec.sizes[i] pairs
};

// Builds the family: cipher tables derived along a tree where each language
// copies exactly round(r * types) entries of its most related earlier
// language, and samples spec.sizes[i] sentence pairs per language.
SyntheticFamily generate_family(const FamilySpec& spec, std::uint64_t seed);

// Additional sentence pairs for language `lang` (dev/test splits).
TextCorpus sample_corpus(const SyntheticFamily& family, std::size_t lang, std::size_t count,
                         std::uint64_t seed);

// Fraction of target types whose source token agrees in both tables.
double table_overlap(const CipherLanguage& a, const CipherLanguage& b);

}  // namespace akd
