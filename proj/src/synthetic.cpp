#include "akd/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>

#include "akd/errors.hpp"

namespace akd {

namespace {

enum WordClass : std::size_t { kDet, kNoun, kAdj, kVerbT, kVerbI, kAdv, kPrep, kNumClasses };

const std::array<WordOrder, 6> kOrders = {{
    {{0, 2, 1}, false},  // SOV
    {{0, 1, 2}, true},   // SVO, adjectives after nouns
    {{1, 0, 2}, false},  // VSO
    {{2, 0, 1}, true},   // OSV
    {{0, 2, 1}, true},   // SOV, adjectives after nouns
    {{1, 2, 0}, false},  // VOS
}};

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

std::string pseudo_word(std::size_t g) {
    static const char* cons = "bdfgklmnprstvz";
    static const char* vows = "aeiou";
    std::string w;
    std::size_t x = g;
    do {
        w += cons[x % 14];
        x /= 14;
        w += vows[x % 5];
        x /= 5;
    } while (x > 0);
    return w;
}

struct Lexicon {
    std::array<std::size_t, kNumClasses> offset{};
    std::array<std::size_t, kNumClasses> count{};
    std::vector<std::string> words;
    // Zipf-like sampling weights within each class.
    std::array<std::discrete_distribution<std::size_t>, kNumClasses> pick;

    explicit Lexicon(const GrammarSpec& g) {
        count = {g.determiners,       g.nouns,   g.adjectives,  g.transitive_verbs,
                 g.intransitive_verbs, g.adverbs, g.prepositions};
        static const std::vector<std::string> dets = {"the", "a", "this", "that", "every", "some",
                                                      "one", "no", "each", "any"};
        std::size_t next = 0;
        for (std::size_t c = 0; c < kNumClasses; ++c) {
            offset[c] = next;
            std::vector<double> w(count[c]);
            for (std::size_t i = 0; i < count[c]; ++i) {
                const std::size_t g_idx = next + i;
                if (c == kDet && i < dets.size())
                    words.push_back(dets[i]);
                else
                    words.push_back(pseudo_word(g_idx + 20));
                w[i] = 1.0 / std::pow(static_cast<double>(i + 1), 0.7);
            }
            pick[c] = std::discrete_distribution<std::size_t>(w.begin(), w.end());
            next += count[c];
        }
    }

    std::size_t draw(WordClass c, std::mt19937_64& rng) { return offset[c] + pick[c](rng); }
};

struct NounPhrase {
    std::size_t det, noun;
    std::optional<std::size_t> adj;
};

struct Clause {
    NounPhrase subject;
    std::size_t verb;
    std::optional<std::size_t> adverb;
    std::optional<NounPhrase> object;
    std::optional<std::pair<std::size_t, NounPhrase>> pp;
};

NounPhrase make_np(Lexicon& lex, const GrammarSpec& g, std::mt19937_64& rng) {
    std::bernoulli_distribution has_adj(g.adjective_prob);
    NounPhrase np{lex.draw(kDet, rng), lex.draw(kNoun, rng), std::nullopt};
    if (has_adj(rng)) np.adj = lex.draw(kAdj, rng);
    return np;
}

Clause make_clause(Lexicon& lex, const GrammarSpec& g, std::mt19937_64& rng) {
    std::discrete_distribution<int> tmpl(g.template_weights.begin(), g.template_weights.end());
    std::bernoulli_distribution has_adv(g.adverb_prob);
    const int t = tmpl(rng);
    Clause c{make_np(lex, g, rng), 0, std::nullopt, std::nullopt, std::nullopt};
    if (t == 0) {
        c.verb = lex.draw(kVerbI, rng);
    } else {
        c.verb = lex.draw(kVerbT, rng);
        c.object = make_np(lex, g, rng);
        if (t == 2) c.pp = std::make_pair(lex.draw(kPrep, rng), make_np(lex, g, rng));
    }
    if (has_adv(rng)) c.adverb = lex.draw(kAdv, rng);
    return c;
}

void emit_np(const NounPhrase& np, bool adj_after, std::vector<std::size_t>& out) {
    out.push_back(np.det);
    if (np.adj && !adj_after) out.push_back(*np.adj);
    out.push_back(np.noun);
    if (np.adj && adj_after) out.push_back(*np.adj);
}

std::vector<std::size_t> linearize(const Clause& c, const WordOrder& order) {
    std::array<std::vector<std::size_t>, 3> parts;
    emit_np(c.subject, order.adjective_after_noun, parts[0]);
    parts[1].push_back(c.verb);
    if (c.adverb) parts[1].push_back(*c.adverb);
    if (c.object) emit_np(*c.object, order.adjective_after_noun, parts[2]);
    if (c.pp) {
        parts[2].push_back(c.pp->first);
        emit_np(c.pp->second, order.adjective_after_noun, parts[2]);
    }
    std::vector<std::size_t> out;
    for (auto slot : order.slots) out.insert(out.end(), parts[slot].begin(), parts[slot].end());
    return out;
}

TextCorpus sample_pairs(const SyntheticFamily& family, std::size_t lang, std::size_t count,
                        std::mt19937_64& rng) {
    Lexicon lex(family.spec.grammar);
    const auto& language = family.languages.at(lang);
    const WordOrder target_order{};
    TextCorpus out;
    out.name = language.name;
    out.pairs.reserve(count);
    for (std::size_t n = 0; n < count; ++n) {
        const Clause c = make_clause(lex, family.spec.grammar, rng);
        TextPair pair;
        for (auto w : linearize(c, language.order)) pair.src.push_back(language.table[w]);
        for (auto w : linearize(c, target_order)) pair.tgt.push_back(family.target_lexicon[w]);
        out.pairs.push_back(std::move(pair));
    }
    return out;
}

}  // namespace

void GrammarSpec::validate() const {
    if (determiners == 0 || nouns == 0 || transitive_verbs == 0 || intransitive_verbs == 0 ||
        (adjective_prob > 0 && adjectives == 0) || (adverb_prob > 0 && adverbs == 0) ||
        (template_weights[2] > 0 && prepositions == 0)) {
        throw ConfigError("grammar: every word class used by a production needs at least one word");
    }
    for (double p : {adjective_prob, adverb_prob}) {
        if (p < 0.0 || p > 1.0) throw ConfigError("grammar: probabilities must lie in [0,1]");
    }
    if (std::any_of(template_weights.begin(), template_weights.end(), [](double w) { return w < 0; }) ||
        std::accumulate(template_weights.begin(), template_weights.end(), 0.0) <= 0.0) {
        throw ConfigError("grammar: template weights must be nonnegative with a positive sum");
    }
}

void FamilySpec::validate() const {
    const std::size_t n = names.size();
    if (n == 0) throw ConfigError("family: no languages");
    if (relatedness.size() != n || sizes.size() != n) {
        throw ConfigError("family: relatedness and sizes must have one entry per language");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (relatedness[i].size() != n) throw ConfigError("family: relatedness must be square");
        if (relatedness[i][i] != 1.0) {
            throw ConfigError("family: relatedness diagonal must be 1 (language " + names[i] + ")");
        }
        for (std::size_t j = 0; j < n; ++j) {
            const double r = relatedness[i][j];
            if (r < 0.0 || r > 1.0) throw ConfigError("family: relatedness outside [0,1]");
            if (r != relatedness[j][i]) {
                throw ConfigError("family: relatedness not symmetric between " + names[i] + " and " +
                                  names[j]);
            }
        }
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (names[i] == names[j]) throw ConfigError("family: duplicate language name " + names[i]);
    grammar.validate();
}

FamilySpec FamilySpec::star(std::vector<std::string> names, const std::vector<double>& to_pivot,
                            std::vector<std::size_t> sizes, GrammarSpec grammar) {
    const std::size_t n = names.size();
    if (to_pivot.size() + 1 != n) throw ConfigError("family: need one relatedness per non-pivot language");
    FamilySpec spec;
    spec.names = std::move(names);
    spec.sizes = std::move(sizes);
    spec.grammar = grammar;
    spec.relatedness.assign(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double ri = i == 0 ? 1.0 : to_pivot[i - 1];
            const double rj = j == 0 ? 1.0 : to_pivot[j - 1];
            spec.relatedness[i][j] = i == j ? 1.0 : ri * rj;
        }
    }
    return spec;
}

SyntheticFamily generate_family(const FamilySpec& spec, std::uint64_t seed) {
    spec.validate();
    SyntheticFamily family;
    family.spec = spec;
    Lexicon lex(spec.grammar);
    family.target_lexicon = lex.words;
    const std::size_t types = lex.words.size();

    std::mt19937_64 table_rng(mix_seed(seed, 0));
    for (std::size_t j = 0; j < spec.num_languages(); ++j) {
        CipherLanguage lang;
        lang.name = spec.names[j];
        lang.parent = j;
        double best = 0.0;
        for (std::size_t i = 0; i < j; ++i) {
            if (spec.relatedness[i][j] > best) {
                best = spec.relatedness[i][j];
                lang.parent = i;
            }
        }
        lang.table.resize(types);
        for (std::size_t w = 0; w < types; ++w) lang.table[w] = lang.name + "." + std::to_string(w);
        if (lang.parent == j) {
            lang.order = kOrders[j % kOrders.size()];
        } else {
            const auto& parent = family.languages[lang.parent];
            const auto shared = static_cast<std::size_t>(std::llround(best * static_cast<double>(types)));
            std::vector<std::size_t> perm(types);
            std::iota(perm.begin(), perm.end(), 0);
            std::shuffle(perm.begin(), perm.end(), table_rng);
            for (std::size_t k = 0; k < shared; ++k) lang.table[perm[k]] = parent.table[perm[k]];
            if (best >= 0.5) {
                lang.order = parent.order;
            } else {
                std::size_t pick = table_rng() % kOrders.size();
                while (kOrders[pick] == parent.order) pick = (pick + 1) % kOrders.size();
                lang.order = kOrders[pick];
            }
        }
        family.languages.push_back(std::move(lang));
    }

    for (std::size_t j = 0; j < spec.num_languages(); ++j) {
        std::mt19937_64 rng(mix_seed(seed, 100 + j));
        family.corpora.push_back(sample_pairs(family, j, spec.sizes[j], rng));
    }
    return family;
}

TextCorpus sample_corpus(const SyntheticFamily& family, std::size_t lang, std::size_t count,
                         std::uint64_t seed) {
    std::mt19937_64 rng(mix_seed(seed, 1000 + lang));
    return sample_pairs(family, lang, count, rng);
}

double table_overlap(const CipherLanguage& a, const CipherLanguage& b) {
    if (a.table.size() != b.table.size() || a.table.empty()) {
        throw ContractError("table_overlap: tables of different size");
    }
    std::size_t same = 0;
    for (std::size_t w = 0; w < a.table.size(); ++w) same += a.table[w] == b.table[w];
    return static_cast<double>(same) / static_cast<double>(a.table.size());
}

}  // namespace akd
