#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "akd/corpus.hpp"
#include "akd/errors.hpp"
#include "akd/synthetic.hpp"
#include "akd/vocab.hpp"
#include "helpers.hpp"

using namespace akd;
using namespace akd::testing;

namespace {

TextCorpus small_text() {
    TextCorpus t;
    t.name = "toy";
    t.pairs = {{{"a", "b", "c"}, {"x", "y"}},
               {{"b", "c"}, {"y", "z", "z"}},
               {{"a"}, {"x", "y", "z", "w", "v"}},  // ratio 5
               {{}, {"x"}}};
    return t;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("reserved ids come first") {
    const Vocabulary v;
    CHECK(v.size() == kNumReserved);
    CHECK(v.id("<pad>") == kPadId);
    CHECK(v.id("<s>") == kBosId);
    CHECK(v.id("</s>") == kEosId);
    CHECK(v.id("<unk>") == kUnkId);
    CHECK(v.id("never-seen") == kUnkId);
}

TEST_CASE("vocabulary is sorted by frequency then token and respects min_freq") {
    const std::vector<TextCorpus> corpora = {small_text()};
    const auto v = build_vocab(corpora, 1);
    // x, y, z appear 3 times; a, b, c twice; v, w once
    const std::vector<std::string> expected = {"x", "y", "z", "a", "b", "c", "v", "w"};
    CHECK(std::vector<std::string>(v.tokens().begin() + kNumReserved, v.tokens().end()) == expected);
    const auto v3 = build_vocab(corpora, 3);
    CHECK(v3.contains("y"));
    CHECK_FALSE(v3.contains("a"));
    CHECK(build_vocab(corpora, 1).hash() == v.hash());
    CHECK(v3.hash() != v.hash());
}

TEST_CASE("encode, decode and unknown counting") {
    const Vocabulary v({"a", "b"});
    std::size_t unk = 0;
    const auto ids = v.encode(std::vector<std::string>{"a", "q", "b"}, &unk);
    CHECK(ids == TokenIds{4, kUnkId, 5});
    CHECK(unk == 1);
    CHECK(v.decode(std::vector<std::int32_t>{4, 5, kEosId, 4}) == Sentence{"a", "b"});
    CHECK_THROWS_AS(v.token(99), DataError);
    CHECK_THROWS_AS(Vocabulary({"a", "a"}), DataError);
    CHECK_THROWS_AS(Vocabulary({"a b"}), DataError);
}

TEST_CASE("vocabulary file round trip and tamper detection") {
    TempDir dir("vocab");
    const Vocabulary v({"alpha", "beta", "gamma"});
    v.save(dir / "v.txt");
    const auto back = Vocabulary::load(dir / "v.txt");
    CHECK(back.tokens() == v.tokens());
    CHECK(back.hash() == v.hash());

    std::string text = slurp(dir / "v.txt");
    text.replace(text.find("beta"), 4, "bet4");
    std::ofstream(dir / "bad.txt") << text;
    CHECK_THROWS_AS(Vocabulary::load(dir / "bad.txt"), LoadError);
    std::ofstream(dir / "nohdr.txt") << "<pad>\n<s>\n";
    CHECK_THROWS_AS(Vocabulary::load(dir / "nohdr.txt"), LoadError);
    CHECK_THROWS_AS(Vocabulary::load(dir / "missing.txt"), LoadError);
}

TEST_CASE("length-ratio and empty-line filtering") {
    const auto v = build_vocab(std::vector<TextCorpus>{small_text()});
    EncodeReport rep;
    const auto c = encode_corpus(small_text(), v, &rep, 1.5);
    CHECK(c.size() == 2);
    CHECK(rep.pairs_read == 4);
    CHECK(rep.dropped_length_ratio == 1);
    CHECK(rep.dropped_empty == 1);
    CHECK(c.vocab_hash == v.hash());
    const auto all = encode_corpus(small_text(), v, &rep, 0.0);
    CHECK(all.size() == 3);
    CHECK(length_ratio(2, 3) == doctest::Approx(1.5));
    CHECK(length_ratio(3, 2) == doctest::Approx(1.5));
}

TEST_CASE("text corpus files round trip and mismatched line counts fail") {
    TempDir dir("text");
    auto t = small_text();
    t.pairs.pop_back();
    write_text_corpus(t, dir / "a.src", dir / "a.tgt");
    const auto back = read_text_corpus(dir / "a.src", dir / "a.tgt", "toy");
    REQUIRE(back.pairs.size() == t.pairs.size());
    for (std::size_t i = 0; i < t.pairs.size(); ++i) {
        CHECK(back.pairs[i].src == t.pairs[i].src);
        CHECK(back.pairs[i].tgt == t.pairs[i].tgt);
    }
    std::ofstream(dir / "b.src") << "a b\nc\n";
    std::ofstream(dir / "b.tgt") << "x\n";
    CHECK_THROWS_WITH_AS(read_text_corpus(dir / "b.src", dir / "b.tgt"), doctest::Contains("line count"), DataError);
    CHECK_THROWS_AS(read_text_corpus(dir / "nope.src", dir / "nope.tgt"), DataError);
}

TEST_CASE("minibatch layout") {
    const std::vector<SentencePair> pairs = {{{5, 6, 7}, {8, 9}}, {{5}, {10}}};
    const auto b = make_batch(std::span<const SentencePair>(pairs), 4);
    CHECK(b.batch_id == 4);
    CHECK(b.src_len == 3);
    CHECK(b.tgt_len == 3);
    CHECK(b.src_ids == std::vector<std::int32_t>{5, 6, 7, 5, kPadId, kPadId});
    CHECK(b.src_mask == std::vector<std::uint8_t>{1, 1, 1, 1, 0, 0});
    CHECK(b.tgt_in == std::vector<std::int32_t>{kBosId, 8, 9, kBosId, 10, kPadId});
    CHECK(b.tgt_out == std::vector<std::int32_t>{8, 9, kEosId, 10, kEosId, kPadId});
    CHECK(b.tgt_mask == std::vector<std::uint8_t>{1, 1, 1, 1, 1, 0});
    CHECK(b.token_count == 5);
}

TEST_CASE("epoch batches cover the corpus once within the token budget") {
    std::mt19937_64 rng(3);
    ParallelCorpus c;
    c.name = "rand";
    c.pairs = random_pairs(rng, 300, 30, 12);
    c.pairs.push_back({{5}, TokenIds(80, 6)});  // longer than the budget
    const auto e = make_epoch_batches(c, 64, 11);
    CHECK(e.skipped == 1);
    std::multiset<std::size_t> seen;
    for (const auto& b : e.batches) {
        CHECK(b.batch_size * b.tgt_len <= 64);
        seen.insert(b.pair_index.begin(), b.pair_index.end());
    }
    CHECK(seen.size() == 300);
    CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == 300);

    const auto again = make_epoch_batches(c, 64, 11);
    REQUIRE(again.batches.size() == e.batches.size());
    for (std::size_t i = 0; i < e.batches.size(); ++i) CHECK(again.batches[i].pair_index == e.batches[i].pair_index);
    const auto other = make_epoch_batches(c, 64, 12);
    bool differs = other.batches.size() != e.batches.size();
    for (std::size_t i = 0; !differs && i < e.batches.size(); ++i)
        differs = other.batches[i].pair_index != e.batches[i].pair_index;
    CHECK(differs);
}

TEST_CASE("eval batches keep corpus order") {
    std::mt19937_64 rng(1);
    ParallelCorpus c;
    c.pairs = random_pairs(rng, 50, 20, 8);
    std::vector<std::size_t> order;
    for (const auto& b : make_eval_batches(c, 40)) order.insert(order.end(), b.pair_index.begin(), b.pair_index.end());
    std::vector<std::size_t> expected(50);
    std::iota(expected.begin(), expected.end(), 0);
    CHECK(order == expected);
}

TEST_CASE("synthetic family honours relatedness and sizes") {
    GrammarSpec g;
    const auto spec = FamilySpec::star({"pivot", "near", "mid", "far"}, {0.8, 0.4, 0.1}, {50, 80, 80, 80}, g);
    const auto fam = generate_family(spec, 9);
    REQUIRE(fam.languages.size() == 4);
    const double types = static_cast<double>(g.num_types());
    for (std::size_t i = 1; i < 4; ++i) {
        CHECK(fam.languages[i].parent == 0);
        CHECK(std::abs(table_overlap(fam.languages[0], fam.languages[i]) - spec.relatedness[0][i]) <= 1.0 / types);
    }
    for (std::size_t i = 0; i < 4; ++i) CHECK(fam.corpora[i].pairs.size() == spec.sizes[i]);
    // every language translates into the same target lexicon
    std::set<std::string> lexicon(fam.target_lexicon.begin(), fam.target_lexicon.end());
    for (const auto& c : fam.corpora) {
        for (const auto& p : c.pairs) {
            for (const auto& w : p.tgt) REQUIRE(lexicon.count(w));
        }
    }
}

TEST_CASE("synthetic generation is deterministic per seed") {
    const auto spec = FamilySpec::star({"a", "b"}, {0.5}, {30, 30});
    const auto f1 = generate_family(spec, 4), f2 = generate_family(spec, 4), f3 = generate_family(spec, 5);
    CHECK(f1.corpora[1].pairs.size() == f2.corpora[1].pairs.size());
    bool same = true, differs = false;
    for (std::size_t i = 0; i < 30; ++i) {
        same = same && f1.corpora[1].pairs[i].src == f2.corpora[1].pairs[i].src;
        differs = differs || f1.corpora[1].pairs[i].src != f3.corpora[1].pairs[i].src;
    }
    CHECK(same);
    CHECK(differs);
    const auto s1 = sample_corpus(f1, 0, 10, 77), s2 = sample_corpus(f1, 0, 10, 77);
    for (std::size_t i = 0; i < 10; ++i) CHECK(s1.pairs[i].tgt == s2.pairs[i].tgt);
}

TEST_CASE("family settings validation") {
    CHECK_THROWS_AS(FamilySpec::star({"a", "b"}, {0.5, 0.2}, {1, 1}), ConfigError);
    auto spec = FamilySpec::star({"a", "b"}, {0.5}, {1, 1});
    spec.relatedness[0][1] = 0.7;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    spec = FamilySpec::star({"a", "a"}, {0.5}, {1, 1});
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    GrammarSpec g;
    g.nouns = 0;
    CHECK_THROWS_AS(g.validate(), ConfigError);
}
