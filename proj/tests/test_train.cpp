#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "akd/bleu.hpp"
#include "akd/distill.hpp"
#include "akd/errors.hpp"
#include "akd/ops.hpp"
#include "akd/train.hpp"
#include "helpers.hpp"

using namespace akd;
using namespace akd::testing;

namespace {

ParallelCorpus toy_corpus(std::uint64_t seed, std::size_t count, std::size_t vocab) {
    std::mt19937_64 rng(seed);
    ParallelCorpus c;
    c.name = "toy";
    c.pairs = random_pairs(rng, count, vocab, 6);
    c.vocab_size = vocab;
    c.vocab_hash = 0x77;
    return c;
}

TrainConfig quick_config() {
    TrainConfig t;
    t.epochs = 2;
    t.max_lr = 3e-3;
    t.warmup_steps = 4;
    t.max_tokens = 40;
    t.seed = 5;
    return t;
}

std::vector<Sentence> read_lines(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::vector<Sentence> out;
    std::string line;
    while (std::getline(in, line)) out.push_back(split_tokens(line));
    return out;
}

std::vector<Sentence> sentences(std::initializer_list<const char*> lines) {
    std::vector<Sentence> out;
    for (const char* l : lines) out.push_back(split_tokens(l));
    return out;
}

}  // namespace

TEST_CASE("warmup schedule") {
    CHECK(lr_schedule(1, 4, 1.0) == doctest::Approx(0.25));
    CHECK(lr_schedule(4, 4, 1.0) == doctest::Approx(1.0));
    CHECK(lr_schedule(16, 4, 1.0) == doctest::Approx(0.5));
    CHECK_THROWS_AS(lr_schedule(0, 4, 1.0), ContractError);
    double prev = 0.0;
    for (std::size_t s = 1; s <= 10; ++s) {
        CHECK(lr_schedule(s, 10, 1.0) > prev);
        prev = lr_schedule(s, 10, 1.0);
    }
}

TEST_CASE("derived seeds differ per stream and repeat per seed") {
    CHECK(derive_seed(1, kInitStream) == derive_seed(1, kInitStream));
    CHECK(derive_seed(1, kInitStream) != derive_seed(1, kDropoutStream));
    CHECK(derive_seed(1, kInitStream) != derive_seed(2, kInitStream));
}

TEST_CASE("first adam step moves each coordinate by lr against the gradient sign") {
    Tensor w({4}, {0.5, -1.0, 2.0, 0.0}, true);
    const NamedTensors params = {{"w", w}};
    auto state = make_optimizer_state(params);
    backward(dot_const(w, std::vector<double>{3.0, -0.2, 1e-3, -50.0}));
    adam_step(params, state, 0.01);
    CHECK(w.at(0) == doctest::Approx(0.49).epsilon(1e-6));
    CHECK(w.at(1) == doctest::Approx(-0.99).epsilon(1e-6));
    CHECK(w.at(2) == doctest::Approx(1.99).epsilon(1e-6));
    CHECK(w.at(3) == doctest::Approx(0.01).epsilon(1e-6));
    for (double g : w.grad()) CHECK(g == 0.0);
    CHECK(state.t == 1);
}

TEST_CASE("adam refuses non-finite gradients without touching parameters") {
    Tensor w({2}, {1.0, 2.0}, true);
    const NamedTensors params = {{"layer.w", w}};
    auto state = make_optimizer_state(params);
    backward(dot_const(w, std::vector<double>{1.0, std::nan("")}));
    CHECK_THROWS_WITH_AS(adam_step(params, state, 0.1), doctest::Contains("layer.w"), DivergenceError);
    CHECK(w.at(0) == 1.0);
    CHECK(w.at(1) == 2.0);
}

TEST_CASE("gradient clipping") {
    Tensor a({2}, {0.0, 0.0}, true), b({1}, {0.0}, true);
    const NamedTensors params = {{"a", a}, {"b", b}};
    backward(add(dot_const(a, std::vector<double>{3.0, 0.0}), dot_const(b, std::vector<double>{4.0})));
    CHECK(clip_grad_norm(params, 1.0) == doctest::Approx(5.0));
    CHECK(a.grad()[0] == doctest::Approx(0.6));
    CHECK(b.grad()[0] == doctest::Approx(0.8));
}

TEST_CASE("teacher training lowers the loss and counts every step") {
    const auto c = toy_corpus(1, 60, 14);
    const auto cfg = tiny_config(14);
    auto tc = quick_config();
    tc.epochs = 6;
    std::size_t epochs_seen = 0;
    TrainHooks hooks;
    hooks.on_epoch = [&](const EpochRecord&) { ++epochs_seen; };
    const auto r = train_teacher(tc, cfg, c, &c, hooks);
    CHECK(epochs_seen == 6);
    REQUIRE(r.epochs.size() == 6);
    CHECK(r.epochs.back().train_loss < r.epochs.front().train_loss);
    std::size_t expected = 0;
    for (std::size_t e = 1; e <= tc.epochs; ++e)
        expected += make_epoch_batches(c, tc.max_tokens, derive_seed(tc.seed, kEpochStream + e)).batches.size();
    CHECK(r.steps == expected);
    CHECK_FALSE(r.diverged);
    CHECK_FALSE(r.model.is_training());
    CHECK(r.model.vocab_hash() == c.vocab_hash);
    CHECK(r.best_dev_ppl == doctest::Approx(evaluate_perplexity(r.model, c, tc.max_tokens)));

    const auto again = train_teacher(tc, cfg, c, &c);
    CHECK(again.model.checksum() == r.model.checksum());
}

TEST_CASE("distillation with lambda2 = 0 reproduces NLL-only training exactly") {
    const auto c = toy_corpus(2, 40, 14);
    auto cfg = tiny_config(14);
    cfg.dropout_rate = 0.1;
    const auto tc = quick_config();
    const auto teacher = train_teacher(tc, cfg, c, nullptr);

    TeacherEnsemble ens({teacher.model.clone(), init_model(cfg, 3, c.vocab_hash)});
    DistillConfig dc;
    dc.lambda1 = 1.0;
    dc.lambda2_start = 0.0;
    dc.lambda2_end = 0.0;
    const auto student = distill_train(c, nullptr, ens, dc, tc, cfg);
    const auto plain = train_teacher(tc, cfg, c, nullptr);
    CHECK(student.steps == plain.steps);
    CHECK(student.model.checksum() == plain.model.checksum());
    for (std::size_t e = 0; e < plain.epochs.size(); ++e)
        CHECK(student.epochs[e].train_loss == plain.epochs[e].train_loss);
}

TEST_CASE("distillation trace covers every step") {
    const auto c = toy_corpus(3, 40, 14);
    const auto cfg = tiny_config(14);
    const auto tc = quick_config();
    std::vector<Seq2SeqModel> teachers;
    for (std::uint64_t s : {11, 12, 13}) teachers.push_back(init_model(cfg, s, c.vocab_hash));
    TeacherEnsemble ens(std::move(teachers));
    DistillConfig dc;
    std::size_t traced = 0;
    TrainHooks hooks;
    hooks.on_trace = [&](const TraceRow&) { ++traced; };
    const auto r = distill_train(c, &c, ens, dc, tc, cfg, hooks);
    REQUIRE(r.trace.size() == r.steps);
    CHECK(traced == r.steps);
    for (std::size_t i = 0; i < r.trace.size(); ++i) {
        const auto& row = r.trace[i];
        CHECK(row.step == i);
        REQUIRE(row.alpha_smoothed.size() == 3);
        double s = 0.0;
        for (double a : row.alpha_smoothed) s += a;
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(row.lambda2 == doctest::Approx(lambda2_schedule(i, r.steps, dc)));
    }
    CHECK(r.trace.front().lambda2 == doctest::Approx(0.5));
    CHECK(r.epochs.back().lambda2 == r.trace.back().lambda2);
    CHECK(r.epochs.back().kd_term > 0.0);
}

TEST_CASE("distillation rejects unfrozen teachers") {
    const auto c = toy_corpus(3, 10, 14);
    const auto cfg = tiny_config(14);
    TeacherEnsemble ens({init_model(cfg, 1, c.vocab_hash)});
    ens.teachers()[0].set_trainable(true);
    CHECK_THROWS_AS(distill_train(c, nullptr, ens, DistillConfig{}, quick_config(), cfg), ContractError);
}

TEST_CASE("an exploding learning rate is reported as divergence") {
    const auto c = toy_corpus(4, 40, 14);
    const auto cfg = tiny_config(14);
    auto tc = quick_config();
    tc.max_lr = 1e200;
    tc.warmup_steps = 1;
    const auto r = train_teacher(tc, cfg, c, nullptr);
    CHECK(r.diverged);
    CHECK_FALSE(r.divergence.empty());
    CHECK(r.model.checksum() == init_model(cfg, derive_seed(tc.seed, kInitStream)).checksum());
}

TEST_CASE("finetuning keeps the vocabulary and zero epochs is a copy") {
    const auto c = toy_corpus(5, 30, 14);
    const auto cfg = tiny_config(14);
    const auto base = init_model(cfg, 1, c.vocab_hash);
    auto tc = quick_config();
    tc.epochs = 0;
    CHECK(finetune(base, c, nullptr, tc).model.checksum() == base.checksum());
    tc.epochs = 1;
    CHECK(finetune(base, c, nullptr, tc).model.checksum() != base.checksum());
    auto other = c;
    other.vocab_hash = 1;
    CHECK_THROWS_AS(finetune(base, other, nullptr, tc), ContractError);
}

TEST_CASE("trace csv round trip") {
    TempDir dir("trace");
    std::vector<TraceRow> rows(2);
    rows[0] = {0, 3, {2.5, 7.25}, {0.7, 0.3}, {0.6, 0.4}, 0.35, 0.5};
    rows[1] = {1, 0, {1.0 / 3.0, 9.0}, {0.9, 0.1}, {0.62, 0.38}, 0.1, 0.75};
    write_trace_csv(dir / "t.csv", rows);
    const auto back = read_trace_csv(dir / "t.csv");
    REQUIRE(back.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(back[i].step == rows[i].step);
        CHECK(back[i].batch_id == rows[i].batch_id);
        CHECK(back[i].perplexities == rows[i].perplexities);
        CHECK(back[i].alpha_raw == rows[i].alpha_raw);
        CHECK(back[i].alpha_smoothed == rows[i].alpha_smoothed);
        CHECK(back[i].tau == rows[i].tau);
        CHECK(back[i].lambda2 == rows[i].lambda2);
    }
}

TEST_CASE("epoch records serialize as one json line") {
    EpochRecord r;
    r.epoch = 3;
    r.train_loss = 1.5;
    const auto line = to_json_line(r);
    CHECK(line.find('\n') == std::string::npos);
    CHECK(line.find("\"epoch\":3") != std::string::npos);
    CHECK(line.find("null") != std::string::npos);  // NaN dev scores
}

TEST_CASE("greedy decoding is deterministic and bounded") {
    const auto cfg = tiny_config(14);
    const auto m = init_model(cfg, 2);
    const std::vector<std::int32_t> src = {5, 6, 7};
    const auto a = greedy_decode(m, src, 5), b = greedy_decode(m, src, 5);
    CHECK(a.tokens == b.tokens);
    CHECK(a.tokens.size() <= 5);
    if (a.truncated) CHECK(a.tokens.size() == 5);

    std::mt19937_64 rng(3);
    ParallelCorpus c;
    c.pairs = random_pairs(rng, 5, 14, 5);
    const auto batch = make_batch(std::span<const SentencePair>(c.pairs));
    const auto batched = greedy_decode_batch(m, batch, 6);
    REQUIRE(batched.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) CHECK(batched[i].tokens == greedy_decode(m, c.pairs[i].src, 6).tokens);
}

TEST_CASE("a memorizing model decodes its training data") {
    std::mt19937_64 rng(9);
    ParallelCorpus c;
    c.name = "copy";
    c.vocab_size = 12;
    for (int i = 0; i < 4; ++i) {
        TokenIds s = {static_cast<std::int32_t>(4 + 2 * i), static_cast<std::int32_t>(5 + 2 * i)};
        c.pairs.push_back({s, s});
    }
    auto cfg = tiny_config(12);
    cfg.hidden_size = 16;
    cfg.ffn_size = 32;
    cfg.label_smoothing = 0.0;
    auto tc = quick_config();
    tc.epochs = 150;
    tc.max_lr = 1e-2;
    tc.warmup_steps = 10;
    const auto r = train_teacher(tc, cfg, c, nullptr);
    CHECK(evaluate_bleu(r.model, c) == doctest::Approx(0.0));  // two-token sentences have no 4-grams
    const auto out = translate_corpus(r.model, c);
    for (std::size_t i = 0; i < 4; ++i) CHECK(out[i] == c.pairs[i].tgt);
}

TEST_CASE("corpus bleu matches the reference implementation") {
    const auto dir = std::filesystem::path(AKD_FIXTURE_DIR);
    const auto hyp = read_lines(dir / "bleu.hyp"), ref = read_lines(dir / "bleu.ref");
    const auto stats = bleu_stats(hyp, ref);
    CHECK(stats.correct == std::array<std::size_t, 4>{18, 10, 5, 1});
    CHECK(stats.total == std::array<std::size_t, 4>{22, 19, 16, 13});
    CHECK(stats.hyp_len == 22);
    CHECK(stats.ref_len == 24);
    CHECK(corpus_bleu(hyp, ref) == doctest::Approx(29.125232883490188).epsilon(1e-10));

    CHECK(corpus_bleu(sentences({"a b c d e"}), sentences({"a b x d e f g"})) ==
          doctest::Approx(20.252884954471366).epsilon(1e-10));
    CHECK(corpus_bleu(sentences({"x y"}), sentences({"x z w v"})) == 0.0);
    CHECK(corpus_bleu(sentences({"a b c d"}), sentences({"e f g h"})) == 0.0);
    CHECK(corpus_bleu(sentences({"a b c", "d e"}), sentences({"a b c", "d e"})) == 0.0);
    CHECK(corpus_bleu(hyp, hyp) == doctest::Approx(100.0));
    CHECK_THROWS_AS(corpus_bleu(hyp, sentences({"a"})), ContractError);
}
