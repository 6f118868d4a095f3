#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "akd/distill.hpp"
#include "akd/errors.hpp"
#include "akd/grad_check.hpp"
#include "akd/ops.hpp"
#include "helpers.hpp"

using namespace akd;
using namespace akd::testing;

namespace {

std::vector<Seq2SeqModel> frozen_teachers(std::size_t n, const ModelConfig& c) {
    std::vector<Seq2SeqModel> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(init_model(c, 100 + i));
    return out;
}

}  // namespace

TEST_CASE("contribution weights of a fixed perplexity vector") {
    // softmax(-[2,4,8]) by hand: e^-2 / (e^-2 + e^-4 + e^-8)
    const auto w = contribution_weights(std::vector<double>{2, 4, 8}, TemperatureMode::none());
    CHECK(w.raw[0] == doctest::Approx(0.8789).epsilon(1e-4));
    CHECK(w.raw[1] == doctest::Approx(0.1190).epsilon(1e-3));
    CHECK(w.raw[2] == doctest::Approx(0.0022).epsilon(1e-2));
    CHECK(w.temperature == 1.0);
}

TEST_CASE("weights are probability vectors favouring the lowest perplexity") {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> ppl(1.0, 60.0);
    std::uniform_int_distribution<std::size_t> size(2, 6);
    for (auto mode : {TemperatureMode::adaptive(), TemperatureMode::none(), TemperatureMode::fixed(5.0)}) {
        for (int trial = 0; trial < 300; ++trial) {
            std::vector<double> p(size(rng));
            for (auto& x : p) x = ppl(rng);
            const auto w = contribution_weights(p, mode);
            const double total = std::accumulate(w.raw.begin(), w.raw.end(), 0.0);
            REQUIRE(std::abs(total - 1.0) < 1e-9);
            REQUIRE(std::all_of(w.raw.begin(), w.raw.end(), [](double a) { return a >= 0.0; }));
            const auto best = std::min_element(p.begin(), p.end()) - p.begin();
            REQUIRE(std::max_element(w.raw.begin(), w.raw.end()) - w.raw.begin() == best);
        }
    }
}

TEST_CASE("equal perplexities give uniform weights") {
    for (std::size_t n = 1; n <= 6; ++n) {
        const auto w = contribution_weights(std::vector<double>(n, 7.5), TemperatureMode::adaptive());
        for (double a : w.raw) CHECK(std::abs(a - 1.0 / static_cast<double>(n)) < 1e-12);
    }
}

TEST_CASE("invalid perplexities name the teacher") {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH_AS(contribution_weights(std::vector<double>{3, nan}, TemperatureMode::none()),
                         doctest::Contains("teacher 1"), DataError);
    CHECK_THROWS_AS(contribution_weights(std::vector<double>{0.0, 2}, TemperatureMode::none()), DataError);
    CHECK_THROWS_AS(contribution_weights(std::vector<double>{INFINITY}, TemperatureMode::none()), DataError);
    CHECK_THROWS_AS(contribution_weights(std::vector<double>{}, TemperatureMode::none()), ContractError);
}

TEST_CASE("adaptive temperature") {
    for (std::size_t n = 2; n <= 8; ++n) {
        CHECK(adaptive_temperature(std::vector<double>(n, 1.0 / static_cast<double>(n))) ==
              1.0 / static_cast<double>(n));
    }
    // (1 - (0.7 - 0.1)) / 3
    CHECK(std::abs(adaptive_temperature(std::vector<double>{0.7, 0.2, 0.1}) - 0.4 / 3.0) < 1e-9);
    CHECK(adaptive_temperature(std::vector<double>{1.0}) == 1.0);
    CHECK(adaptive_temperature(std::vector<double>{1.0, 0.0}) == doctest::Approx(1e-6));
    CHECK_THROWS_AS(adaptive_temperature(std::vector<double>{0.5, 0.6}), ContractError);

    // strictly decreasing in spread for a fixed size
    double previous = 2.0;
    for (double spread = 0.0; spread < 0.95; spread += 0.05) {
        const double tau = adaptive_temperature(std::vector<double>{(1.0 + spread) / 3.0, 1.0 / 3.0,
                                                                    (1.0 - spread) / 3.0});
        CHECK(tau < previous);
        previous = tau;
    }
}

TEST_CASE("temperature mode parsing") {
    CHECK(TemperatureMode::parse("none") == TemperatureMode::none());
    CHECK(TemperatureMode::parse("adaptive") == TemperatureMode::adaptive());
    CHECK(TemperatureMode::parse("fixed=0.25").tau == 0.25);
    CHECK(TemperatureMode::parse("fixed=2").to_string() == "fixed=2");
    CHECK_THROWS_AS(TemperatureMode::parse("fixed=0"), ConfigError);
    CHECK_THROWS_AS(TemperatureMode::parse("fixed=abc"), ConfigError);
    CHECK_THROWS_AS(TemperatureMode::parse("hot"), ConfigError);
}

TEST_CASE("smoothing converges to a constant input") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.01, 1.0);
    for (std::size_t n = 2; n <= 5; ++n) {
        TeacherEnsemble ens(frozen_teachers(n, tiny_config()), 0.7);
        std::vector<double> target(n);
        for (auto& x : target) x = u(rng);
        const double total = std::accumulate(target.begin(), target.end(), 0.0);
        for (auto& x : target) x /= total;
        std::vector<double> s;
        for (int step = 0; step < 50; ++step) s = ens.smooth(target);
        for (std::size_t l = 0; l < n; ++l) CHECK(std::abs(s[l] - target[l]) < 1e-6);
    }
}

TEST_CASE("smoothing with zero decay is the identity") {
    TeacherEnsemble ens(frozen_teachers(3, tiny_config()), 0.0);
    const std::vector<double> a = {0.2, 0.5, 0.3}, b = {0.6, 0.1, 0.3};
    for (const auto& raw : {a, b, a}) {
        const auto s = ens.smooth(raw);
        for (std::size_t l = 0; l < 3; ++l) CHECK(s[l] == doctest::Approx(raw[l]).epsilon(1e-14));
    }
}

TEST_CASE("first smoothing step starts from uniform") {
    TeacherEnsemble ens(frozen_teachers(2, tiny_config()), 0.7);
    const auto s = ens.smooth(std::vector<double>{0.9, 0.1});
    // normalize(0.5^0.7 * r^0.3)
    const double a = std::pow(0.9, 0.3), b = std::pow(0.1, 0.3);
    CHECK(s[0] == doctest::Approx(a / (a + b)).epsilon(1e-12));
    ens.reset_smoothing();
    CHECK(ens.smooth(std::vector<double>{0.5, 0.5})[0] == doctest::Approx(0.5));
}

TEST_CASE("kd loss with one-hot teachers equals plain nll") {
    std::mt19937_64 rng(17);
    const std::size_t vocab = 11;
    for (int trial = 0; trial < 100; ++trial) {
        const auto batch = random_batch(rng, 1 + trial % 4, vocab);
        const Tensor logits = random_tensor({batch.batch_size, batch.tgt_len, vocab}, rng, false);
        std::vector<double> q(logits.size(), 0.0);
        for (std::size_t r = 0; r < batch.tgt_out.size(); ++r) q[r * vocab + batch.tgt_out[r]] = 1.0;
        const double kd = kd_loss(logits, Tensor(logits.shape(), q), batch).item();
        const double nll = smoothed_nll(logits, batch, 0.0).item();
        REQUIRE(std::abs(kd - nll) < 1e-9);
    }
}

TEST_CASE("adaptive kd loss is the convex combination of per-teacher losses") {
    std::mt19937_64 rng(23);
    const std::size_t vocab = 9;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t L = 1 + trial % 4;
        const auto batch = random_batch(rng, 3, vocab);
        const Tensor lp = log_softmax(random_tensor({batch.batch_size, batch.tgt_len, vocab}, rng, false));
        std::vector<Tensor> q;
        std::vector<double> alpha(L);
        for (std::size_t l = 0; l < L; ++l) {
            q.push_back(random_distribution(rng, batch.batch_size, batch.tgt_len, vocab));
            alpha[l] = u(rng);
        }
        const double total = std::accumulate(alpha.begin(), alpha.end(), 0.0);
        for (auto& a : alpha) a /= total;
        double explicit_sum = 0.0;
        for (std::size_t l = 0; l < L; ++l) explicit_sum += alpha[l] * kd_loss_from_log_probs(lp, q[l], batch).item();
        REQUIRE(std::abs(adaptive_kd_loss(lp, q, alpha, batch).item() - explicit_sum) < 1e-9);
    }
}

TEST_CASE("adaptive kd loss rejects unnormalized weights") {
    std::mt19937_64 rng(2);
    const auto batch = random_batch(rng, 2, 7);
    const Tensor lp = log_softmax(random_tensor({batch.batch_size, batch.tgt_len, 7}, rng, false));
    const std::vector<Tensor> q = {random_distribution(rng, batch.batch_size, batch.tgt_len, 7)};
    CHECK_THROWS_AS(adaptive_kd_loss(lp, q, std::vector<double>{0.9}, batch), ContractError);
    CHECK_THROWS_AS(adaptive_kd_loss(lp, q, std::vector<double>{0.5, 0.5}, batch), ContractError);
}

TEST_CASE("kd gradients reach the student only") {
    std::mt19937_64 rng(5);
    const std::size_t vocab = 8;
    const auto batch = random_batch(rng, 3, vocab);
    auto logits = random_tensor({batch.batch_size, batch.tgt_len, vocab}, rng);
    std::vector<Tensor> q = {random_distribution(rng, batch.batch_size, batch.tgt_len, vocab),
                             random_distribution(rng, batch.batch_size, batch.tgt_len, vocab)};
    q[0].set_requires_grad(true);
    const std::vector<double> alpha = {0.3, 0.7};
    const auto r1 = grad_check([&] { return kd_loss(logits, q[1], batch); }, std::vector<Tensor>{logits}, 1e-6);
    CHECK(r1.passed(1e-4));
    const auto r2 = grad_check([&] { return adaptive_kd_loss(log_softmax(logits), q, alpha, batch); },
                               std::vector<Tensor>{logits}, 1e-6);
    CHECK(r2.passed(1e-4));
    backward(adaptive_kd_loss(log_softmax(logits), q, alpha, batch));
    CHECK_FALSE(q[0].has_grad());
}

TEST_CASE("combined loss and its gradient") {
    std::mt19937_64 rng(9);
    const std::size_t vocab = 8;
    const auto batch = random_batch(rng, 2, vocab);
    auto logits = random_tensor({batch.batch_size, batch.tgt_len, vocab}, rng);
    const Tensor q = random_distribution(rng, batch.batch_size, batch.tgt_len, vocab);
    auto f = [&] {
        const Tensor lp = log_softmax(logits);
        return combined_loss(smoothed_nll_from_log_probs(lp, batch, 0.1), kd_loss_from_log_probs(lp, q, batch), 0.5,
                             1.7);
    };
    CHECK(grad_check(f, std::vector<Tensor>{logits}, 1e-6).passed(1e-4));
    const double nll = smoothed_nll(logits, batch, 0.1).item();
    const double kd = kd_loss(logits, q, batch).item();
    CHECK(std::abs(f().item() - (0.5 * nll + 1.7 * kd)) < 1e-12);
    CHECK(combined_loss(2.0, 3.0, 0.5, 1.5) == 5.5);
    CHECK_THROWS_AS(combined_loss(1.0, 1.0, -0.1, 1.0), ContractError);
}

TEST_CASE("lambda2 schedule") {
    DistillConfig dc;
    const std::size_t total = 137;
    CHECK(lambda2_schedule(0, total, dc) == 0.5);
    CHECK(lambda2_schedule(total, total, dc) == 3.0);
    CHECK(lambda2_schedule(total + 10, total, dc) == 3.0);
    for (auto shape : {AnnealShape::Linear, AnnealShape::Logistic}) {
        dc.anneal_shape = shape;
        CHECK(lambda2_schedule(0, total, dc) == 0.5);
        double prev = 0.0;
        for (std::size_t s = 0; s <= total; ++s) {
            const double v = lambda2_schedule(s, total, dc);
            REQUIRE(v >= prev);
            REQUIRE(v <= 3.0);
            prev = v;
        }
    }
    dc.anneal_shape = AnnealShape::Linear;
    CHECK(lambda2_schedule(50, 100, dc) == doctest::Approx(1.75));
    CHECK_THROWS_AS(lambda2_schedule(0, 0, dc), ContractError);
}

TEST_CASE("teacher pass requires evaluation mode") {
    std::mt19937_64 rng(1);
    auto t = init_model(tiny_config(), 1);
    const auto batch = random_batch(rng, 2, 16);
    t.train();
    CHECK_THROWS_AS(run_teacher(t, batch), ContractError);
    t.eval();
    const auto out = run_teacher(t, batch);
    CHECK(out.perplexity > 1.0);
    CHECK(out.probs.shape() == Shape{batch.batch_size, batch.tgt_len, 16});
    // exp of the mean token nll
    CHECK(std::log(out.perplexity) == doctest::Approx(smoothed_nll(t.forward(batch), batch, 0.0).item()).epsilon(1e-10));
}

TEST_CASE("ensemble freezes teachers and runs them in order") {
    std::mt19937_64 rng(4);
    const auto c = tiny_config();
    TeacherEnsemble ens(frozen_teachers(3, c), 0.7);
    for (const auto& t : ens.teachers()) CHECK_FALSE(t.is_trainable());
    const auto batch = random_batch(rng, 3, c.vocab_size);
    const auto serial = ens.run(batch, 1);
    const auto parallel = ens.run(batch, 2);
    for (std::size_t l = 0; l < 3; ++l) {
        CHECK(serial[l].perplexity == parallel[l].perplexity);
        CHECK(serial[l].perplexity == run_teacher(ens.teachers()[l], batch).perplexity);
    }

    std::vector<Seq2SeqModel> mixed = frozen_teachers(2, c);
    mixed[1].set_vocab_hash(77);
    CHECK_THROWS_AS(TeacherEnsemble(std::move(mixed)), ContractError);
    CHECK_THROWS_AS(TeacherEnsemble(std::vector<Seq2SeqModel>{}), ContractError);
}

TEST_CASE("distill config validation") {
    DistillConfig dc;
    CHECK_NOTHROW(dc.validate());
    dc.lambda2_start = 4.0;
    CHECK_THROWS_AS(dc.validate(), ConfigError);
    dc = {};
    dc.smoothing_decay = 1.0;
    CHECK_THROWS_AS(dc.validate(), ConfigError);
    CHECK(parse_contribution_mode("equal") == ContributionMode::Equal);
    CHECK_THROWS_AS(parse_contribution_mode("random"), ConfigError);
    CHECK(parse_anneal_shape("logistic") == AnnealShape::Logistic);
}
