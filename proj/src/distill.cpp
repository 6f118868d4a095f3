#include "akd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <numeric>

#include "akd/errors.hpp"
#include "akd/ops.hpp"

namespace akd {

namespace {

// Keeps the temperature strictly positive when softmax(-ppl) saturates to a
// one-hot vector.
constexpr double kMinTemperature = 1e-6;

}  // namespace

TemperatureMode TemperatureMode::fixed(double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) {
        throw ConfigError("fixed temperature must be positive and finite, got " + std::to_string(tau));
    }
    return {Kind::Fixed, tau};
}

TemperatureMode TemperatureMode::parse(std::string_view text) {
    if (text == "none") return none();
    if (text == "adaptive") return adaptive();
    if (text.rfind("fixed=", 0) == 0) {
        const std::string value(text.substr(6));
        std::size_t used = 0;
        double tau = 0.0;
        try {
            tau = std::stod(value, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != value.size()) {
            throw ConfigError("temperature: cannot parse '" + value + "' as a number");
        }
        return fixed(tau);
    }
    throw ConfigError("temperature must be adaptive, none, or fixed=<tau>; got '" + std::string(text) + "'");
}

std::string TemperatureMode::to_string() const {
    switch (kind) {
        case Kind::None: return "none";
        case Kind::Adaptive: return "adaptive";
        case Kind::Fixed: {
            std::string s = std::to_string(tau);
            s.erase(s.find_last_not_of('0') + 1);
            if (!s.empty() && s.back() == '.') s.pop_back();
            return "fixed=" + s;
        }
    }
    return "none";
}

AnnealShape parse_anneal_shape(std::string_view text) {
    if (text == "linear") return AnnealShape::Linear;
    if (text == "logistic") return AnnealShape::Logistic;
    throw ConfigError("anneal shape must be linear or logistic; got '" + std::string(text) + "'");
}

ContributionMode parse_contribution_mode(std::string_view text) {
    if (text == "adaptive") return ContributionMode::Adaptive;
    if (text == "equal") return ContributionMode::Equal;
    throw ConfigError("contribution must be adaptive or equal; got '" + std::string(text) + "'");
}

std::string to_string(AnnealShape shape) { return shape == AnnealShape::Linear ? "linear" : "logistic"; }
std::string to_string(ContributionMode mode) {
    return mode == ContributionMode::Adaptive ? "adaptive" : "equal";
}

void DistillConfig::validate() const {
    if (!(lambda1 >= 0.0)) throw ConfigError("distill: lambda1 must be >= 0");
    if (!(lambda2_start >= 0.0)) throw ConfigError("distill: lambda2_start must be >= 0");
    if (!(lambda2_start <= lambda2_end)) throw ConfigError("distill: lambda2_start must be <= lambda2_end");
    if (!(smoothing_decay >= 0.0 && smoothing_decay < 1.0)) {
        throw ConfigError("distill: smoothing_decay must lie in [0,1)");
    }
    if (!(logistic_steepness > 0.0)) throw ConfigError("distill: logistic_steepness must be positive");
    if (temperature.kind == TemperatureMode::Kind::Fixed && !(temperature.tau > 0.0)) {
        throw ConfigError("distill: fixed temperature must be positive");
    }
}

std::vector<double> softmax_vector(std::span<const double> logits) {
    if (logits.empty()) throw ContractError("softmax of an empty vector");
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> out(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        z += out[i];
    }
    for (auto& v : out) v /= z;
    return out;
}

TeacherOutput run_teacher(const Seq2SeqModel& teacher, const MiniBatch& batch) {
    if (teacher.is_training()) {
        throw ContractError("teacher pass requires evaluation mode (dropout disabled)");
    }
    if (batch.token_count == 0) throw ContractError("teacher perplexity: batch has no target tokens");
    NoGradGuard no_grad;
    const Tensor logits = teacher.forward(batch);
    const std::size_t vocab = logits.shape().back();
    const std::size_t rows = batch.batch_size * batch.tgt_len;
    const auto lv = logits.values();
    std::vector<double> probs(rows * vocab);
    double nll = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = lv.data() + r * vocab;
        double* p = probs.data() + r * vocab;
        const double mx = *std::max_element(row, row + vocab);
        double z = 0.0;
        for (std::size_t v = 0; v < vocab; ++v) {
            p[v] = std::exp(row[v] - mx);
            z += p[v];
        }
        for (std::size_t v = 0; v < vocab; ++v) p[v] /= z;
        if (batch.tgt_mask[r]) nll -= row[batch.tgt_out[r]] - mx - std::log(z);
    }
    TeacherOutput out;
    out.perplexity = std::exp(nll / static_cast<double>(batch.token_count));
    out.probs = Tensor(logits.shape(), std::move(probs));
    return out;
}

double teacher_minibatch_perplexity(const Seq2SeqModel& teacher, const MiniBatch& batch) {
    return run_teacher(teacher, batch).perplexity;
}

double adaptive_temperature(std::span<const double> s) {
    if (s.empty()) throw ContractError("adaptive_temperature: empty weight vector");
    const double total = std::accumulate(s.begin(), s.end(), 0.0);
    if (std::abs(total - 1.0) > 1e-6 || std::any_of(s.begin(), s.end(), [](double v) { return v < 0; })) {
        throw ContractError("adaptive_temperature: input is not a probability vector");
    }
    if (s.size() == 1) return 1.0;
    const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
    const double tau = (1.0 - (*hi - *lo)) / static_cast<double>(s.size());
    return std::max(tau, kMinTemperature);
}

ContributionWeights contribution_weights(std::span<const double> perplexities,
                                         const TemperatureMode& mode) {
    if (perplexities.empty()) throw ContractError("contribution_weights: no teachers");
    ContributionWeights w;
    w.perplexities.assign(perplexities.begin(), perplexities.end());
    std::vector<double> neg(perplexities.size());
    for (std::size_t l = 0; l < perplexities.size(); ++l) {
        const double ppl = perplexities[l];
        if (!std::isfinite(ppl) || !(ppl > 0.0)) {
            throw DataError("teacher " + std::to_string(l) + " has invalid perplexity " + std::to_string(ppl));
        }
        neg[l] = -ppl;
    }
    switch (mode.kind) {
        case TemperatureMode::Kind::None: w.temperature = 1.0; break;
        case TemperatureMode::Kind::Fixed: w.temperature = mode.tau; break;
        case TemperatureMode::Kind::Adaptive: w.temperature = adaptive_temperature(softmax_vector(neg)); break;
    }
    if (mode.kind != TemperatureMode::Kind::None) {
        for (auto& v : neg) v /= w.temperature;
    }
    w.raw = softmax_vector(neg);
    w.smoothed = w.raw;
    return w;
}

TeacherEnsemble::TeacherEnsemble(std::vector<Seq2SeqModel> teachers, double smoothing_decay,
                                 TemperatureMode temperature)
    : teachers_(std::move(teachers)), decay_(smoothing_decay), temperature_(temperature) {
    if (teachers_.empty()) throw ContractError("teacher ensemble needs at least one teacher");
    if (!(decay_ >= 0.0 && decay_ < 1.0)) throw ConfigError("smoothing decay must lie in [0,1)");
    for (std::size_t l = 1; l < teachers_.size(); ++l) {
        if (teachers_[l].config().vocab_size != teachers_[0].config().vocab_size ||
            teachers_[l].vocab_hash() != teachers_[0].vocab_hash()) {
            throw ContractError("teacher " + std::to_string(l) + " uses a different vocabulary than teacher 0");
        }
    }
    for (auto& t : teachers_) t.set_trainable(false);
}

std::uint64_t TeacherEnsemble::vocab_hash() const { return teachers_.at(0).vocab_hash(); }

std::vector<double> TeacherEnsemble::smooth(std::span<const double> raw) {
    if (raw.size() != teachers_.size()) {
        throw ContractError("smooth: " + std::to_string(raw.size()) + " weights for " +
                            std::to_string(teachers_.size()) + " teachers");
    }
    const std::size_t n = raw.size();
    if (smoothed_.empty()) smoothed_.assign(n, 1.0 / static_cast<double>(n));
    std::vector<double> logs(n);
    for (std::size_t l = 0; l < n; ++l) {
        logs[l] = decay_ * std::log(std::max(smoothed_[l], kWeightFloor)) +
                  (1.0 - decay_) * std::log(std::max(raw[l], kWeightFloor));
    }
    smoothed_ = softmax_vector(logs);
    return smoothed_;
}

void TeacherEnsemble::reset_smoothing() { smoothed_.clear(); }

std::vector<std::uint64_t> TeacherEnsemble::checksums() const {
    std::vector<std::uint64_t> out;
    for (const auto& t : teachers_) out.push_back(t.checksum());
    return out;
}

std::vector<TeacherOutput> TeacherEnsemble::run(const MiniBatch& batch, std::size_t threads) const {
    std::vector<TeacherOutput> out(teachers_.size());
    if (threads <= 1 || teachers_.size() == 1) {
        for (std::size_t l = 0; l < teachers_.size(); ++l) out[l] = run_teacher(teachers_[l], batch);
        return out;
    }
    std::vector<std::future<TeacherOutput>> pending;
    for (std::size_t start = 0; start < teachers_.size(); start += threads) {
        const std::size_t end = std::min(teachers_.size(), start + threads);
        pending.clear();
        for (std::size_t l = start; l < end; ++l)
            pending.push_back(std::async(std::launch::async,
                                         [this, l, &batch] { return run_teacher(teachers_[l], batch); }));
        for (std::size_t l = start; l < end; ++l) out[l] = pending[l - start].get();
    }
    return out;
}

std::vector<double> smooth_weights(TeacherEnsemble& ensemble, std::span<const double> raw) {
    return ensemble.smooth(raw);
}

Tensor kd_loss_from_log_probs(const Tensor& student_log_probs, const Tensor& teacher_probs,
                              const MiniBatch& batch) {
    if (student_log_probs.shape() != teacher_probs.shape()) {
        throw ShapeError("kd_loss: student " + shape_string(student_log_probs.shape()) + " vs teacher " +
                         shape_string(teacher_probs.shape()));
    }
    const std::size_t rows = batch.batch_size * batch.tgt_len;
    if (student_log_probs.rank() != 3 || student_log_probs.size() / student_log_probs.shape().back() != rows) {
        throw ShapeError("kd_loss: distributions " + shape_string(student_log_probs.shape()) +
                         " do not match the batch");
    }
    if (batch.token_count == 0) throw ContractError("kd_loss: batch has no target tokens");
    Tensor q = teacher_probs.requires_grad() ? teacher_probs.detach() : teacher_probs;
    q.set_requires_grad(false);
    const double inv_count = 1.0 / static_cast<double>(batch.token_count);
    std::vector<double> w(rows);
    for (std::size_t i = 0; i < rows; ++i) w[i] = batch.tgt_mask[i] ? -inv_count : 0.0;
    return dot_const(sum_last(mul(student_log_probs, q)), w);
}

Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_probs, const MiniBatch& batch) {
    return kd_loss_from_log_probs(log_softmax(student_logits, -1), teacher_probs, batch);
}

Tensor adaptive_kd_loss(const Tensor& student_log_probs, std::span<const Tensor> teacher_probs,
                        std::span<const double> alpha, const MiniBatch& batch) {
    if (alpha.size() != teacher_probs.size() || alpha.empty()) {
        throw ContractError("adaptive_kd_loss: " + std::to_string(alpha.size()) + " weights for " +
                            std::to_string(teacher_probs.size()) + " teachers");
    }
    const double total = std::accumulate(alpha.begin(), alpha.end(), 0.0);
    if (std::abs(total - 1.0) > 1e-6 || std::any_of(alpha.begin(), alpha.end(), [](double a) { return a < 0; })) {
        throw ContractError("adaptive_kd_loss: contribution weights are not normalized (sum " +
                            std::to_string(total) + ")");
    }
    // The loss is linear in Q, so mixing the teacher distributions first is
    // the same sum with one pass over the student distribution.
    const Shape& shape = teacher_probs[0].shape();
    std::vector<double> mixed(teacher_probs[0].size(), 0.0);
    for (std::size_t l = 0; l < teacher_probs.size(); ++l) {
        if (teacher_probs[l].shape() != shape) throw ShapeError("adaptive_kd_loss: teacher shapes differ");
        if (alpha[l] == 0.0) continue;
        const auto q = teacher_probs[l].values();
        for (std::size_t i = 0; i < mixed.size(); ++i) mixed[i] += alpha[l] * q[i];
    }
    return kd_loss_from_log_probs(student_log_probs, Tensor(shape, std::move(mixed)), batch);
}

Tensor adaptive_kd_loss(const Seq2SeqModel& student, const TeacherEnsemble& ensemble,
                        std::span<const double> alpha, const MiniBatch& batch, std::mt19937_64* rng) {
    const auto outputs = ensemble.run(batch);
    std::vector<Tensor> probs;
    for (const auto& o : outputs) probs.push_back(o.probs);
    return adaptive_kd_loss(log_softmax(student.forward(batch, rng), -1), probs, alpha, batch);
}

Tensor combined_loss(const Tensor& nll, const Tensor& kd, double lambda1, double lambda2) {
    if (!(lambda1 >= 0.0 && lambda2 >= 0.0)) throw ContractError("combined_loss: lambdas must be >= 0");
    return add(scale(nll, lambda1), scale(kd, lambda2));
}

double combined_loss(double nll, double kd, double lambda1, double lambda2) {
    if (!(lambda1 >= 0.0 && lambda2 >= 0.0)) throw ContractError("combined_loss: lambdas must be >= 0");
    return lambda1 * nll + lambda2 * kd;
}

double lambda2_schedule(std::size_t step, std::size_t total_steps, const DistillConfig& config) {
    if (total_steps == 0) throw ContractError("lambda2_schedule: total_steps must be positive");
    if (step >= total_steps) return config.lambda2_end;
    const double x = static_cast<double>(step) / static_cast<double>(total_steps);
    const double span = config.lambda2_end - config.lambda2_start;
    double frac = x;
    if (config.anneal_shape == AnnealShape::Logistic) {
        const double k = config.logistic_steepness;
        auto sigmoid = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
        const double lo = sigmoid(-0.5 * k), hi = sigmoid(0.5 * k);
        frac = (sigmoid(k * (x - 0.5)) - lo) / (hi - lo);
    }
    return config.lambda2_start + span * frac;
}

}  // namespace akd
