#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "akd/corpus.hpp"
#include "akd/model.hpp"
#include "akd/tensor.hpp"

namespace akd {

// How the contribution logits -ppl are scaled before the softmax.
struct TemperatureMode {
    enum class Kind { None, Fixed, Adaptive };
    Kind kind = Kind::Adaptive;
    double tau = 1.0;  // only for Fixed

    static TemperatureMode none() { return {Kind::None, 1.0}; }
    static TemperatureMode fixed(double tau);
    static TemperatureMode adaptive() { return {Kind::Adaptive, 1.0}; }
    // "none", "adaptive", or "fixed=<tau>".
    static TemperatureMode parse(std::string_view text);
    std::string to_string() const;
    bool operator==(const TemperatureMode&) const = default;
};

enum class AnnealShape { Linear, Logistic };
enum class ContributionMode { Adaptive, Equal };

AnnealShape parse_anneal_shape(std::string_view text);
ContributionMode parse_contribution_mode(std::string_view text);
std::string to_string(AnnealShape shape);
std::string to_string(ContributionMode mode);

struct DistillConfig {
    double lambda1 = 0.5;
    double lambda2_start = 0.5;
    double lambda2_end = 3.0;
    AnnealShape anneal_shape = AnnealShape::Linear;
    double logistic_steepness = 10.0;
    double smoothing_decay = 0.7;  // beta of the geometric average
    bool smoothing = true;
    TemperatureMode temperature = TemperatureMode::adaptive();
    ContributionMode contribution = ContributionMode::Adaptive;

    void validate() const;
};

struct ContributionWeights {
    std::vector<double> raw;       // this batch's weights before smoothing
    std::vector<double> smoothed;  // weights actually used in the loss
    std::vector<double> perplexities;
    double temperature = 1.0;
};

// Numerically stable softmax of a small vector.
std::vector<double> softmax_vector(std::span<const double> logits);

// Frozen teacher pass over one batch: per-token perplexity over valid
// target positions and the full output distribution [batch x tgt_len x vocab].
struct TeacherOutput {
    double perplexity = 0.0;
    Tensor probs;
};

TeacherOutput run_teacher(const Seq2SeqModel& teacher, const MiniBatch& batch);
double teacher_minibatch_perplexity(const Seq2SeqModel& teacher, const MiniBatch& batch);

// (1 - (max(s) - min(s))) / N. A single teacher gets 1.
double adaptive_temperature(std::span<const double> s);

// raw = softmax(-ppl / tau); with Adaptive, tau comes from
// adaptive_temperature(softmax(-ppl)). `smoothed` is set equal to `raw`.
ContributionWeights contribution_weights(std::span<const double> perplexities,
                                         const TemperatureMode& mode);

// L frozen teachers plus the running geometric average of their weights.
class TeacherEnsemble {
public:
    TeacherEnsemble() = default;
    // Freezes every teacher (no gradients). Teachers must share a vocabulary.
    TeacherEnsemble(std::vector<Seq2SeqModel> teachers, double smoothing_decay = 0.7,
                    TemperatureMode temperature = TemperatureMode::adaptive());

    std::size_t size() const { return teachers_.size(); }
    const std::vector<Seq2SeqModel>& teachers() const { return teachers_; }
    std::vector<Seq2SeqModel>& teachers() { return teachers_; }
    const std::vector<double>& smoothed_weights() const { return smoothed_; }
    double smoothing_decay() const { return decay_; }
    const TemperatureMode& temperature_mode() const { return temperature_; }
    std::uint64_t vocab_hash() const;

    // smoothed ∝ prev^beta * raw^(1 - beta), entries floored at 1e-12.
    // The first call starts from the uniform vector.
    std::vector<double> smooth(std::span<const double> raw);
    void reset_smoothing();

    std::vector<std::uint64_t> checksums() const;

    // Runs every teacher on the batch, concurrently when `threads` > 1.
    // Results are ordered by teacher index regardless of scheduling.
    std::vector<TeacherOutput> run(const MiniBatch& batch, std::size_t threads = 1) const;

private:
    std::vector<Seq2SeqModel> teachers_;
    std::vector<double> smoothed_;
    double decay_ = 0.7;
    TemperatureMode temperature_;
};

inline constexpr double kWeightFloor = 1e-12;

std::vector<double> smooth_weights(TeacherEnsemble& ensemble, std::span<const double> raw);

// Mean over valid target positions of -sum_v Q(v) log P(v).
Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_probs, const MiniBatch& batch);
Tensor kd_loss_from_log_probs(const Tensor& student_log_probs, const Tensor& teacher_probs,
                              const MiniBatch& batch);

// sum_l alpha_l * kd_loss(student, teacher_l). Gradients reach the student only.
Tensor adaptive_kd_loss(const Tensor& student_log_probs, std::span<const Tensor> teacher_probs,
                        std::span<const double> alpha, const MiniBatch& batch);
Tensor adaptive_kd_loss(const Seq2SeqModel& student, const TeacherEnsemble& ensemble,
                        std::span<const double> alpha, const MiniBatch& batch,
                        std::mt19937_64* rng = nullptr);

Tensor combined_loss(const Tensor& nll, const Tensor& kd, double lambda1, double lambda2);
double combined_loss(double nll, double kd, double lambda1, double lambda2);

// Non-decreasing from lambda2_start at step 0 to lambda2_end at total_steps;
// steps past the end clamp to lambda2_end.
double lambda2_schedule(std::size_t step, std::size_t total_steps, const DistillConfig& config);

}  // namespace akd
