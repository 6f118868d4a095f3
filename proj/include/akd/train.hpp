#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "akd/corpus.hpp"
#include "akd/distill.hpp"
#include "akd/model.hpp"

namespace akd {

struct TrainConfig {
    std::size_t epochs = 20;
    double max_lr = 5e-4;
    std::size_t warmup_steps = 4000;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-9;
    std::size_t max_tokens = kDeskMaxTokens;
    std::uint64_t seed = 1;
    double clip_norm = 0.0;  // 0 disables clipping
    bool eval_bleu = false;       // decode the dev set after every epoch
    bool select_by_bleu = false;  // implies eval_bleu
    std::size_t threads = 1;      // concurrent teacher passes

    void validate() const;
};

// max_lr * min(step / warmup, sqrt(warmup / step)), step >= 1.
double lr_schedule(std::size_t step, std::size_t warmup_steps, double max_lr);

// Independent, reproducible sub-seeds for init, dropout and shuffling.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);
inline constexpr std::uint64_t kInitStream = 0x1417;
inline constexpr std::uint64_t kDropoutStream = 0xD409;
inline constexpr std::uint64_t kEpochStream = 0xE90C;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct OptimizerState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::size_t t = 0;
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
};

OptimizerState make_optimizer_state(const NamedTensors& params);

// Bias-corrected Adam on the gradients currently stored in `params`, which
// are then cleared. A non-finite gradient aborts before any parameter
// changes, with a DivergenceError naming the parameter.
void adam_step(const NamedTensors& params, OptimizerState& state, double lr, const AdamConfig& config = {});

// Rescales all gradients so their joint L2 norm is at most `max_norm`.
// Returns the norm before clipping.
double clip_grad_norm(const NamedTensors& params, double max_norm);

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double nll_term = 0.0;
    double kd_term = 0.0;
    double lambda2 = 0.0;
    double dev_ppl = std::numeric_limits<double>::quiet_NaN();
    double dev_bleu = std::numeric_limits<double>::quiet_NaN();
    double wall_time_s = 0.0;
};

std::string to_json_line(const EpochRecord& record);

struct TraceRow {
    std::size_t step = 0;
    std::size_t batch_id = 0;
    std::vector<double> perplexities;
    std::vector<double> alpha_raw;
    std::vector<double> alpha_smoothed;
    double tau = 1.0;
    double lambda2 = 0.0;
};

void write_trace_csv(const std::filesystem::path& path, std::span<const TraceRow> rows);
std::vector<TraceRow> read_trace_csv(const std::filesystem::path& path);

struct TrainHooks {
    std::function<void(const EpochRecord&)> on_epoch;
    std::function<void(const TraceRow&)> on_trace;
};

struct TrainResult {
    Seq2SeqModel model;  // best dev checkpoint, or the last good one
    std::vector<EpochRecord> epochs;
    std::vector<TraceRow> trace;
    std::size_t best_epoch = 0;  // 0 is the starting point
    double best_dev_ppl = std::numeric_limits<double>::quiet_NaN();
    double best_dev_bleu = std::numeric_limits<double>::quiet_NaN();
    std::size_t steps = 0;
    std::size_t skipped_pairs = 0;
    bool diverged = false;
    std::string divergence;
};

// From a random init on one corpus with the label-smoothed NLL only.
TrainResult train_teacher(const TrainConfig& config, const ModelConfig& model_config,
                          const ParallelCorpus& train, const ParallelCorpus* dev,
                          const TrainHooks& hooks = {});

// Continues training every parameter of `teacher` on the low-resource
// corpus with a fresh optimizer and restarted warmup.
TrainResult finetune(const Seq2SeqModel& teacher, const ParallelCorpus& train, const ParallelCorpus* dev,
                     const TrainConfig& config, const TrainHooks& hooks = {});

// The student loop: per-batch teacher perplexities, contribution weights,
// lambda1 * NLL + lambda2(step) * sum_l alpha_l KD_l, Adam.
TrainResult distill_train(const ParallelCorpus& train, const ParallelCorpus* dev, TeacherEnsemble& ensemble,
                          const DistillConfig& distill_config, const TrainConfig& config,
                          const ModelConfig& student_config, const TrainHooks& hooks = {});

struct PerplexityStats {
    double nll_sum = 0.0;
    std::size_t tokens = 0;
    double perplexity() const;
};

PerplexityStats batch_nll(const Seq2SeqModel& model, const MiniBatch& batch);
double evaluate_perplexity(const Seq2SeqModel& model, const ParallelCorpus& corpus,
                           std::size_t max_tokens = kDeskMaxTokens);

struct DecodeResult {
    TokenIds tokens;  // without bos/eos
    bool truncated = false;
};

// Argmax decoding from bos until eos or `max_len` tokens; ties go to the
// lowest id.
DecodeResult greedy_decode(const Seq2SeqModel& model, std::span<const std::int32_t> src, std::size_t max_len);
std::vector<DecodeResult> greedy_decode_batch(const Seq2SeqModel& model, const MiniBatch& batch,
                                              std::size_t max_len);
// Decodes every source sentence; max length is 2 * |src| + 10 capped by
// the model's position limit.
std::vector<TokenIds> translate_corpus(const Seq2SeqModel& model, const ParallelCorpus& corpus,
                                       std::size_t max_tokens = kDeskMaxTokens);
double evaluate_bleu(const Seq2SeqModel& model, const ParallelCorpus& corpus,
                     std::size_t max_tokens = kDeskMaxTokens);

Sentence ids_as_sentence(std::span<const std::int32_t> ids);

}  // namespace akd
