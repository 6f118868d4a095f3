#include "akd/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "akd/bleu.hpp"
#include "akd/errors.hpp"
#include "akd/ops.hpp"

namespace akd {

void TrainConfig::validate() const {
    if (warmup_steps < 1) throw ConfigError("train: warmup_steps must be >= 1");
    if (!(max_lr > 0.0)) throw ConfigError("train: max_lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train: beta1 must lie in [0,1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train: beta2 must lie in [0,1)");
    if (!(adam_eps > 0.0)) throw ConfigError("train: adam_eps must be positive");
    if (max_tokens == 0) throw ConfigError("train: max_tokens must be positive");
    if (!(clip_norm >= 0.0)) throw ConfigError("train: clip_norm must be >= 0");
    if (threads == 0) throw ConfigError("train: threads must be >= 1");
}

double lr_schedule(std::size_t step, std::size_t warmup_steps, double max_lr) {
    if (step == 0) throw ContractError("lr_schedule: steps count from 1");
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(warmup_steps);
    return max_lr * std::min(s / w, std::sqrt(w / s));
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finalizer over the pair
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

OptimizerState make_optimizer_state(const NamedTensors& params) {
    OptimizerState st;
    for (const auto& [name, p] : params) {
        st.m.emplace_back(p.size(), 0.0);
        st.v.emplace_back(p.size(), 0.0);
    }
    return st;
}

void adam_step(const NamedTensors& params, OptimizerState& state, double lr, const AdamConfig& config) {
    if (state.m.size() != params.size()) state = make_optimizer_state(params);
    for (const auto& [name, p] : params) {
        if (!p.has_grad()) continue;
        const auto g = p.grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (!std::isfinite(g[i])) {
                throw DivergenceError("non-finite gradient in parameter '" + name + "' at index " +
                                      std::to_string(i));
            }
        }
    }
    ++state.t;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor p = params[k].second;
        auto& m = state.m[k];
        auto& v = state.v[k];
        if (m.size() != p.size()) throw ContractError("optimizer state does not match '" + params[k].first + "'");
        auto values = p.values();
        const bool has = p.has_grad();
        const std::span<const double> g = has ? p.grad() : std::span<const double>{};
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double gi = has ? g[i] : 0.0;
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
            values[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config.eps);
        }
        p.zero_grad();
    }
}

double clip_grad_norm(const NamedTensors& params, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, p] : params) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double f = max_norm / norm;
        for (const auto& [name, p] : params) {
            if (!p.has_grad()) continue;
            for (double& g : p.mutable_grad()) g *= f;
        }
    }
    return norm;
}

namespace {

nlohmann::json finite_or_null(double x) {
    return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr);
}

}  // namespace

std::string to_json_line(const EpochRecord& r) {
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["train_loss"] = finite_or_null(r.train_loss);
    j["nll_term"] = finite_or_null(r.nll_term);
    j["kd_term"] = finite_or_null(r.kd_term);
    j["lambda2"] = r.lambda2;
    j["dev_ppl"] = finite_or_null(r.dev_ppl);
    j["dev_bleu"] = finite_or_null(r.dev_bleu);
    j["wall_time_s"] = r.wall_time_s;
    return j.dump();
}

void write_trace_csv(const std::filesystem::path& path, std::span<const TraceRow> rows) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write trace " + path.string());
    const std::size_t n = rows.empty() ? 0 : rows.front().perplexities.size();
    out << "step,batch_id";
    for (std::size_t l = 0; l < n; ++l) out << ",teacher_" << l << "_ppl";
    for (std::size_t l = 0; l < n; ++l) out << ",alpha_raw_" << l;
    for (std::size_t l = 0; l < n; ++l) out << ",alpha_smoothed_" << l;
    out << ",tau,lambda2\n";
    out << std::setprecision(17);
    for (const auto& r : rows) {
        out << r.step << ',' << r.batch_id;
        for (double x : r.perplexities) out << ',' << x;
        for (double x : r.alpha_raw) out << ',' << x;
        for (double x : r.alpha_smoothed) out << ',' << x;
        out << ',' << r.tau << ',' << r.lambda2 << '\n';
    }
}

std::vector<TraceRow> read_trace_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("missing weight trace " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw DataError("empty weight trace " + path.string());
    std::size_t cols = std::count(line.begin(), line.end(), ',') + 1;
    if (cols < 7 || (cols - 4) % 3 != 0 || line.rfind("step,batch_id", 0) != 0) {
        throw DataError("unrecognized weight trace header in " + path.string());
    }
    const std::size_t n = (cols - 4) / 3;
    std::vector<TraceRow> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() != cols) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(cols) +
                            " fields, got " + std::to_string(f.size()));
        }
        TraceRow r;
        try {
            r.step = std::stoull(f[0]);
            r.batch_id = std::stoull(f[1]);
            for (std::size_t l = 0; l < n; ++l) {
                r.perplexities.push_back(std::stod(f[2 + l]));
                r.alpha_raw.push_back(std::stod(f[2 + n + l]));
                r.alpha_smoothed.push_back(std::stod(f[2 + 2 * n + l]));
            }
            r.tau = std::stod(f[2 + 3 * n]);
            r.lambda2 = std::stod(f[3 + 3 * n]);
        } catch (const std::exception&) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed number");
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

double PerplexityStats::perplexity() const {
    if (tokens == 0) throw ContractError("perplexity over zero tokens");
    return std::exp(nll_sum / static_cast<double>(tokens));
}

PerplexityStats batch_nll(const Seq2SeqModel& model, const MiniBatch& batch) {
    if (model.is_training()) throw ContractError("evaluation requires dropout to be disabled");
    NoGradGuard no_grad;
    const Tensor lp = log_softmax(model.forward(batch), -1);
    const std::size_t vocab = lp.shape().back();
    const auto v = lp.values();
    PerplexityStats st;
    for (std::size_t r = 0; r < batch.batch_size * batch.tgt_len; ++r) {
        if (!batch.tgt_mask[r]) continue;
        st.nll_sum -= v[r * vocab + batch.tgt_out[r]];
        ++st.tokens;
    }
    return st;
}

double evaluate_perplexity(const Seq2SeqModel& model, const ParallelCorpus& corpus, std::size_t max_tokens) {
    if (corpus.size() == 0) throw DataError("evaluate_perplexity: empty corpus '" + corpus.name + "'");
    PerplexityStats total;
    for (const auto& b : make_eval_batches(corpus, max_tokens)) {
        const auto st = batch_nll(model, b);
        total.nll_sum += st.nll_sum;
        total.tokens += st.tokens;
    }
    return total.perplexity();
}

std::vector<DecodeResult> greedy_decode_batch(const Seq2SeqModel& model, const MiniBatch& batch,
                                              std::size_t max_len) {
    if (model.is_training()) throw ContractError("decoding requires dropout to be disabled");
    NoGradGuard no_grad;
    const std::size_t b = batch.batch_size;
    std::vector<DecodeResult> out(b);
    if (b == 0 || max_len == 0) return out;
    max_len = std::min(max_len, model.config().max_positions);
    const EncoderState state = model.encode(batch);
    std::vector<std::vector<std::int32_t>> prefix(b, std::vector<std::int32_t>{kBosId});
    std::vector<bool> done(b, false);
    std::size_t remaining = b;
    for (std::size_t t = 1; t <= max_len && remaining > 0; ++t) {
        std::vector<std::int32_t> tgt_in(b * t);
        for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t j = 0; j < t; ++j) tgt_in[i * t + j] = j < prefix[i].size() ? prefix[i][j] : kPadId;
        }
        const Tensor logits = model.decode(state, tgt_in, t);
        const std::size_t vocab = logits.shape().back();
        const auto lv = logits.values();
        for (std::size_t i = 0; i < b; ++i) {
            if (done[i]) continue;
            const double* row = lv.data() + (i * t + (t - 1)) * vocab;
            std::int32_t best = 0;
            for (std::size_t v = 1; v < vocab; ++v) {
                if (row[v] > row[best]) best = static_cast<std::int32_t>(v);
            }
            if (best == kEosId) {
                done[i] = true;
                --remaining;
                continue;
            }
            prefix[i].push_back(best);
            out[i].tokens.push_back(best);
            if (t == max_len) out[i].truncated = true;
        }
    }
    return out;
}

DecodeResult greedy_decode(const Seq2SeqModel& model, std::span<const std::int32_t> src, std::size_t max_len) {
    const SentencePair pair{TokenIds(src.begin(), src.end()), TokenIds{kUnkId}};
    const std::vector<SentencePair> pairs{pair};
    return greedy_decode_batch(model, make_batch(pairs), max_len).front();
}

std::vector<TokenIds> translate_corpus(const Seq2SeqModel& model, const ParallelCorpus& corpus,
                                       std::size_t max_tokens) {
    std::vector<TokenIds> hyps(corpus.size());
    for (const auto& b : make_eval_batches(corpus, max_tokens)) {
        const std::size_t max_len = std::min(2 * b.src_len + 10, model.config().max_positions);
        auto decoded = greedy_decode_batch(model, b, max_len);
        for (std::size_t i = 0; i < decoded.size(); ++i) hyps[b.pair_index[i]] = std::move(decoded[i].tokens);
    }
    return hyps;
}

Sentence ids_as_sentence(std::span<const std::int32_t> ids) {
    Sentence s;
    s.reserve(ids.size());
    for (auto id : ids) s.push_back(std::to_string(id));
    return s;
}

double evaluate_bleu(const Seq2SeqModel& model, const ParallelCorpus& corpus, std::size_t max_tokens) {
    if (corpus.size() == 0) throw DataError("evaluate_bleu: empty corpus '" + corpus.name + "'");
    const auto hyps = translate_corpus(model, corpus, max_tokens);
    std::vector<Sentence> h, r;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        h.push_back(ids_as_sentence(hyps[i]));
        r.push_back(ids_as_sentence(corpus.pairs[i].tgt));
    }
    return corpus_bleu(h, r);
}

namespace {

struct StepTerms {
    Tensor loss;
    double nll = 0.0;
    double kd = 0.0;
    double lambda2 = 0.0;
};

using StepFn = std::function<StepTerms(Seq2SeqModel&, const MiniBatch&, std::size_t step,
                                       std::size_t total_steps, std::mt19937_64& rng)>;

struct DevScore {
    double ppl = std::numeric_limits<double>::quiet_NaN();
    double bleu = std::numeric_limits<double>::quiet_NaN();
};

DevScore score_dev(Seq2SeqModel& model, const ParallelCorpus* dev, const TrainConfig& config) {
    DevScore s;
    if (!dev) return s;
    model.eval();
    s.ppl = evaluate_perplexity(model, *dev, config.max_tokens);
    if (config.eval_bleu || config.select_by_bleu) s.bleu = evaluate_bleu(model, *dev, config.max_tokens);
    return s;
}

bool improves(const DevScore& s, const TrainResult& best, bool by_bleu) {
    if (by_bleu) return std::isfinite(s.bleu) && !(s.bleu <= best.best_dev_bleu);
    return std::isfinite(s.ppl) && !(s.ppl >= best.best_dev_ppl);
}

// Shared epoch/batch loop. The starting model counts as epoch 0 for
// best-checkpoint selection.
TrainResult run_loop(Seq2SeqModel model, const ParallelCorpus& train, const ParallelCorpus* dev,
                     const TrainConfig& config, const TrainHooks& hooks, const StepFn& step_fn) {
    config.validate();
    if (train.size() == 0) throw DataError("training corpus '" + train.name + "' is empty");
    TrainResult result;
    const auto t0 = std::chrono::steady_clock::now();
    const bool by_bleu = config.select_by_bleu;

    DevScore start = score_dev(model, dev, config);
    result.model = model.clone();
    result.best_dev_ppl = start.ppl;
    result.best_dev_bleu = start.bleu;

    std::size_t total_steps = 0;
    for (std::size_t e = 1; e <= config.epochs; ++e) {
        total_steps += make_epoch_batches(train, config.max_tokens, derive_seed(config.seed, kEpochStream + e))
                           .batches.size();
    }

    const NamedTensors params = model.named_parameters();
    OptimizerState opt = make_optimizer_state(params);
    const AdamConfig adam{config.beta1, config.beta2, config.adam_eps};
    std::mt19937_64 rng(derive_seed(config.seed, kDropoutStream));

    for (std::size_t e = 1; e <= config.epochs && !result.diverged; ++e) {
        auto epoch = make_epoch_batches(train, config.max_tokens, derive_seed(config.seed, kEpochStream + e));
        result.skipped_pairs += epoch.skipped;
        EpochRecord rec;
        rec.epoch = e;
        double loss_sum = 0.0, nll_sum = 0.0, kd_sum = 0.0, weight = 0.0;
        model.train();
        for (const auto& batch : epoch.batches) {
            ++result.steps;
            StepTerms terms;
            try {
                terms = step_fn(model, batch, result.steps - 1, total_steps, rng);
                const double loss = terms.loss.item();
                if (!std::isfinite(loss)) {
                    throw DivergenceError("non-finite training loss at step " + std::to_string(result.steps));
                }
                backward(terms.loss);
                if (config.clip_norm > 0.0) clip_grad_norm(params, config.clip_norm);
                adam_step(params, opt, lr_schedule(result.steps, config.warmup_steps, config.max_lr), adam);
            } catch (const DivergenceError& err) {
                --result.steps;
                result.diverged = true;
                result.divergence = err.what();
                for (auto [name, p] : params) p.zero_grad();
                break;
            }
            const double w = static_cast<double>(batch.token_count);
            loss_sum += terms.loss.item() * w;
            nll_sum += terms.nll * w;
            kd_sum += terms.kd * w;
            weight += w;
            rec.lambda2 = terms.lambda2;
        }
        if (result.diverged) break;
        rec.train_loss = weight > 0 ? loss_sum / weight : 0.0;
        rec.nll_term = weight > 0 ? nll_sum / weight : 0.0;
        rec.kd_term = weight > 0 ? kd_sum / weight : 0.0;
        const DevScore s = score_dev(model, dev, config);
        rec.dev_ppl = s.ppl;
        rec.dev_bleu = s.bleu;
        rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (!dev || improves(s, result, by_bleu)) {
            result.model = model.clone();
            result.best_epoch = e;
            result.best_dev_ppl = s.ppl;
            result.best_dev_bleu = s.bleu;
        }
        result.epochs.push_back(rec);
        if (hooks.on_epoch) hooks.on_epoch(rec);
    }
    result.model.eval();
    return result;
}

}  // namespace

TrainResult train_teacher(const TrainConfig& config, const ModelConfig& model_config, const ParallelCorpus& train,
                          const ParallelCorpus* dev, const TrainHooks& hooks) {
    model_config.validate();
    if (train.vocab_size != 0 && train.vocab_size != model_config.vocab_size) {
        throw ContractError("corpus '" + train.name + "' uses a vocabulary of " + std::to_string(train.vocab_size) +
                            " tokens but the model expects " + std::to_string(model_config.vocab_size));
    }
    Seq2SeqModel model = init_model(model_config, derive_seed(config.seed, kInitStream), train.vocab_hash);
    const double eps = model_config.label_smoothing;
    return run_loop(std::move(model), train, dev, config, hooks,
                    [eps](Seq2SeqModel& m, const MiniBatch& b, std::size_t, std::size_t, std::mt19937_64& rng) {
                        StepTerms t;
                        t.loss = smoothed_nll(m.forward(b, &rng), b, eps);
                        t.nll = t.loss.item();
                        return t;
                    });
}

TrainResult finetune(const Seq2SeqModel& teacher, const ParallelCorpus& train, const ParallelCorpus* dev,
                     const TrainConfig& config, const TrainHooks& hooks) {
    if (teacher.vocab_hash() != train.vocab_hash) {
        throw ContractError("finetune: model vocabulary hash does not match corpus '" + train.name + "'");
    }
    if (config.epochs == 0) {
        TrainResult r;
        r.model = teacher.clone();
        r.model.eval();
        return r;
    }
    Seq2SeqModel model = teacher.clone();
    model.set_trainable(true);
    const double eps = model.config().label_smoothing;
    return run_loop(std::move(model), train, dev, config, hooks,
                    [eps](Seq2SeqModel& m, const MiniBatch& b, std::size_t, std::size_t, std::mt19937_64& rng) {
                        StepTerms t;
                        t.loss = smoothed_nll(m.forward(b, &rng), b, eps);
                        t.nll = t.loss.item();
                        return t;
                    });
}

TrainResult distill_train(const ParallelCorpus& train, const ParallelCorpus* dev, TeacherEnsemble& ensemble,
                          const DistillConfig& dc, const TrainConfig& config, const ModelConfig& student_config,
                          const TrainHooks& hooks) {
    dc.validate();
    student_config.validate();
    if (ensemble.size() == 0) throw ContractError("distill_train: empty teacher ensemble");
    for (std::size_t l = 0; l < ensemble.size(); ++l) {
        const auto& t = ensemble.teachers()[l];
        if (t.is_training()) throw ContractError("distill_train: teacher " + std::to_string(l) + " is in training mode");
        if (t.is_trainable()) throw ContractError("distill_train: teacher " + std::to_string(l) + " is not frozen");
        if (t.vocab_hash() != train.vocab_hash || t.config().vocab_size != student_config.vocab_size) {
            throw ContractError("distill_train: teacher " + std::to_string(l) +
                                " does not share the student's vocabulary");
        }
    }
    ensemble.reset_smoothing();
    Seq2SeqModel student = init_model(student_config, derive_seed(config.seed, kInitStream), train.vocab_hash);
    const double eps = student_config.label_smoothing;
    const std::size_t L = ensemble.size();
    std::vector<TraceRow> trace;

    auto step_fn = [&](Seq2SeqModel& m, const MiniBatch& b, std::size_t step, std::size_t total,
                       std::mt19937_64& rng) {
        const auto outputs = ensemble.run(b, config.threads);
        std::vector<double> ppl(L);
        std::vector<Tensor> probs(L);
        for (std::size_t l = 0; l < L; ++l) {
            ppl[l] = outputs[l].perplexity;
            probs[l] = outputs[l].probs;
        }
        ContributionWeights w = contribution_weights(ppl, dc.temperature);
        if (dc.contribution == ContributionMode::Equal) w.raw.assign(L, 1.0 / static_cast<double>(L));
        w.smoothed = dc.smoothing ? ensemble.smooth(w.raw) : w.raw;

        StepTerms t;
        t.lambda2 = lambda2_schedule(step, total, dc);
        const Tensor lp = log_softmax(m.forward(b, &rng), -1);
        const Tensor nll = smoothed_nll_from_log_probs(lp, b, eps);
        const Tensor kd = adaptive_kd_loss(lp, probs, w.smoothed, b);
        t.loss = combined_loss(nll, kd, dc.lambda1, t.lambda2);
        t.nll = nll.item();
        t.kd = kd.item();

        TraceRow row;
        row.step = step;
        row.batch_id = b.batch_id;
        row.perplexities = std::move(w.perplexities);
        row.alpha_raw = std::move(w.raw);
        row.alpha_smoothed = std::move(w.smoothed);
        row.tau = w.temperature;
        row.lambda2 = t.lambda2;
        if (hooks.on_trace) hooks.on_trace(row);
        trace.push_back(std::move(row));
        return t;
    };
    TrainResult r = run_loop(std::move(student), train, dev, config, hooks, step_fn);
    // A diverged step may have logged its weights without an update.
    if (trace.size() > r.steps) trace.resize(r.steps);
    r.trace = std::move(trace);
    return r;
}

}  // namespace akd
