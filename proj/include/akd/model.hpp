#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "akd/corpus.hpp"
#include "akd/tensor.hpp"

namespace akd {

struct ModelConfig {
    std::size_t hidden_size = 64;
    std::size_t ffn_size = 256;
    std::size_t num_layers = 2;
    std::size_t num_heads = 2;
    double dropout_rate = 0.3;
    double label_smoothing = 0.1;
    std::size_t max_positions = 128;
    std::size_t vocab_size = 0;

    // Throws ConfigError naming the offending field.
    void validate() const;

    // 256/1024, 2 layers, dropout 0.3, label smoothing 0.1.
    static ModelConfig full_scale(std::size_t vocab_size);
    // 64/256, 2 layers, 2 heads.
    static ModelConfig desk_scale(std::size_t vocab_size);

    bool operator==(const ModelConfig&) const = default;
};

// Closed-form number of scalar parameters for a configuration.
std::size_t parameter_count(const ModelConfig& config);

struct LayerNormParams {
    Tensor gain, bias;
};

struct AttentionParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct FeedForwardParams {
    Tensor w1, b1, w2, b2;
};

struct EncoderLayer {
    LayerNormParams norm_attn;
    AttentionParams self_attn;
    LayerNormParams norm_ffn;
    FeedForwardParams ffn;
};

struct DecoderLayer {
    LayerNormParams norm_self;
    AttentionParams self_attn;
    LayerNormParams norm_cross;
    AttentionParams cross_attn;
    LayerNormParams norm_ffn;
    FeedForwardParams ffn;
};

// Encoder output kept for repeated decoding.
struct EncoderState {
    Tensor memory;  // [batch*src_len x hidden]
    std::size_t batch = 0;
    std::size_t src_len = 0;
    std::vector<std::uint8_t> src_mask;
};

// Pre-norm transformer encoder-decoder with sinusoidal positions and one
// embedding table shared by source, target, and the output projection.
class Seq2SeqModel {
public:
    Seq2SeqModel() = default;
    Seq2SeqModel(const ModelConfig& config, std::uint64_t seed, std::uint64_t vocab_hash = 0);

    const ModelConfig& config() const { return config_; }
    std::uint64_t vocab_hash() const { return vocab_hash_; }
    void set_vocab_hash(std::uint64_t h) { vocab_hash_ = h; }

    // Parameters in declaration order; the serialization order.
    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
    std::vector<Tensor> parameters() const;
    std::size_t num_parameters() const;

    const Tensor& embedding() const { return embedding_; }
    // The output projection is the embedding table itself.
    const Tensor& output_projection() const { return embedding_; }

    // Training mode enables dropout; evaluation mode is deterministic.
    void train() { training_ = true; }
    void eval() { training_ = false; }
    bool is_training() const { return training_; }

    // Frozen models record no graph and accumulate no gradients.
    void set_trainable(bool trainable);
    bool is_trainable() const;

    // Logits [batch x tgt_len x vocab] under teacher forcing. `rng` is only
    // consulted in training mode and must be non-null there.
    Tensor forward(const MiniBatch& batch, std::mt19937_64* rng = nullptr) const;

    EncoderState encode(const MiniBatch& batch, std::mt19937_64* rng = nullptr) const;
    // tgt_in is [batch x tgt_len]; returns logits [batch x tgt_len x vocab].
    Tensor decode(const EncoderState& state, std::span<const std::int32_t> tgt_in,
                  std::size_t tgt_len, std::mt19937_64* rng = nullptr) const;

    // Deep copy with independent parameter storage.
    Seq2SeqModel clone() const;
    // Copies parameter values from a model of identical configuration.
    void copy_parameters_from(const Seq2SeqModel& other);
    // FNV-1a over parameter bytes; used to verify teachers stay untouched.
    std::uint64_t checksum() const;

private:
    Tensor embed(std::span<const std::int32_t> ids, std::size_t batch, std::size_t len,
                 std::mt19937_64* rng) const;
    Tensor sublayer_dropout(const Tensor& x, std::mt19937_64* rng) const;

    ModelConfig config_;
    std::uint64_t vocab_hash_ = 0;
    bool training_ = false;
    Tensor embedding_;
    std::vector<EncoderLayer> encoder_;
    std::vector<DecoderLayer> decoder_;
    LayerNormParams encoder_norm_;
    LayerNormParams decoder_norm_;
};

Seq2SeqModel init_model(const ModelConfig& config, std::uint64_t seed, std::uint64_t vocab_hash = 0);

// Per-token mean of label-smoothed cross entropy over valid target positions:
// (1 - eps) * -log p(gold) + eps * mean_v(-log p(v)).
Tensor smoothed_nll(const Tensor& logits, const MiniBatch& batch, double epsilon);
// Same, from precomputed log-probabilities [batch x tgt_len x vocab].
Tensor smoothed_nll_from_log_probs(const Tensor& log_probs, const MiniBatch& batch, double epsilon);

inline constexpr std::uint32_t kModelFormatVersion = 1;

// Binary little-endian model file: "AKDM", version, config fields each
// followed by a check byte, vocab hash, then parameters as float64.
void save_model(const Seq2SeqModel& model, const std::filesystem::path& path);
// When `expected_vocab` is given, its size and hash must match the file.
Seq2SeqModel load_model(const std::filesystem::path& path, const Vocabulary* expected_vocab = nullptr);

}  // namespace akd
