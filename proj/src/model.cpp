#include "akd/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "akd/errors.hpp"
#include "akd/ops.hpp"

namespace akd {

void ModelConfig::validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
        throw ConfigError("model config: " + field + " " + why);
    };
    if (hidden_size == 0) fail("hidden_size", "must be positive");
    if (ffn_size == 0) fail("ffn_size", "must be positive");
    if (num_layers == 0) fail("num_layers", "must be positive");
    if (num_heads == 0) fail("num_heads", "must be positive");
    if (hidden_size % num_heads != 0) fail("hidden_size", "must be divisible by num_heads");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate", "must lie in [0,1)");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) fail("label_smoothing", "must lie in [0,1)");
    if (max_positions == 0) fail("max_positions", "must be positive");
    if (vocab_size <= kNumReserved) fail("vocab_size", "must exceed the reserved ids");
}

ModelConfig ModelConfig::full_scale(std::size_t vocab_size) {
    ModelConfig c;
    c.hidden_size = 256;
    c.ffn_size = 1024;
    c.num_layers = 2;
    c.num_heads = 4;
    c.dropout_rate = 0.3;
    c.label_smoothing = 0.1;
    c.max_positions = 256;
    c.vocab_size = vocab_size;
    return c;
}

ModelConfig ModelConfig::desk_scale(std::size_t vocab_size) {
    ModelConfig c;
    c.vocab_size = vocab_size;
    return c;
}

std::size_t parameter_count(const ModelConfig& c) {
    const std::size_t h = c.hidden_size, f = c.ffn_size;
    const std::size_t norm = 2 * h;
    const std::size_t attn = 4 * h * h + 4 * h;
    const std::size_t ffn = 2 * h * f + f + h;
    const std::size_t enc = 2 * norm + attn + ffn;
    const std::size_t dec = 3 * norm + 2 * attn + ffn;
    return c.vocab_size * h + c.num_layers * (enc + dec) + 2 * norm;
}

namespace {

Tensor xavier(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-a, a);
    std::vector<double> v(fan_in * fan_out);
    for (auto& x : v) x = dist(rng);
    return Tensor({fan_in, fan_out}, std::move(v), true);
}

Tensor zeros(std::size_t n) { return Tensor::zeros({n}, true); }

LayerNormParams make_norm(std::size_t h) { return {Tensor::full({h}, 1.0, true), zeros(h)}; }

AttentionParams make_attention(std::size_t h, std::mt19937_64& rng) {
    AttentionParams p;
    p.wq = xavier(h, h, rng);
    p.bq = zeros(h);
    p.wk = xavier(h, h, rng);
    p.bk = zeros(h);
    p.wv = xavier(h, h, rng);
    p.bv = zeros(h);
    p.wo = xavier(h, h, rng);
    p.bo = zeros(h);
    return p;
}

FeedForwardParams make_ffn(std::size_t h, std::size_t f, std::mt19937_64& rng) {
    FeedForwardParams p;
    p.w1 = xavier(h, f, rng);
    p.b1 = zeros(f);
    p.w2 = xavier(f, h, rng);
    p.b2 = zeros(h);
    return p;
}

void push_norm(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
               const LayerNormParams& p) {
    out.emplace_back(prefix + ".gain", p.gain);
    out.emplace_back(prefix + ".bias", p.bias);
}

void push_attention(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                    const AttentionParams& p) {
    out.emplace_back(prefix + ".wq", p.wq);
    out.emplace_back(prefix + ".bq", p.bq);
    out.emplace_back(prefix + ".wk", p.wk);
    out.emplace_back(prefix + ".bk", p.bk);
    out.emplace_back(prefix + ".wv", p.wv);
    out.emplace_back(prefix + ".bv", p.bv);
    out.emplace_back(prefix + ".wo", p.wo);
    out.emplace_back(prefix + ".bo", p.bo);
}

void push_ffn(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
              const FeedForwardParams& p) {
    out.emplace_back(prefix + ".w1", p.w1);
    out.emplace_back(prefix + ".b1", p.b1);
    out.emplace_back(prefix + ".w2", p.w2);
    out.emplace_back(prefix + ".b2", p.b2);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_bias(matmul(x, w), b); }

Tensor norm(const Tensor& x, const LayerNormParams& p) { return layer_norm(x, p.gain, p.bias); }

Tensor multi_head(const Tensor& query_in, const Tensor& kv_in, const AttentionParams& p,
                  const AttentionShape& shape, std::span<const std::uint8_t> key_valid) {
    const Tensor q = linear(query_in, p.wq, p.bq);
    const Tensor k = linear(kv_in, p.wk, p.bk);
    const Tensor v = linear(kv_in, p.wv, p.bv);
    return linear(attention(q, k, v, shape, key_valid), p.wo, p.bo);
}

Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) {
    return linear(relu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

}  // namespace

Seq2SeqModel::Seq2SeqModel(const ModelConfig& config, std::uint64_t seed, std::uint64_t vocab_hash)
    : config_(config), vocab_hash_(vocab_hash) {
    config_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t h = config_.hidden_size, f = config_.ffn_size;
    std::normal_distribution<double> emb(0.0, 1.0 / std::sqrt(static_cast<double>(h)));
    std::vector<double> table(config_.vocab_size * h);
    for (auto& x : table) x = emb(rng);
    embedding_ = Tensor({config_.vocab_size, h}, std::move(table), true);
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
        EncoderLayer e;
        e.norm_attn = make_norm(h);
        e.self_attn = make_attention(h, rng);
        e.norm_ffn = make_norm(h);
        e.ffn = make_ffn(h, f, rng);
        encoder_.push_back(std::move(e));
    }
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
        DecoderLayer d;
        d.norm_self = make_norm(h);
        d.self_attn = make_attention(h, rng);
        d.norm_cross = make_norm(h);
        d.cross_attn = make_attention(h, rng);
        d.norm_ffn = make_norm(h);
        d.ffn = make_ffn(h, f, rng);
        decoder_.push_back(std::move(d));
    }
    encoder_norm_ = make_norm(h);
    decoder_norm_ = make_norm(h);
}

Seq2SeqModel init_model(const ModelConfig& config, std::uint64_t seed, std::uint64_t vocab_hash) {
    return Seq2SeqModel(config, seed, vocab_hash);
}

std::vector<std::pair<std::string, Tensor>> Seq2SeqModel::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("embedding", embedding_);
    for (std::size_t l = 0; l < encoder_.size(); ++l) {
        const auto& e = encoder_[l];
        const std::string p = "encoder." + std::to_string(l);
        push_norm(out, p + ".norm_attn", e.norm_attn);
        push_attention(out, p + ".self_attn", e.self_attn);
        push_norm(out, p + ".norm_ffn", e.norm_ffn);
        push_ffn(out, p + ".ffn", e.ffn);
    }
    for (std::size_t l = 0; l < decoder_.size(); ++l) {
        const auto& d = decoder_[l];
        const std::string p = "decoder." + std::to_string(l);
        push_norm(out, p + ".norm_self", d.norm_self);
        push_attention(out, p + ".self_attn", d.self_attn);
        push_norm(out, p + ".norm_cross", d.norm_cross);
        push_attention(out, p + ".cross_attn", d.cross_attn);
        push_norm(out, p + ".norm_ffn", d.norm_ffn);
        push_ffn(out, p + ".ffn", d.ffn);
    }
    push_norm(out, "encoder.final_norm", encoder_norm_);
    push_norm(out, "decoder.final_norm", decoder_norm_);
    return out;
}

std::vector<Tensor> Seq2SeqModel::parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
}

std::size_t Seq2SeqModel::num_parameters() const {
    std::size_t n = 0;
    for (const auto& t : parameters()) n += t.size();
    return n;
}

void Seq2SeqModel::set_trainable(bool trainable) {
    for (auto& t : parameters()) {
        t.set_requires_grad(trainable);
        if (!trainable) t.zero_grad();
    }
}

bool Seq2SeqModel::is_trainable() const { return embedding_.defined() && embedding_.requires_grad(); }

Tensor Seq2SeqModel::sublayer_dropout(const Tensor& x, std::mt19937_64* rng) const {
    if (!training_ || config_.dropout_rate == 0.0) return x;
    if (!rng) throw ContractError("forward in training mode needs a random generator for dropout");
    return dropout(x, config_.dropout_rate, *rng);
}

Tensor Seq2SeqModel::embed(std::span<const std::int32_t> ids, std::size_t batch, std::size_t len,
                           std::mt19937_64* rng) const {
    if (len > config_.max_positions) {
        throw ContractError("sequence length " + std::to_string(len) + " exceeds max_positions " +
                            std::to_string(config_.max_positions));
    }
    const std::size_t h = config_.hidden_size;
    Tensor x = scale(akd::embedding(embedding_, ids), std::sqrt(static_cast<double>(h)));
    std::vector<double> pos(batch * len * h);
    for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t i = 0; i < h; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(h));
            const double angle = static_cast<double>(t) * freq;
            for (std::size_t b = 0; b < batch; ++b) {
                pos[(b * len + t) * h + i] = std::sin(angle);
                if (i + 1 < h) pos[(b * len + t) * h + i + 1] = std::cos(angle);
            }
        }
    }
    x = add(x, Tensor({batch * len, h}, std::move(pos)));
    return sublayer_dropout(x, rng);
}

EncoderState Seq2SeqModel::encode(const MiniBatch& batch, std::mt19937_64* rng) const {
    EncoderState state;
    state.batch = batch.batch_size;
    state.src_len = batch.src_len;
    state.src_mask = batch.src_mask;
    Tensor x = embed(batch.src_ids, batch.batch_size, batch.src_len, rng);
    const AttentionShape shape{batch.batch_size, batch.src_len, batch.src_len, config_.num_heads, false};
    for (const auto& layer : encoder_) {
        const Tensor h = norm(x, layer.norm_attn);
        x = add(x, sublayer_dropout(multi_head(h, h, layer.self_attn, shape, batch.src_mask), rng));
        x = add(x, sublayer_dropout(feed_forward(norm(x, layer.norm_ffn), layer.ffn), rng));
    }
    state.memory = norm(x, encoder_norm_);
    return state;
}

Tensor Seq2SeqModel::decode(const EncoderState& state, std::span<const std::int32_t> tgt_in,
                            std::size_t tgt_len, std::mt19937_64* rng) const {
    const std::size_t b = state.batch;
    if (tgt_in.size() != b * tgt_len) {
        throw ShapeError("decode: target ids do not form a [" + std::to_string(b) + " x " +
                         std::to_string(tgt_len) + "] matrix");
    }
    Tensor y = embed(tgt_in, b, tgt_len, rng);
    const AttentionShape self_shape{b, tgt_len, tgt_len, config_.num_heads, true};
    const AttentionShape cross_shape{b, tgt_len, state.src_len, config_.num_heads, false};
    for (const auto& layer : decoder_) {
        const Tensor hs = norm(y, layer.norm_self);
        y = add(y, sublayer_dropout(multi_head(hs, hs, layer.self_attn, self_shape, {}), rng));
        y = add(y, sublayer_dropout(multi_head(norm(y, layer.norm_cross), state.memory,
                                               layer.cross_attn, cross_shape, state.src_mask),
                                    rng));
        y = add(y, sublayer_dropout(feed_forward(norm(y, layer.norm_ffn), layer.ffn), rng));
    }
    const Tensor out = norm(y, decoder_norm_);
    const Tensor logits = matmul(out, transpose(embedding_));
    return reshape(logits, {b, tgt_len, config_.vocab_size});
}

Tensor Seq2SeqModel::forward(const MiniBatch& batch, std::mt19937_64* rng) const {
    if (!embedding_.defined()) throw ContractError("forward on an uninitialized model");
    for (const auto* ids : {&batch.src_ids, &batch.tgt_in}) {
        for (auto id : *ids) {
            if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
                throw ContractError("token id " + std::to_string(id) + " outside vocabulary of " +
                                    std::to_string(config_.vocab_size));
            }
        }
    }
    const auto state = encode(batch, rng);
    return decode(state, batch.tgt_in, batch.tgt_len, rng);
}

Seq2SeqModel Seq2SeqModel::clone() const {
    Seq2SeqModel copy = *this;
    auto fresh = [](Tensor& t) { t = t.clone(); };
    fresh(copy.embedding_);
    auto fresh_norm = [&](LayerNormParams& p) {
        fresh(p.gain);
        fresh(p.bias);
    };
    auto fresh_attn = [&](AttentionParams& p) {
        for (Tensor* t : {&p.wq, &p.bq, &p.wk, &p.bk, &p.wv, &p.bv, &p.wo, &p.bo}) fresh(*t);
    };
    auto fresh_ffn = [&](FeedForwardParams& p) {
        for (Tensor* t : {&p.w1, &p.b1, &p.w2, &p.b2}) fresh(*t);
    };
    for (auto& e : copy.encoder_) {
        fresh_norm(e.norm_attn);
        fresh_attn(e.self_attn);
        fresh_norm(e.norm_ffn);
        fresh_ffn(e.ffn);
    }
    for (auto& d : copy.decoder_) {
        fresh_norm(d.norm_self);
        fresh_attn(d.self_attn);
        fresh_norm(d.norm_cross);
        fresh_attn(d.cross_attn);
        fresh_norm(d.norm_ffn);
        fresh_ffn(d.ffn);
    }
    fresh_norm(copy.encoder_norm_);
    fresh_norm(copy.decoder_norm_);
    for (auto& t : copy.parameters()) t.zero_grad();
    return copy;
}

void Seq2SeqModel::copy_parameters_from(const Seq2SeqModel& other) {
    if (!(other.config_ == config_)) throw ContractError("copy_parameters_from: config mismatch");
    auto dst = parameters();
    const auto src = other.parameters();
    for (std::size_t i = 0; i < dst.size(); ++i)
        std::copy(src[i].values().begin(), src[i].values().end(), dst[i].values().begin());
}

std::uint64_t Seq2SeqModel::checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& t : parameters()) {
        const auto v = t.values();
        h = fnv1a64(std::string_view(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double)),
                    h);
    }
    return h;
}

Tensor smoothed_nll_from_log_probs(const Tensor& log_probs, const MiniBatch& batch, double epsilon) {
    if (!(epsilon >= 0.0 && epsilon < 1.0)) throw ContractError("label smoothing must lie in [0,1)");
    if (batch.token_count == 0) throw ContractError("smoothed_nll: batch has no target tokens");
    const std::size_t rows = batch.batch_size * batch.tgt_len;
    if (log_probs.rank() != 3 || log_probs.size() / log_probs.shape().back() != rows) {
        throw ShapeError("smoothed_nll: log-probs " + shape_string(log_probs.shape()) +
                         " do not match batch [" + std::to_string(batch.batch_size) + " x " +
                         std::to_string(batch.tgt_len) + "]");
    }
    const double vocab = static_cast<double>(log_probs.shape().back());
    const double inv_count = 1.0 / static_cast<double>(batch.token_count);
    std::vector<double> w(rows);
    for (std::size_t i = 0; i < rows; ++i) w[i] = batch.tgt_mask[i] ? inv_count : 0.0;
    Tensor gold = dot_const(gather_last(log_probs, batch.tgt_out), w);
    Tensor loss = scale(gold, -(1.0 - epsilon));
    if (epsilon > 0.0) {
        Tensor uniform = dot_const(sum_last(log_probs), w);
        loss = add(loss, scale(uniform, -epsilon / vocab));
    }
    return loss;
}

Tensor smoothed_nll(const Tensor& logits, const MiniBatch& batch, double epsilon) {
    return smoothed_nll_from_log_probs(log_softmax(logits, -1), batch, epsilon);
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

constexpr char kMagic[4] = {'A', 'K', 'D', 'M'};
constexpr std::uint8_t kCheckSalt = 0x5A;

void put_u64(std::string& out, std::uint64_t v) {
    std::uint8_t check = kCheckSalt;
    for (int i = 0; i < 8; ++i) {
        const auto byte = static_cast<std::uint8_t>(v >> (8 * i));
        out.push_back(static_cast<char>(byte));
        check ^= byte;
    }
    out.push_back(static_cast<char>(check));
}

std::uint64_t f64_bits(double d) {
    std::uint64_t u;
    std::memcpy(&u, &d, sizeof u);
    return u;
}

double bits_f64(std::uint64_t u) {
    double d;
    std::memcpy(&d, &u, sizeof d);
    return d;
}

class Reader {
public:
    Reader(std::ifstream& is, std::string path) : is_(is), path_(std::move(path)) {}

    void bytes(char* dst, std::size_t n, const std::string& field) {
        is_.read(dst, static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is_.gcount()) != n) {
            throw LoadError(path_ + ": truncated file while reading " + field);
        }
    }

    std::uint64_t checked_u64(const std::string& field) {
        unsigned char buf[9];
        bytes(reinterpret_cast<char*>(buf), 9, field);
        std::uint64_t v = 0;
        std::uint8_t check = kCheckSalt;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
            check ^= buf[i];
        }
        if (check != buf[8]) throw LoadError(path_ + ": corrupt header field '" + field + "'");
        return v;
    }

    const std::string& path() const { return path_; }

private:
    std::ifstream& is_;
    std::string path_;
};

}  // namespace

void save_model(const Seq2SeqModel& model, const std::filesystem::path& path) {
    const auto& c = model.config();
    std::string header(kMagic, 4);
    for (int i = 0; i < 4; ++i) header.push_back(static_cast<char>(kModelFormatVersion >> (8 * i)));
    put_u64(header, c.hidden_size);
    put_u64(header, c.ffn_size);
    put_u64(header, c.num_layers);
    put_u64(header, c.num_heads);
    put_u64(header, f64_bits(c.dropout_rate));
    put_u64(header, f64_bits(c.label_smoothing));
    put_u64(header, c.max_positions);
    put_u64(header, c.vocab_size);
    put_u64(header, model.vocab_hash());
    put_u64(header, model.num_parameters());

    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write model file " + path.string());
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    std::string body;
    for (const auto& t : model.parameters()) {
        for (double d : t.values()) {
            const auto u = f64_bits(d);
            for (int i = 0; i < 8; ++i) body.push_back(static_cast<char>(u >> (8 * i)));
        }
    }
    os.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!os) throw Error("failed writing model file " + path.string());
}

Seq2SeqModel load_model(const std::filesystem::path& path, const Vocabulary* expected_vocab) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw LoadError("cannot open model file " + path.string());
    Reader r(is, path.string());
    char magic[4];
    r.bytes(magic, 4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0) throw LoadError(r.path() + ": bad magic, not an AKDM model");
    unsigned char vbuf[4];
    r.bytes(reinterpret_cast<char*>(vbuf), 4, "version");
    const std::uint32_t version = vbuf[0] | (vbuf[1] << 8) | (vbuf[2] << 16) | (static_cast<std::uint32_t>(vbuf[3]) << 24);
    if (version != kModelFormatVersion) {
        throw LoadError(r.path() + ": unsupported format version " + std::to_string(version) +
                        " (expected " + std::to_string(kModelFormatVersion) + ")");
    }
    ModelConfig c;
    c.hidden_size = r.checked_u64("hidden_size");
    c.ffn_size = r.checked_u64("ffn_size");
    c.num_layers = r.checked_u64("num_layers");
    c.num_heads = r.checked_u64("num_heads");
    c.dropout_rate = bits_f64(r.checked_u64("dropout_rate"));
    c.label_smoothing = bits_f64(r.checked_u64("label_smoothing"));
    c.max_positions = r.checked_u64("max_positions");
    c.vocab_size = r.checked_u64("vocab_size");
    const std::uint64_t vocab_hash = r.checked_u64("vocab_hash");
    const std::uint64_t count = r.checked_u64("parameter_count");
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw LoadError(r.path() + ": " + e.what());
    }
    if (expected_vocab) {
        if (expected_vocab->size() != c.vocab_size) {
            throw LoadError(r.path() + ": vocab_size mismatch, model has " +
                            std::to_string(c.vocab_size) + ", vocabulary has " +
                            std::to_string(expected_vocab->size()));
        }
        if (expected_vocab->hash() != vocab_hash) {
            throw LoadError(r.path() + ": vocab_hash mismatch, model was trained on another vocabulary");
        }
    }
    if (count != parameter_count(c)) {
        throw LoadError(r.path() + ": parameter_count " + std::to_string(count) +
                        " inconsistent with config (" + std::to_string(parameter_count(c)) + ")");
    }
    Seq2SeqModel model(c, 0, vocab_hash);
    for (auto& [name, t] : model.named_parameters()) {
        Tensor handle = t;
        std::vector<unsigned char> buf(handle.size() * 8);
        r.bytes(reinterpret_cast<char*>(buf.data()), buf.size(), "parameter " + name);
        auto vals = handle.values();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            std::uint64_t u = 0;
            for (int k = 0; k < 8; ++k) u |= static_cast<std::uint64_t>(buf[i * 8 + k]) << (8 * k);
            vals[i] = bits_f64(u);
        }
    }
    if (is.peek() != std::char_traits<char>::eof()) throw LoadError(r.path() + ": trailing bytes after parameters");
    return model;
}

}  // namespace akd
