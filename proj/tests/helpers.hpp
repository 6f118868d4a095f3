#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "akd/corpus.hpp"
#include "akd/model.hpp"
#include "akd/tensor.hpp"
#include "akd/vocab.hpp"

namespace akd::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Random token sequences over ids [kNumReserved, vocab).
inline std::vector<SentencePair> random_pairs(std::mt19937_64& rng, std::size_t count, std::size_t vocab,
                                              std::size_t max_len = 6) {
    std::uniform_int_distribution<std::int32_t> tok(static_cast<std::int32_t>(kNumReserved),
                                                    static_cast<std::int32_t>(vocab - 1));
    std::uniform_int_distribution<std::size_t> len(1, max_len);
    std::vector<SentencePair> pairs(count);
    for (auto& p : pairs) {
        p.src.resize(len(rng));
        p.tgt.resize(len(rng));
        for (auto& t : p.src) t = tok(rng);
        for (auto& t : p.tgt) t = tok(rng);
    }
    return pairs;
}

inline MiniBatch random_batch(std::mt19937_64& rng, std::size_t count, std::size_t vocab, std::size_t max_len = 6) {
    const auto pairs = random_pairs(rng, count, vocab, max_len);
    return make_batch(std::span<const SentencePair>(pairs));
}

inline ModelConfig tiny_config(std::size_t vocab = 16) {
    ModelConfig c;
    c.hidden_size = 8;
    c.ffn_size = 12;
    c.num_layers = 1;
    c.num_heads = 2;
    c.dropout_rate = 0.0;
    c.label_smoothing = 0.1;
    c.max_positions = 32;
    c.vocab_size = vocab;
    return c;
}

// Row-wise softmax of random logits, shaped like a model output.
inline Tensor random_distribution(std::mt19937_64& rng, std::size_t batch, std::size_t len, std::size_t vocab,
                                  double sharpness = 2.0) {
    std::normal_distribution<double> dist(0.0, sharpness);
    std::vector<double> v(batch * len * vocab);
    for (std::size_t r = 0; r < batch * len; ++r) {
        double z = 0.0;
        for (std::size_t k = 0; k < vocab; ++k) z += v[r * vocab + k] = std::exp(dist(rng));
        for (std::size_t k = 0; k < vocab; ++k) v[r * vocab + k] /= z;
    }
    return Tensor({batch, len, vocab}, std::move(v));
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("akd-" + tag + "-" + std::to_string(rd()));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

}  // namespace akd::testing
