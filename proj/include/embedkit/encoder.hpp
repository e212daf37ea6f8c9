#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "embedkit/rng.hpp"
#include "embedkit/tape.hpp"
#include "embedkit/tokenizer.hpp"

namespace embedkit {

struct EncoderConfig {
    std::int64_t vocab_buckets = 4096;
    std::int64_t max_seq_len = 64;
    std::int64_t model_dim = 64;
    std::int64_t num_layers = 2;
    std::int64_t num_heads = 4;
    std::int64_t ff_dim = 128;
    std::int64_t output_dim = 64;
    std::vector<std::int64_t> mrl_dims = {16, 32, 64};
    bool use_positional = true;

    bool operator==(const EncoderConfig&) const = default;

    void validate() const {
        if (vocab_buckets < 1 || max_seq_len < 1 || model_dim < 1 || num_layers < 1 ||
            num_heads < 1 || ff_dim < 1 || output_dim < 1)
            throw ConfigError("encoder config fields must be positive");
        if (model_dim % num_heads != 0)
            throw ConfigError("model_dim " + std::to_string(model_dim) +
                              " not divisible by num_heads " + std::to_string(num_heads));
        if (mrl_dims.empty()) throw ConfigError("mrl_dims must be non-empty");
        for (std::size_t i = 0; i + 1 < mrl_dims.size(); ++i)
            if (mrl_dims[i] >= mrl_dims[i + 1])
                throw ConfigError("mrl_dims must be strictly ascending");
        if (mrl_dims.back() != output_dim)
            throw ConfigError("last mrl dim " + std::to_string(mrl_dims.back()) +
                              " must equal output_dim " + std::to_string(output_dim));
        if (mrl_dims.front() < 1) throw ConfigError("mrl_dims must be positive");
    }
};

struct TokenSequence {
    std::vector<std::int64_t> ids;
    std::vector<std::uint8_t> mask;  // 1 = attended, 0 = padding

    std::int64_t size() const { return static_cast<std::int64_t>(ids.size()); }
};

inline TokenSequence tokenize(const std::string& text, const EncoderConfig& cfg) {
    auto terms = split_terms(text);
    if (terms.empty()) throw EmptyInputError("tokenize: text has no tokens");
    auto ids = hash_terms(terms, cfg.vocab_buckets);
    if (static_cast<std::int64_t>(ids.size()) > cfg.max_seq_len)
        ids.resize(static_cast<std::size_t>(cfg.max_seq_len));
    TokenSequence seq;
    seq.ids = std::move(ids);
    seq.mask.assign(seq.ids.size(), 1);
    return seq;
}

// Task-prefix composition for queries. Byte-exact contract: embeddings are
// only comparable across runs that used the same composition.
inline std::string compose_query(const std::string& task, const std::string& query) {
    return "task: " + task + " | query: " + query;
}

template <typename T>
using ParamMap = std::map<std::string, TensorT<T>>;
using Params = ParamMap<float>;
using ParamVals = std::map<std::string, Val>;

template <typename U, typename T>
ParamMap<U> cast_param_map(const ParamMap<T>& params) {
    ParamMap<U> out;
    for (const auto& [name, t] : params) out.emplace(name, t.template cast<U>());
    return out;
}

namespace detail {

inline std::string layer_prefix(std::int64_t i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "layer%02d.", static_cast<int>(i));
    return buf;
}

template <typename T>
TensorT<T> trunc_normal_tensor(Shape shape, double std_dev, Rng& rng) {
    TensorT<T> t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<T>(rng.truncated_normal(std_dev));
    return t;
}

}  // namespace detail

// Parameter name -> shape contract for a config; checkpoint loading and
// initialization must agree on it.
inline std::map<std::string, Shape> expected_param_shapes(const EncoderConfig& cfg) {
    std::map<std::string, Shape> s;
    s["embed.token"] = {cfg.vocab_buckets, cfg.model_dim};
    if (cfg.use_positional) s["embed.pos"] = {cfg.max_seq_len, cfg.model_dim};
    for (std::int64_t i = 0; i < cfg.num_layers; ++i) {
        std::string lp = detail::layer_prefix(i);
        s[lp + "attn_ln.gain"] = {cfg.model_dim};
        s[lp + "attn_ln.bias"] = {cfg.model_dim};
        s[lp + "attn.wq"] = {cfg.model_dim, cfg.model_dim};
        s[lp + "attn.wk"] = {cfg.model_dim, cfg.model_dim};
        s[lp + "attn.wv"] = {cfg.model_dim, cfg.model_dim};
        s[lp + "attn.wo"] = {cfg.model_dim, cfg.model_dim};
        s[lp + "ff_ln.gain"] = {cfg.model_dim};
        s[lp + "ff_ln.bias"] = {cfg.model_dim};
        s[lp + "ff.w1"] = {cfg.model_dim, cfg.ff_dim};
        s[lp + "ff.b1"] = {cfg.ff_dim};
        s[lp + "ff.w2"] = {cfg.ff_dim, cfg.model_dim};
        s[lp + "ff.b2"] = {cfg.model_dim};
    }
    s["out_ln.gain"] = {cfg.model_dim};
    s["out_ln.bias"] = {cfg.model_dim};
    s["proj"] = {cfg.model_dim, cfg.output_dim};
    return s;
}

// Fresh parameters: truncated normal (std 0.02) weights, unit layer-norm
// gains, zero biases. Draw order is fixed, so a seed pins every value.
inline Params init_encoder_params(const EncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    constexpr double kStd = 0.02;
    Params p;
    auto w = [&](const std::string& name, Shape shape) {
        p.emplace(name, detail::trunc_normal_tensor<float>(std::move(shape), kStd, rng));
    };
    w("embed.token", {cfg.vocab_buckets, cfg.model_dim});
    if (cfg.use_positional) w("embed.pos", {cfg.max_seq_len, cfg.model_dim});
    for (std::int64_t i = 0; i < cfg.num_layers; ++i) {
        std::string lp = detail::layer_prefix(i);
        p.emplace(lp + "attn_ln.gain", Tensor::full({cfg.model_dim}, 1.0f));
        p.emplace(lp + "attn_ln.bias", Tensor({cfg.model_dim}));
        w(lp + "attn.wq", {cfg.model_dim, cfg.model_dim});
        w(lp + "attn.wk", {cfg.model_dim, cfg.model_dim});
        w(lp + "attn.wv", {cfg.model_dim, cfg.model_dim});
        w(lp + "attn.wo", {cfg.model_dim, cfg.model_dim});
        p.emplace(lp + "ff_ln.gain", Tensor::full({cfg.model_dim}, 1.0f));
        p.emplace(lp + "ff_ln.bias", Tensor({cfg.model_dim}));
        w(lp + "ff.w1", {cfg.model_dim, cfg.ff_dim});
        p.emplace(lp + "ff.b1", Tensor({cfg.ff_dim}));
        w(lp + "ff.w2", {cfg.ff_dim, cfg.model_dim});
        p.emplace(lp + "ff.b2", Tensor({cfg.model_dim}));
    }
    p.emplace("out_ln.gain", Tensor::full({cfg.model_dim}, 1.0f));
    p.emplace("out_ln.bias", Tensor({cfg.model_dim}));
    w("proj", {cfg.model_dim, cfg.output_dim});
    return p;
}

template <typename T>
ParamVals register_params(Tape<T>& tape, const ParamMap<T>& params) {
    ParamVals vals;
    for (const auto& [name, t] : params) vals.emplace(name, tape.param(name, t));
    return vals;
}

template <typename T>
ParamVals leaf_params(Tape<T>& tape, const ParamMap<T>& params) {
    ParamVals vals;
    for (const auto& [name, t] : params) vals.emplace(name, tape.leaf(t));
    return vals;
}

namespace detail {

// Additive attention bias: masked key columns get a large negative logit, so
// their softmax weight underflows to exactly zero.
template <typename T>
std::optional<Val> attention_bias(Tape<T>& tape, const std::vector<std::uint8_t>& mask) {
    bool any_masked = false;
    for (auto m : mask) any_masked |= (m == 0);
    if (!any_masked) return std::nullopt;
    std::int64_t len = static_cast<std::int64_t>(mask.size());
    TensorT<T> bias({len, len});
    for (std::int64_t i = 0; i < len; ++i)
        for (std::int64_t j = 0; j < len; ++j)
            if (!mask[static_cast<std::size_t>(j)]) bias.at(i, j) = T(-1e9);
    return tape.leaf(std::move(bias));
}

template <typename T>
Val attention_block(Tape<T>& tape, Val x, const ParamVals& pv, const std::string& lp,
                    const EncoderConfig& cfg, const std::optional<Val>& bias) {
    Val h = tape.layer_norm(x, pv.at(lp + "attn_ln.gain"), pv.at(lp + "attn_ln.bias"));
    Val q = tape.matmul(h, pv.at(lp + "attn.wq"));
    Val k = tape.matmul(h, pv.at(lp + "attn.wk"));
    Val v = tape.matmul(h, pv.at(lp + "attn.wv"));
    std::int64_t head_dim = cfg.model_dim / cfg.num_heads;
    Val scale = tape.leaf(TensorT<T>::scalar(T(1) / std::sqrt(static_cast<T>(head_dim))));
    std::optional<Val> merged;
    for (std::int64_t hd = 0; hd < cfg.num_heads; ++hd) {
        Val qh = tape.slice(q, 1, hd * head_dim, head_dim);
        Val kh = tape.slice(k, 1, hd * head_dim, head_dim);
        Val vh = tape.slice(v, 1, hd * head_dim, head_dim);
        Val scores = tape.mul(tape.matmul(qh, tape.transpose(kh)), scale);
        if (bias) scores = tape.add(scores, *bias);
        Val attn = tape.softmax(scores);
        Val oh = tape.matmul(attn, vh);
        merged = merged ? tape.concat(*merged, oh, 1) : oh;
    }
    Val out = tape.matmul(*merged, pv.at(lp + "attn.wo"));
    return tape.add(x, out);
}

template <typename T>
Val feed_forward_block(Tape<T>& tape, Val x, const ParamVals& pv, const std::string& lp) {
    Val h = tape.layer_norm(x, pv.at(lp + "ff_ln.gain"), pv.at(lp + "ff_ln.bias"));
    Val f = tape.add(tape.matmul(h, pv.at(lp + "ff.w1")), pv.at(lp + "ff.b1"));
    f = tape.gelu(f);
    f = tape.add(tape.matmul(f, pv.at(lp + "ff.w2")), pv.at(lp + "ff.b2"));
    return tape.add(x, f);
}

}  // namespace detail

// Bidirectional self-attention over the unmasked positions; masked positions
// are excluded from attention keys (and later from pooling). Output is the
// [len x model_dim] token representation sequence.
template <typename T>
Val encode_tokens_graph(Tape<T>& tape, const ParamVals& pv, const EncoderConfig& cfg,
                        const TokenSequence& seq) {
    if (seq.ids.empty()) throw EmptyInputError("encode_tokens: empty token sequence");
    if (seq.ids.size() != seq.mask.size())
        throw DimensionError("encode_tokens: ids/mask length mismatch");
    if (seq.size() > cfg.max_seq_len)
        throw DimensionError("encode_tokens: sequence length " + std::to_string(seq.size()) +
                             " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    bool any_unmasked = false;
    for (auto m : seq.mask) any_unmasked |= (m != 0);
    if (!any_unmasked) throw EmptyInputError("encode_tokens: all positions masked");

    Val x = tape.gather_rows(pv.at("embed.token"), seq.ids);
    if (cfg.use_positional) {
        std::vector<std::int64_t> pos(seq.ids.size());
        for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::int64_t>(i);
        x = tape.add(x, tape.gather_rows(pv.at("embed.pos"), pos));
    }
    auto bias = detail::attention_bias(tape, seq.mask);
    for (std::int64_t i = 0; i < cfg.num_layers; ++i) {
        std::string lp = detail::layer_prefix(i);
        x = detail::attention_block(tape, x, pv, lp, cfg, bias);
        x = detail::feed_forward_block(tape, x, pv, lp);
    }
    return tape.layer_norm(x, pv.at("out_ln.gain"), pv.at("out_ln.bias"));
}

// Arithmetic mean over unmasked rows only; [1 x model_dim].
template <typename T>
Val mean_pool_graph(Tape<T>& tape, Val token_embeds, const std::vector<std::uint8_t>& mask) {
    const auto& tv = tape.value(token_embeds);
    if (tv.rank() != 2) throw DimensionError("mean_pool expects [len x dim] input");
    if (static_cast<std::int64_t>(mask.size()) != tv.dim(0))
        throw DimensionError("mean_pool: mask length does not match rows");
    std::int64_t kept = 0;
    for (auto m : mask) kept += (m != 0);
    if (kept == 0) throw EmptyInputError("mean_pool: all rows masked");
    std::int64_t len = tv.dim(0);
    TensorT<T> col({len, 1});
    for (std::int64_t i = 0; i < len; ++i)
        col[i] = mask[static_cast<std::size_t>(i)] ? T(1) : T(0);
    Val weighted = tape.mul(token_embeds, tape.leaf(std::move(col)));
    Val total = tape.sum(weighted, 0, /*keepdim=*/true);
    return tape.div(total, tape.leaf(TensorT<T>::scalar(static_cast<T>(kept))));
}

// Full Eq-style pipeline: tokenize (task prefix for queries), encode, pool,
// project to the output dimension. Returns a [1 x output_dim] row.
template <typename T>
Val embed_graph(Tape<T>& tape, const ParamVals& pv, const EncoderConfig& cfg,
                const std::string& text, const std::optional<std::string>& task) {
    const std::string composed = task ? compose_query(*task, text) : text;
    TokenSequence seq = tokenize(composed, cfg);
    Val tokens = encode_tokens_graph(tape, pv, cfg, seq);
    Val pooled = mean_pool_graph(tape, tokens, seq.mask);
    return tape.matmul(pooled, pv.at("proj"));
}

// ---- value-level API ----

struct Embedding {
    Tensor vector;  // shape [output_dim]
};

inline Tensor encode_tokens(const TokenSequence& seq, const Params& params,
                            const EncoderConfig& cfg) {
    Tape<float> tape;
    auto pv = leaf_params(tape, params);
    return tape.value(encode_tokens_graph(tape, pv, cfg, seq));
}

// Value-level pooling accumulates in 64-bit, so uniform rows pool to the row
// bit-exactly (the sum of n equal floats is exact in double and the true
// quotient is representable).
inline Tensor mean_pool(const Tensor& token_embeds, const std::vector<std::uint8_t>& mask) {
    if (token_embeds.rank() != 2) throw DimensionError("mean_pool expects [len x dim] input");
    if (static_cast<std::int64_t>(mask.size()) != token_embeds.dim(0))
        throw DimensionError("mean_pool: mask length does not match rows");
    std::int64_t kept = 0;
    for (auto m : mask) kept += (m != 0);
    if (kept == 0) throw EmptyInputError("mean_pool: all rows masked");
    std::int64_t dim = token_embeds.dim(1);
    Tensor out({dim});
    for (std::int64_t j = 0; j < dim; ++j) {
        double acc = 0;
        for (std::int64_t i = 0; i < token_embeds.dim(0); ++i)
            if (mask[static_cast<std::size_t>(i)]) acc += token_embeds.at(i, j);
        out[j] = static_cast<float>(acc / static_cast<double>(kept));
    }
    return out;
}

inline Embedding embed(const std::string& text, const std::optional<std::string>& task,
                       const Params& params, const EncoderConfig& cfg) {
    Tape<float> tape;
    auto pv = leaf_params(tape, params);
    Tensor row = tape.value(embed_graph(tape, pv, cfg, text, task));
    return Embedding{Tensor({row.numel()}, {row.data().begin(), row.data().end()})};
}

// First `dim` coordinates, no renormalization (cosine normalizes internally).
inline Embedding truncate_embedding(const Embedding& e, std::int64_t dim,
                                    const EncoderConfig& cfg) {
    bool legal = false;
    for (auto d : cfg.mrl_dims) legal |= (d == dim);
    if (!legal)
        throw ContractError("truncate_embedding: dim " + std::to_string(dim) +
                            " is not a configured mrl dim");
    std::vector<float> prefix(e.vector.data().begin(), e.vector.data().begin() + dim);
    return Embedding{Tensor({dim}, std::move(prefix))};
}

// Read-only inference wrapper; safe to share across threads.
class Embedder {
public:
    Embedder(EncoderConfig cfg, Params params) : cfg_(std::move(cfg)), params_(std::move(params)) {
        cfg_.validate();
    }

    const EncoderConfig& config() const { return cfg_; }
    const Params& params() const { return params_; }

    Embedding embed(const std::string& text, const std::optional<std::string>& task = {}) const {
        return embedkit::embed(text, task, params_, cfg_);
    }

    // Batched variant: one tape (one parameter copy) per chunk.
    std::vector<Embedding> embed_batch(std::span<const std::string> texts,
                                       const std::optional<std::string>& task = {},
                                       int threads = 1) const {
        std::vector<Embedding> out(texts.size());
        constexpr std::size_t kChunk = 32;
        std::size_t chunks = (texts.size() + kChunk - 1) / kChunk;
        parallel_for(chunks, threads, [&](std::size_t c) {
            std::size_t lo = c * kChunk, hi = std::min(texts.size(), lo + kChunk);
            Tape<float> tape;
            auto pv = leaf_params(tape, params_);
            for (std::size_t i = lo; i < hi; ++i) {
                Tensor row = tape.value(embed_graph(tape, pv, cfg_, texts[i], task));
                out[i] = Embedding{Tensor({row.numel()}, {row.data().begin(), row.data().end()})};
            }
        });
        return out;
    }

private:
    EncoderConfig cfg_;
    Params params_;
};

}  // namespace embedkit
