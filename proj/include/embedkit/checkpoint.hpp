#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "embedkit/encoder.hpp"
#include "embedkit/io_util.hpp"
#include "embedkit/tensor.hpp"

namespace embedkit {

enum class CkptOrigin : std::uint8_t { prefinetune = 0, finetune = 1, soup = 2 };

inline std::string origin_name(CkptOrigin o) {
    switch (o) {
        case CkptOrigin::prefinetune: return "prefinetune";
        case CkptOrigin::finetune: return "finetune";
        case CkptOrigin::soup: return "soup";
    }
    return "?";
}

// Serialized model snapshot: named parameters plus the encoder config they
// belong to. Loading one reproduces identical embeddings for identical inputs.
struct Checkpoint {
    EncoderConfig encoder;
    std::map<std::string, Tensor> params;  // sorted name order is the pinned record order
    CkptOrigin origin = CkptOrigin::prefinetune;
    bool hard_negatives_used = false;
    std::uint64_t config_fingerprint = 0;
    std::uint64_t step_count = 0;
};

inline Embedder embedder_from(const Checkpoint& c) { return Embedder(c.encoder, c.params); }

namespace detail {

constexpr char kCkptMagic[9] = "EMBKCKPT";  // 8 bytes on disk
constexpr std::uint32_t kCkptVersion = 1;

}  // namespace detail

// Hash over the parameter records only (name, shape, payload); metadata such
// as origin or fingerprint does not participate.
inline std::uint64_t checkpoint_param_hash(const Checkpoint& c) {
    std::string buf;
    for (const auto& [name, t] : c.params) {
        put_u32le(buf, static_cast<std::uint32_t>(name.size()));
        buf += name;
        put_u32le(buf, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) put_u64le(buf, static_cast<std::uint64_t>(d));
        for (float v : t.data()) put_f32le(buf, v);
    }
    return fnv1a64(buf);
}

// Binary layout (all integers little-endian): magic, version, origin byte,
// hard-negative byte, config fingerprint, step count, encoder config block,
// then per-parameter records in sorted name order.
inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
    std::string buf;
    buf.append(detail::kCkptMagic, 8);
    put_u32le(buf, detail::kCkptVersion);
    put_u8(buf, static_cast<std::uint8_t>(c.origin));
    put_u8(buf, c.hard_negatives_used ? 1 : 0);
    put_u64le(buf, c.config_fingerprint);
    put_u64le(buf, c.step_count);

    const EncoderConfig& e = c.encoder;
    put_u64le(buf, static_cast<std::uint64_t>(e.vocab_buckets));
    put_u64le(buf, static_cast<std::uint64_t>(e.max_seq_len));
    put_u64le(buf, static_cast<std::uint64_t>(e.model_dim));
    put_u64le(buf, static_cast<std::uint64_t>(e.num_layers));
    put_u64le(buf, static_cast<std::uint64_t>(e.num_heads));
    put_u64le(buf, static_cast<std::uint64_t>(e.ff_dim));
    put_u64le(buf, static_cast<std::uint64_t>(e.output_dim));
    put_u8(buf, e.use_positional ? 1 : 0);
    put_u32le(buf, static_cast<std::uint32_t>(e.mrl_dims.size()));
    for (auto d : e.mrl_dims) put_u64le(buf, static_cast<std::uint64_t>(d));

    put_u32le(buf, static_cast<std::uint32_t>(c.params.size()));
    for (const auto& [name, t] : c.params) {
        put_u32le(buf, static_cast<std::uint32_t>(name.size()));
        buf += name;
        put_u32le(buf, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) put_u64le(buf, static_cast<std::uint64_t>(d));
        for (float v : t.data()) put_f32le(buf, v);
    }
    write_file_atomic(path, buf);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::string buf = read_file(path);
    ByteReader r(buf, "checkpoint " + path);
    if (r.bytes(8) != std::string(detail::kCkptMagic, 8)) r.fail("bad magic bytes");
    std::uint32_t version = r.u32le();
    if (version != detail::kCkptVersion)
        r.fail("unsupported format version " + std::to_string(version));

    Checkpoint c;
    std::uint8_t origin = r.u8();
    if (origin > 2) r.fail("invalid origin byte " + std::to_string(origin));
    c.origin = static_cast<CkptOrigin>(origin);
    c.hard_negatives_used = r.u8() != 0;
    c.config_fingerprint = r.u64le();
    c.step_count = r.u64le();

    EncoderConfig& e = c.encoder;
    e.vocab_buckets = static_cast<std::int64_t>(r.u64le());
    e.max_seq_len = static_cast<std::int64_t>(r.u64le());
    e.model_dim = static_cast<std::int64_t>(r.u64le());
    e.num_layers = static_cast<std::int64_t>(r.u64le());
    e.num_heads = static_cast<std::int64_t>(r.u64le());
    e.ff_dim = static_cast<std::int64_t>(r.u64le());
    e.output_dim = static_cast<std::int64_t>(r.u64le());
    e.use_positional = r.u8() != 0;
    std::uint32_t n_mrl = r.u32le();
    if (n_mrl > 1024) r.fail("implausible mrl dim count " + std::to_string(n_mrl));
    e.mrl_dims.clear();
    for (std::uint32_t i = 0; i < n_mrl; ++i)
        e.mrl_dims.push_back(static_cast<std::int64_t>(r.u64le()));
    try {
        e.validate();
    } catch (const Error& err) {
        r.fail(std::string("invalid encoder config: ") + err.what());
    }

    std::uint32_t n_params = r.u32le();
    for (std::uint32_t i = 0; i < n_params; ++i) {
        std::uint32_t name_len = r.u32le();
        if (name_len > 4096) r.fail("implausible parameter name length");
        std::string name = r.bytes(name_len);
        std::uint32_t rank = r.u32le();
        if (rank > 8) r.fail("implausible parameter rank " + std::to_string(rank));
        Shape shape(rank);
        std::int64_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            shape[d] = static_cast<std::int64_t>(r.u64le());
            if (shape[d] < 1 || shape[d] > (1LL << 32)) r.fail("invalid dimension in " + name);
            numel *= shape[d];
        }
        std::vector<float> data(static_cast<std::size_t>(numel));
        for (auto& v : data) v = r.f32le();
        Tensor t(std::move(shape), std::move(data));
        if (!t.all_finite()) r.fail("non-finite payload in parameter " + name);
        c.params.emplace(std::move(name), std::move(t));
    }
    r.expect_end();

    auto expected = expected_param_shapes(c.encoder);
    for (const auto& [name, shape] : expected) {
        auto it = c.params.find(name);
        if (it == c.params.end()) r.fail("missing parameter " + name);
        if (it->second.shape() != shape)
            r.fail("parameter " + name + " has shape " + shape_string(it->second.shape()) +
                   ", expected " + shape_string(shape));
    }
    if (c.params.size() != expected.size()) r.fail("unexpected extra parameters");
    return c;
}

}  // namespace embedkit
