#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "embedkit/tape.hpp"
#include "embedkit/tensor.hpp"

namespace embedkit {

struct LossConfig {
    float temperature = 0.05f;
    std::vector<std::int64_t> mrl_dims;  // empty = single loss at full dimension
    bool use_hard_negatives = false;

    void validate() const {
        if (!(temperature > 0.0f)) throw ConfigError("temperature must be positive");
        for (std::size_t i = 0; i + 1 < mrl_dims.size(); ++i)
            if (mrl_dims[i] >= mrl_dims[i + 1])
                throw ConfigError("mrl_dims must be strictly ascending");
    }
};

// One contrastive batch: row i pairs query i with positive i (and optionally
// a hard negative). Texts are kept for duplicate masking.
struct Batch {
    Tensor queries;                         // [B x d]
    Tensor positives;                       // [B x d]
    std::optional<Tensor> hard_negatives;   // [B x d]
    std::vector<std::string> query_texts;
    std::vector<std::string> positive_texts;

    std::int64_t size() const { return queries.rank() == 2 ? queries.dim(0) : 0; }

    void validate() const {
        if (queries.rank() != 2 || positives.rank() != 2)
            throw DimensionError("batch embeddings must be [B x d]");
        if (queries.dim(0) < 1) throw EmptyInputError("batch must have at least one row");
        if (!queries.same_shape(positives))
            throw DimensionError("query/positive shape mismatch: " + shape_string(queries.shape()) +
                                 " vs " + shape_string(positives.shape()));
        if (hard_negatives && !hard_negatives->same_shape(queries))
            throw DimensionError("hard-negative shape mismatch");
        if (static_cast<std::int64_t>(query_texts.size()) != queries.dim(0) ||
            static_cast<std::int64_t>(positive_texts.size()) != queries.dim(0))
            throw DimensionError("batch texts must match row count");
    }
};

namespace detail {

template <typename TA, typename TB>
double cosine_double(const TensorT<TA>& x, const TensorT<TB>& y) {
    double dot = 0, nx = 0, ny = 0;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        double a = static_cast<double>(x[i]);
        double b = static_cast<double>(y[i]);
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    if (nx == 0.0 || ny == 0.0) throw DegenerateInputError("cosine similarity of a zero vector");
    return dot / (std::sqrt(nx) * std::sqrt(ny));
}

}  // namespace detail

inline float cosine_sim(const Tensor& x, const Tensor& y) {
    if (x.numel() != y.numel() || x.numel() == 0)
        throw DimensionError("cosine_sim shape mismatch: " + shape_string(x.shape()) + " vs " +
                             shape_string(y.shape()));
    return static_cast<float>(detail::cosine_double(x, y));
}

// Duplicate mask: (i,j) = 0 iff i != j and (q_i == q_j or p_i == p_j). The
// diagonal stays 1 so each row keeps its own positive in the denominator.
inline Tensor build_mask(const std::vector<std::string>& query_texts,
                         const std::vector<std::string>& positive_texts) {
    if (query_texts.size() != positive_texts.size())
        throw ContractError("build_mask: query/positive counts differ");
    std::int64_t b = static_cast<std::int64_t>(query_texts.size());
    Tensor mask = Tensor::full({b, b}, 1.0f);
    for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t j = 0; j < b; ++j)
            if (i != j && (query_texts[static_cast<std::size_t>(i)] ==
                               query_texts[static_cast<std::size_t>(j)] ||
                           positive_texts[static_cast<std::size_t>(i)] ==
                               positive_texts[static_cast<std::size_t>(j)]))
                mask.at(i, j) = 0.0f;
    return mask;
}

namespace detail {

// Rows scaled to unit L2 norm (graph form).
template <typename T>
Val normalize_rows(Tape<T>& tape, Val x) {
    return tape.div(x, tape.l2_norm(x, 1, /*keepdim=*/true));
}

}  // namespace detail

// Per-row in-batch NCE losses (graph form), shape [B]. Denominator holds the
// masked in-batch positives plus, when given, the row's own hard negative;
// same-tower (query-query) terms never appear. Masked logits get -1e9 added,
// which underflows to an exact zero after the softmax.
template <typename T>
Val nce_row_losses_graph(Tape<T>& tape, Val queries, Val positives, std::optional<Val> negatives,
                         const Tensor& mask01, double temperature) {
    const auto& qv = tape.value(queries);
    if (qv.rank() != 2) throw DimensionError("nce loss expects [B x d] queries");
    std::int64_t b = qv.dim(0);
    if (mask01.rank() != 2 || mask01.dim(0) != b || mask01.dim(1) != b)
        throw DimensionError("mask must be [B x B]");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");

    Val qn = detail::normalize_rows(tape, queries);
    Val pn = detail::normalize_rows(tape, positives);
    Val inv_tau = tape.leaf(TensorT<T>::scalar(T(1) / static_cast<T>(temperature)));
    Val logits = tape.mul(tape.matmul(qn, tape.transpose(pn)), inv_tau);

    TensorT<T> mask_bias({b, b});
    bool any_masked = false;
    for (std::int64_t i = 0; i < b * b; ++i) {
        if (mask01[i] == 0.0f) {
            mask_bias[i] = T(-1e9);
            any_masked = true;
        }
    }
    if (any_masked) logits = tape.add(logits, tape.leaf(std::move(mask_bias)));

    std::int64_t cols = b;
    if (negatives) {
        Val nn = detail::normalize_rows(tape, *negatives);
        Val row_dots = tape.sum(tape.mul(qn, nn), 1, /*keepdim=*/true);  // [B x 1]
        logits = tape.concat(logits, tape.mul(row_dots, inv_tau), 1);
        cols = b + 1;
    }

    Val probs = tape.softmax(logits);
    TensorT<T> pick({b, cols});
    for (std::int64_t i = 0; i < b; ++i) pick.at(i, i) = T(1);
    Val own = tape.sum(tape.mul(probs, tape.leaf(std::move(pick))), 1, /*keepdim=*/false);  // [B]
    return tape.mul(tape.log(own), tape.leaf(TensorT<T>::scalar(T(-1))));
}

template <typename T>
Val nce_loss_graph(Tape<T>& tape, Val queries, Val positives, std::optional<Val> negatives,
                   const Tensor& mask01, double temperature) {
    Val rows = nce_row_losses_graph(tape, queries, positives, negatives, mask01, temperature);
    return tape.mean(rows, 0, /*keepdim=*/false);
}

// Unweighted mean of the NCE loss over prefix-truncated embeddings, one term
// per requested sub-dimension. dims = {d} reduces to the plain loss exactly.
template <typename T>
Val mrl_loss_graph(Tape<T>& tape, Val queries, Val positives, std::optional<Val> negatives,
                   const Tensor& mask01, double temperature,
                   const std::vector<std::int64_t>& mrl_dims) {
    std::int64_t full = tape.value(queries).dim(1);
    std::vector<std::int64_t> dims = mrl_dims.empty() ? std::vector<std::int64_t>{full} : mrl_dims;
    std::optional<Val> total;
    for (std::int64_t dim : dims) {
        if (dim < 1 || dim > full)
            throw ContractError("mrl dim " + std::to_string(dim) + " out of range for width " +
                                std::to_string(full));
        Val q = dim == full ? queries : tape.slice(queries, 1, 0, dim);
        Val p = dim == full ? positives : tape.slice(positives, 1, 0, dim);
        std::optional<Val> n;
        if (negatives) n = dim == full ? *negatives : tape.slice(*negatives, 1, 0, dim);
        Val loss = nce_loss_graph(tape, q, p, n, mask01, temperature);
        total = total ? tape.add(*total, loss) : loss;
    }
    Val inv_k = tape.leaf(TensorT<T>::scalar(T(1) / static_cast<T>(dims.size())));
    return tape.mul(*total, inv_k);
}

namespace detail {

inline std::optional<Val> batch_negatives(Tape<float>& tape, const Batch& batch,
                                          const LossConfig& cfg) {
    if (cfg.use_hard_negatives) {
        if (!batch.hard_negatives)
            throw ContractError("loss configured with hard negatives but batch has none");
        return tape.leaf(*batch.hard_negatives);
    }
    return std::nullopt;  // negatives present but unused are ignored
}

}  // namespace detail

inline Tensor nce_loss(const Batch& batch, const LossConfig& cfg) {
    batch.validate();
    cfg.validate();
    Tape<float> tape;
    Val q = tape.leaf(batch.queries);
    Val p = tape.leaf(batch.positives);
    auto n = detail::batch_negatives(tape, batch, cfg);
    Tensor mask = build_mask(batch.query_texts, batch.positive_texts);
    return tape.value(nce_loss_graph(tape, q, p, n, mask, cfg.temperature));
}

inline Tensor mrl_loss(const Batch& batch, const LossConfig& cfg) {
    batch.validate();
    cfg.validate();
    Tape<float> tape;
    Val q = tape.leaf(batch.queries);
    Val p = tape.leaf(batch.positives);
    auto n = detail::batch_negatives(tape, batch, cfg);
    Tensor mask = build_mask(batch.query_texts, batch.positive_texts);
    return tape.value(mrl_loss_graph(tape, q, p, n, mask, cfg.temperature, cfg.mrl_dims));
}

// Per-row losses at full dimension; exposed for tests that need to isolate a
// single row's contribution.
inline Tensor nce_row_losses(const Batch& batch, const LossConfig& cfg) {
    batch.validate();
    cfg.validate();
    Tape<float> tape;
    Val q = tape.leaf(batch.queries);
    Val p = tape.leaf(batch.positives);
    auto n = detail::batch_negatives(tape, batch, cfg);
    Tensor mask = build_mask(batch.query_texts, batch.positive_texts);
    return tape.value(nce_row_losses_graph(tape, q, p, n, mask, cfg.temperature));
}

}  // namespace embedkit
