#pragma once

#include <cmath>
#include <cstdio>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "embedkit/checkpoint.hpp"
#include "embedkit/datapipe.hpp"
#include "embedkit/encoder.hpp"
#include "embedkit/objective.hpp"

namespace embedkit {

struct TrainConfig {
    Stage stage = Stage::prefinetune;
    std::int64_t steps = 2000;
    std::int64_t batch_size = 64;
    float learning_rate = 2e-3f;
    std::int64_t warmup_steps = 100;
    std::uint64_t seed = 0;
    LossConfig loss;
    std::int64_t eval_every = 0;  // 0 = no progress reports

    void validate() const {
        if (steps < 1) throw ConfigError("steps must be positive");
        if (batch_size < 1) throw ConfigError("batch_size must be positive");
        if (!(learning_rate >= 0.0f)) throw ConfigError("learning_rate must be nonnegative");
        if (warmup_steps < 0 || warmup_steps > steps)
            throw ConfigError("warmup_steps must lie in [0, steps]");
        loss.validate();
    }
};

// Desk-scale defaults preserving the large-batch/long prefinetune vs
// small-batch/short finetune asymmetry.
inline TrainConfig default_train_config(Stage stage) {
    TrainConfig cfg;
    cfg.stage = stage;
    if (stage == Stage::prefinetune) {
        cfg.steps = 2000;
        cfg.batch_size = 64;
    } else {
        cfg.steps = 500;
        cfg.batch_size = 16;
        cfg.learning_rate = 1e-3f;
        cfg.warmup_steps = 50;
        cfg.loss.use_hard_negatives = true;
    }
    return cfg;
}

inline std::uint64_t train_config_fingerprint(const TrainConfig& cfg) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "stage=%s;steps=%lld;batch=%lld;lr=%a;warmup=%lld;seed=%llu;tau=%a;hn=%d;every=%lld",
                  stage_name(cfg.stage).c_str(), static_cast<long long>(cfg.steps),
                  static_cast<long long>(cfg.batch_size), static_cast<double>(cfg.learning_rate),
                  static_cast<long long>(cfg.warmup_steps),
                  static_cast<unsigned long long>(cfg.seed),
                  static_cast<double>(cfg.loss.temperature), cfg.loss.use_hard_negatives ? 1 : 0,
                  static_cast<long long>(cfg.eval_every));
    std::string s(buf);
    for (auto d : cfg.loss.mrl_dims) s += ";" + std::to_string(d);
    return fnv1a64(s);
}

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<std::pair<std::int64_t, float>> loss_history;
    std::int64_t hard_negative_rows = 0;  // instrumented: rows whose negative entered a loss
};

inline std::string format_loss_history(const std::vector<std::pair<std::int64_t, float>>& hist) {
    std::string out;
    char line[64];
    for (const auto& [step, loss] : hist) {
        std::snprintf(line, sizeof(line), "%lld %.8g\n", static_cast<long long>(step),
                      static_cast<double>(loss));
        out += line;
    }
    return out;
}

namespace detail {

// Adam with bias correction; per-element math in double, storage in float.
struct AdamState {
    std::map<std::string, Tensor> m, v;

    explicit AdamState(const Params& params) {
        for (const auto& [name, t] : params) {
            m.emplace(name, Tensor(t.shape()));
            v.emplace(name, Tensor(t.shape()));
        }
    }

    void step(Params& params, const std::map<std::string, Tensor>& grads, double lr,
              std::int64_t t) {
        constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
        double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t));
        double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t));
        for (auto& [name, p] : params) {
            const Tensor& g = grads.at(name);
            Tensor& mm = m.at(name);
            Tensor& vv = v.at(name);
            for (std::int64_t i = 0; i < p.numel(); ++i) {
                double gi = g[i];
                double mi = kBeta1 * mm[i] + (1.0 - kBeta1) * gi;
                double vi = kBeta2 * vv[i] + (1.0 - kBeta2) * gi * gi;
                mm[i] = static_cast<float>(mi);
                vv[i] = static_cast<float>(vi);
                double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + kEps);
                p[i] -= static_cast<float>(update);
            }
        }
    }
};

}  // namespace detail

// One optimizer run of the requested stage. Prefinetuning trains on pairs
// only (hard negatives are never read); finetuning starts from a prior
// checkpoint and consumes triples when the loss asks for them.
inline TrainResult train(const std::optional<Checkpoint>& init, const TrainConfig& cfg,
                         const EncoderConfig& fresh_encoder, const StageData& data,
                         WarningSink warn = stderr_warnings()) {
    cfg.validate();
    if (cfg.stage == Stage::finetune && !init)
        throw ConfigError("finetune stage requires an initial checkpoint");
    EncoderConfig enc = init ? init->encoder : fresh_encoder;
    enc.validate();

    LossConfig loss_cfg = cfg.loss;
    if (loss_cfg.mrl_dims.empty()) loss_cfg.mrl_dims = enc.mrl_dims;
    if (cfg.stage == Stage::prefinetune) loss_cfg.use_hard_negatives = false;

    Params params = init ? init->params : init_encoder_params(enc, cfg.seed);
    detail::AdamState adam(params);

    std::optional<PrefinetuneSampler> pre;
    std::optional<FinetuneSampler> fine;
    std::function<BatchDraw()> draw;
    if (cfg.stage == Stage::prefinetune) {
        pre.emplace(data, cfg.batch_size, cfg.seed, warn);
        draw = [&] { return pre->next(); };
    } else {
        fine.emplace(data, cfg.batch_size, cfg.seed, warn);
        draw = [&] { return fine->next(); };
    }

    TrainResult result;
    result.loss_history.reserve(static_cast<std::size_t>(cfg.steps));

    for (std::int64_t step = 0; step < cfg.steps; ++step) {
        BatchDraw batch = draw();
        bool use_negatives = loss_cfg.use_hard_negatives;
        if (use_negatives)
            for (const auto& ex : batch.examples)
                if (!ex.hard_negative) {
                    use_negatives = false;  // batch invariant: negatives all-or-none
                    break;
                }

        Tape<float> tape;
        auto pv = register_params(tape, params);
        std::vector<Val> q_rows, p_rows, n_rows;
        std::vector<std::string> q_texts, p_texts;
        for (const auto& ex : batch.examples) {
            q_rows.push_back(embed_graph(tape, pv, enc, ex.query, ex.task));
            p_rows.push_back(embed_graph(tape, pv, enc, ex.positive, std::nullopt));
            if (use_negatives)
                n_rows.push_back(embed_graph(tape, pv, enc, *ex.hard_negative, std::nullopt));
            q_texts.push_back(ex.query);
            p_texts.push_back(ex.positive);
        }
        if (use_negatives) result.hard_negative_rows += static_cast<std::int64_t>(n_rows.size());

        Val queries = tape.stack_rows(q_rows);
        Val positives = tape.stack_rows(p_rows);
        std::optional<Val> negatives;
        if (use_negatives) negatives = tape.stack_rows(n_rows);
        Tensor mask = build_mask(q_texts, p_texts);
        Val loss = mrl_loss_graph(tape, queries, positives, negatives, mask,
                                  loss_cfg.temperature, loss_cfg.mrl_dims);

        float loss_value = tape.value(loss).item();
        if (!std::isfinite(loss_value))
            throw TrainingAbort("non-finite loss at step " + std::to_string(step) + " (batch " +
                                batch.source_summary() + ")");
        auto grads = tape.grad(loss);

        double lr = cfg.learning_rate;
        if (cfg.warmup_steps > 0)
            lr *= std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps));
        adam.step(params, grads, lr, step + 1);

        result.loss_history.emplace_back(step, loss_value);
        if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0)
            warn("step " + std::to_string(step + 1) + " loss " + std::to_string(loss_value));
    }

    Checkpoint out;
    out.encoder = enc;
    out.params = std::move(params);
    out.origin = cfg.stage == Stage::prefinetune ? CkptOrigin::prefinetune : CkptOrigin::finetune;
    out.hard_negatives_used = result.hard_negative_rows > 0;
    out.config_fingerprint = train_config_fingerprint(cfg);
    out.step_count = (init ? init->step_count : 0) + static_cast<std::uint64_t>(cfg.steps);
    result.checkpoint = std::move(out);
    return result;
}

inline TrainResult train_from_manifest(const std::optional<Checkpoint>& init,
                                       const TrainConfig& cfg, const EncoderConfig& fresh_encoder,
                                       const DatasetManifest& manifest,
                                       WarningSink warn = stderr_warnings()) {
    StageData data = load_stage_data(manifest, cfg.stage);
    return train(init, cfg, fresh_encoder, data, warn);
}

// ---- grid search ----

struct GridAxis {
    std::string key;
    std::vector<std::string> values;
};

struct GridCell {
    std::map<std::string, std::string> assignment;
    std::optional<TrainResult> result;
    double score = 0.0;
    std::string error;  // non-empty if the cell failed
};

namespace detail {

inline double parse_numeric(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("grid axis " + key + ": cannot parse numeric value '" + value + "'");
    }
}

inline void apply_override(TrainConfig& cfg, DatasetManifest& manifest, const std::string& key,
                           const std::string& value) {
    if (key == "steps") {
        cfg.steps = static_cast<std::int64_t>(parse_numeric(key, value));
    } else if (key == "batch_size") {
        cfg.batch_size = static_cast<std::int64_t>(parse_numeric(key, value));
    } else if (key == "learning_rate") {
        cfg.learning_rate = static_cast<float>(parse_numeric(key, value));
    } else if (key == "warmup_steps") {
        cfg.warmup_steps = static_cast<std::int64_t>(parse_numeric(key, value));
    } else if (key == "seed") {
        cfg.seed = static_cast<std::uint64_t>(parse_numeric(key, value));
    } else if (key == "eval_every") {
        cfg.eval_every = static_cast<std::int64_t>(parse_numeric(key, value));
    } else if (key == "loss.temperature") {
        cfg.loss.temperature = static_cast<float>(parse_numeric(key, value));
    } else if (key == "loss.use_hard_negatives") {
        cfg.loss.use_hard_negatives = value == "true" || value == "1";
    } else if (key.rfind("mixture.", 0) == 0) {
        std::string id = key.substr(8);
        bool found = false;
        for (auto& d : manifest.datasets)
            if (d.dataset_id == id) {
                d.mixture_weight = parse_numeric(key, value);
                found = true;
            }
        if (!found) throw ConfigError("grid axis " + key + ": no dataset named " + id);
    } else {
        throw ConfigError("unknown grid axis key: " + key);
    }
}

}  // namespace detail

// Cartesian product over the axes (first axis slowest), one training run per
// cell. A failed cell is reported in place, not fatal. The score is the
// supplied evaluator, or the negated mean of the last few losses when absent.
inline std::vector<GridCell> grid_search(
    const TrainConfig& base, const EncoderConfig& encoder, const std::vector<GridAxis>& axes,
    const DatasetManifest& manifest,
    const std::function<double(const Checkpoint&)>& evaluate = {},
    const std::optional<Checkpoint>& init = {}, WarningSink warn = stderr_warnings()) {
    if (axes.empty()) throw ConfigError("grid_search requires at least one axis");
    for (const auto& axis : axes)
        if (axis.values.empty()) throw ConfigError("grid axis " + axis.key + " has no values");

    std::size_t cells = 1;
    for (const auto& axis : axes) cells *= axis.values.size();
    std::vector<GridCell> out;
    out.reserve(cells);

    std::vector<std::size_t> odo(axes.size(), 0);
    for (std::size_t c = 0; c < cells; ++c) {
        GridCell cell;
        for (std::size_t a = 0; a < axes.size(); ++a)
            cell.assignment[axes[a].key] = axes[a].values[odo[a]];
        try {
            TrainConfig cfg = base;
            DatasetManifest mf = manifest;
            for (const auto& [key, value] : cell.assignment)
                detail::apply_override(cfg, mf, key, value);
            TrainResult r = train_from_manifest(init, cfg, encoder, mf, warn);
            if (evaluate) {
                cell.score = evaluate(r.checkpoint);
            } else {
                std::size_t n = std::min<std::size_t>(10, r.loss_history.size());
                double acc = 0;
                for (std::size_t i = r.loss_history.size() - n; i < r.loss_history.size(); ++i)
                    acc += r.loss_history[i].second;
                cell.score = -acc / static_cast<double>(n);
            }
            cell.result = std::move(r);
        } catch (const std::exception& e) {
            cell.error = e.what();
            warn("grid cell failed: " + cell.error);
        }
        out.push_back(std::move(cell));
        for (std::size_t a = axes.size(); a-- > 0;) {
            if (++odo[a] < axes[a].values.size()) break;
            odo[a] = 0;
        }
    }
    return out;
}

}  // namespace embedkit
