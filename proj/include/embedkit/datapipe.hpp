#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "embedkit/error.hpp"
#include "embedkit/io_util.hpp"
#include "embedkit/rng.hpp"

namespace embedkit {

using json = nlohmann::json;

struct TrainingExample {
    std::string task;
    std::string query;
    std::string positive;
    std::optional<std::string> hard_negative;
    std::string dataset_id;

    bool operator==(const TrainingExample&) const = default;
};

enum class Stage { prefinetune, finetune };

inline std::string stage_name(Stage s) {
    return s == Stage::prefinetune ? "prefinetune" : "finetune";
}

inline Stage parse_stage(const std::string& s) {
    if (s == "prefinetune") return Stage::prefinetune;
    if (s == "finetune") return Stage::finetune;
    throw ConfigError("unknown stage: " + s + " (expected prefinetune|finetune)");
}

struct DatasetEntry {
    std::string dataset_id;
    std::string path;
    Stage stage = Stage::prefinetune;
    double mixture_weight = 1.0;
};

struct DatasetManifest {
    std::vector<DatasetEntry> datasets;

    void validate() const {
        double pre = 0, fine = 0;
        bool has_pre = false, has_fine = false;
        std::map<std::string, int> seen;
        for (const auto& d : datasets) {
            if (d.dataset_id.empty()) throw ConfigError("manifest: empty dataset_id");
            if (++seen[d.dataset_id] > 1)
                throw ConfigError("manifest: duplicate dataset_id " + d.dataset_id);
            if (d.mixture_weight < 0)
                throw ConfigError("manifest: negative mixture_weight for " + d.dataset_id);
            if (d.stage == Stage::prefinetune) {
                pre += d.mixture_weight;
                has_pre = true;
            } else {
                fine += d.mixture_weight;
                has_fine = true;
            }
        }
        if (has_pre && !(pre > 0)) throw ConfigError("manifest: prefinetune weights sum to zero");
        if (has_fine && !(fine > 0)) throw ConfigError("manifest: finetune weights sum to zero");
    }

    static DatasetManifest parse(const json& j) {
        DatasetManifest m;
        if (!j.contains("datasets") || !j["datasets"].is_array())
            throw ConfigError("manifest: missing 'datasets' array");
        for (const auto& e : j["datasets"]) {
            DatasetEntry d;
            d.dataset_id = e.value("dataset_id", "");
            d.path = e.value("path", "");
            if (d.path.empty()) throw ConfigError("manifest: dataset " + d.dataset_id + " has no path");
            d.stage = parse_stage(e.value("stage", ""));
            d.mixture_weight = e.value("mixture_weight", 1.0);
            m.datasets.push_back(std::move(d));
        }
        m.validate();
        return m;
    }

    static DatasetManifest load(const std::string& path) {
        json j;
        try {
            j = json::parse(read_file(path));
        } catch (const json::exception& e) {
            throw ParseError("manifest " + path + ": " + e.what());
        }
        return parse(j);
    }
};

namespace detail {

inline std::string require_string(const json& j, const char* field, const std::string& where) {
    if (!j.contains(field))
        throw SchemaError(where + ": missing required field '" + std::string(field) + "'");
    if (!j[field].is_string())
        throw SchemaError(where + ": field '" + std::string(field) + "' must be a string");
    return j[field].get<std::string>();
}

}  // namespace detail

// One JSON object per line: task, query, positive, optional hard_negative.
// Records violating the example invariants are rejected with their line number.
inline std::vector<TrainingExample> load_dataset(const std::string& path,
                                                 const std::string& dataset_id) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset: " + path);
    std::vector<TrainingExample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::string where = path + ": line " + std::to_string(lineno);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError(where + ": " + e.what());
        }
        TrainingExample ex;
        ex.task = detail::require_string(j, "task", where);
        ex.query = detail::require_string(j, "query", where);
        ex.positive = detail::require_string(j, "positive", where);
        if (j.contains("hard_negative")) {
            if (!j["hard_negative"].is_string())
                throw SchemaError(where + ": field 'hard_negative' must be a string");
            ex.hard_negative = j["hard_negative"].get<std::string>();
        }
        if (ex.query.empty()) throw SchemaError(where + ": query must be non-empty");
        if (ex.positive.empty()) throw SchemaError(where + ": positive must be non-empty");
        if (ex.hard_negative) {
            if (ex.hard_negative->empty())
                throw SchemaError(where + ": hard_negative must be non-empty when present");
            if (*ex.hard_negative == ex.positive)
                throw SchemaError(where + ": hard_negative equals positive");
        }
        ex.dataset_id = dataset_id;
        out.push_back(std::move(ex));
    }
    return out;
}

inline void save_dataset(const std::string& path, const std::vector<TrainingExample>& examples) {
    std::ostringstream oss;
    for (const auto& ex : examples) {
        json j{{"task", ex.task}, {"query", ex.query}, {"positive", ex.positive}};
        if (ex.hard_negative) j["hard_negative"] = *ex.hard_negative;
        oss << j.dump() << "\n";
    }
    write_file_atomic(path, oss.str());
}

// All datasets of one stage, loaded and ready for sampling.
struct StageData {
    std::vector<std::string> ids;
    std::vector<double> weights;
    std::vector<std::vector<TrainingExample>> examples;

    std::size_t dataset_count() const { return ids.size(); }
};

inline StageData load_stage_data(const DatasetManifest& manifest, Stage stage) {
    manifest.validate();
    StageData data;
    for (const auto& d : manifest.datasets) {
        if (d.stage != stage) continue;
        auto ex = load_dataset(d.path, d.dataset_id);
        if (ex.empty()) throw ConfigError("dataset " + d.dataset_id + " is empty");
        data.ids.push_back(d.dataset_id);
        data.weights.push_back(d.mixture_weight);
        data.examples.push_back(std::move(ex));
    }
    return data;
}

struct BatchDraw {
    std::vector<TrainingExample> examples;
    std::vector<std::pair<std::string, std::size_t>> sources;  // (dataset_id, index)

    std::string source_summary() const {
        std::ostringstream oss;
        for (std::size_t i = 0; i < sources.size(); ++i) {
            if (i) oss << ", ";
            oss << sources[i].first << ":" << sources[i].second;
        }
        return oss.str();
    }
};

namespace detail {

inline void check_sampler_args(const StageData& data, std::int64_t batch_size) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (data.dataset_count() == 0) throw ConfigError("no datasets configured for this stage");
    double total = 0;
    for (double w : data.weights) total += w;
    if (!(total > 0)) throw ConfigError("mixture weights sum to zero");
}

}  // namespace detail

// Large-batch pair sampler: each example drawn independently across datasets
// by mixture weight. Hard negatives are stripped even when present.
class PrefinetuneSampler {
public:
    PrefinetuneSampler(const StageData& data, std::int64_t batch_size, std::uint64_t seed,
                       WarningSink warn = stderr_warnings())
        : data_(&data), batch_size_(batch_size), rng_(seed), warn_(std::move(warn)) {
        detail::check_sampler_args(data, batch_size);
    }

    BatchDraw next() {
        BatchDraw draw;
        draw.examples.reserve(static_cast<std::size_t>(batch_size_));
        for (std::int64_t i = 0; i < batch_size_; ++i) {
            std::size_t ds = rng_.categorical(data_->weights);
            std::size_t idx = static_cast<std::size_t>(rng_.uniform_int(data_->examples[ds].size()));
            TrainingExample ex = data_->examples[ds][idx];
            ex.hard_negative.reset();
            draw.examples.push_back(std::move(ex));
            draw.sources.emplace_back(data_->ids[ds], idx);
        }
        return draw;
    }

private:
    const StageData* data_;
    std::int64_t batch_size_;
    Rng rng_;
    WarningSink warn_;
};

// Small-batch triple sampler: every batch comes from exactly one dataset,
// chosen per batch by mixture weight; examples drawn with replacement.
class FinetuneSampler {
public:
    FinetuneSampler(const StageData& data, std::int64_t batch_size, std::uint64_t seed,
                    WarningSink warn = stderr_warnings())
        : data_(&data), batch_size_(batch_size), rng_(seed), warn_(std::move(warn)) {
        detail::check_sampler_args(data, batch_size);
        if (batch_size > 1024)
            warn_("finetune batch_size " + std::to_string(batch_size) +
                  " exceeds the recommended maximum of 1024");
        warned_small_.assign(data.dataset_count(), false);
    }

    BatchDraw next() {
        std::size_t ds = rng_.categorical(data_->weights);
        const auto& pool = data_->examples[ds];
        if (static_cast<std::int64_t>(pool.size()) < batch_size_ && !warned_small_[ds]) {
            warn_("dataset " + data_->ids[ds] + " has " + std::to_string(pool.size()) +
                  " examples, fewer than batch_size " + std::to_string(batch_size_) +
                  "; sampling with replacement");
            warned_small_[ds] = true;
        }
        BatchDraw draw;
        draw.examples.reserve(static_cast<std::size_t>(batch_size_));
        for (std::int64_t i = 0; i < batch_size_; ++i) {
            std::size_t idx = static_cast<std::size_t>(rng_.uniform_int(pool.size()));
            draw.examples.push_back(pool[idx]);
            draw.sources.emplace_back(data_->ids[ds], idx);
        }
        return draw;
    }

private:
    const StageData* data_;
    std::int64_t batch_size_;
    Rng rng_;
    WarningSink warn_;
    std::vector<bool> warned_small_;
};

}  // namespace embedkit
