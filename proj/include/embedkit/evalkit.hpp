#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "embedkit/encoder.hpp"
#include "embedkit/miner.hpp"

namespace embedkit {

// ---- retrieval metrics ----

struct RankedList {
    std::vector<std::string> doc_ids;  // descending relevance order
};

using QrelMap = std::map<std::string, std::set<std::string>>;  // query id -> relevant doc ids

struct RetrievalMetrics {
    double mrr_at_10 = 0;
    double recall_at_k = 0;
    double ndcg_at_10 = 0;
    double recall_at_token_budget = 0;
    std::int64_t queries_scored = 0;
};

// Definition-level metrics over exact rankings. Queries without any relevant
// document are excluded with a warning. The token-budget recall counts
// relevant docs among retrieved passages until the cumulative token count
// reaches the budget (the passage crossing the budget is still included).
inline RetrievalMetrics retrieval_metrics(const std::map<std::string, RankedList>& rankings,
                                          const QrelMap& qrels, std::int64_t k,
                                          std::int64_t token_budget,
                                          const std::map<std::string, std::int64_t>& doc_tokens,
                                          WarningSink warn = stderr_warnings()) {
    if (k < 1) throw ContractError("retrieval_metrics: k must be >= 1");
    RetrievalMetrics out;
    double mrr = 0, recall = 0, ndcg = 0, budget_recall = 0;
    for (const auto& [qid, ranking] : rankings) {
        auto it = qrels.find(qid);
        if (it == qrels.end() || it->second.empty()) {
            warn("query " + qid + " has no relevant documents; excluded");
            continue;
        }
        const auto& rel = it->second;
        ++out.queries_scored;

        double rr = 0;
        for (std::size_t r = 0; r < std::min<std::size_t>(10, ranking.doc_ids.size()); ++r)
            if (rel.count(ranking.doc_ids[r])) {
                rr = 1.0 / static_cast<double>(r + 1);
                break;
            }
        mrr += rr;

        std::int64_t hits_k = 0;
        for (std::size_t r = 0; r < std::min<std::size_t>(static_cast<std::size_t>(k),
                                                          ranking.doc_ids.size());
             ++r)
            hits_k += rel.count(ranking.doc_ids[r]) ? 1 : 0;
        recall += static_cast<double>(hits_k) / static_cast<double>(rel.size());

        double dcg = 0;
        for (std::size_t r = 0; r < std::min<std::size_t>(10, ranking.doc_ids.size()); ++r)
            if (rel.count(ranking.doc_ids[r])) dcg += 1.0 / std::log2(static_cast<double>(r + 2));
        double idcg = 0;
        for (std::size_t r = 0; r < std::min<std::size_t>(10, rel.size()); ++r)
            idcg += 1.0 / std::log2(static_cast<double>(r + 2));
        ndcg += dcg / idcg;

        std::int64_t used = 0, budget_hits = 0;
        for (const auto& id : ranking.doc_ids) {
            if (used >= token_budget) break;
            auto dt = doc_tokens.find(id);
            if (dt == doc_tokens.end())
                throw IncompatibilityError("retrieval_metrics: no token count for doc " + id);
            used += dt->second;
            budget_hits += rel.count(id) ? 1 : 0;
        }
        budget_recall += static_cast<double>(budget_hits) / static_cast<double>(rel.size());
    }
    if (out.queries_scored == 0)
        throw EmptyInputError("retrieval_metrics: no query has a relevant document");
    double n = static_cast<double>(out.queries_scored);
    out.mrr_at_10 = mrr / n;
    out.recall_at_k = recall / n;
    out.ndcg_at_10 = ndcg / n;
    out.recall_at_token_budget = budget_recall / n;
    return out;
}

// ---- classification ----

using EmbedFn = std::function<Tensor(const std::string&)>;
using LabeledText = std::pair<std::string, std::int64_t>;

// kNN (cosine, k=5) majority vote with deterministic tie-break toward the
// lowest class id. A trained linear probe would need a second optimizer;
// nearest neighbors compare embedding spaces just as directly.
inline double classification_metric(const std::vector<LabeledText>& train,
                                    const std::vector<LabeledText>& test, const EmbedFn& embed,
                                    std::int64_t k = 5) {
    if (train.empty() || test.empty())
        throw EmptyInputError("classification_metric: empty split");
    std::set<std::int64_t> train_classes;
    for (const auto& [text, label] : train) train_classes.insert(label);
    if (train_classes.size() < 2)
        throw ConfigError("classification_metric: need at least 2 classes in train");
    for (const auto& [text, label] : test)
        if (!train_classes.count(label))
            throw ConfigError("classification_metric: class " + std::to_string(label) +
                              " absent from train split");

    std::vector<Tensor> train_vecs;
    train_vecs.reserve(train.size());
    for (const auto& [text, label] : train) train_vecs.push_back(embed(text));

    std::int64_t correct = 0;
    for (const auto& [text, label] : test) {
        Tensor q = embed(text);
        std::vector<std::pair<double, std::size_t>> sims;
        sims.reserve(train.size());
        for (std::size_t i = 0; i < train.size(); ++i)
            sims.emplace_back(detail::cosine_double(q, train_vecs[i]), i);
        std::stable_sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        std::map<std::int64_t, std::int64_t> votes;
        for (std::size_t i = 0; i < std::min<std::size_t>(static_cast<std::size_t>(k), sims.size()); ++i)
            ++votes[train[sims[i].second].second];
        auto best = votes.begin();
        for (auto it = votes.begin(); it != votes.end(); ++it)
            if (it->second > best->second) best = it;  // map order = lowest class id on ties
        correct += best->first == label ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

// ---- STS ----

// Average ranks (ties share the mean of the positions they span).
inline std::vector<double> average_ranks(const std::vector<double>& values) {
    std::vector<std::size_t> order(values.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(values.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
        double avg = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
        i = j + 1;
    }
    return ranks;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) throw DegenerateInputError("pearson: constant input");
    return sxy / std::sqrt(sxx * syy);
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw DimensionError("spearman: length mismatch");
    if (x.size() < 3) throw ContractError("spearman: need at least 3 observations");
    return pearson(average_ranks(x), average_ranks(y));
}

using ScoredPair = std::tuple<std::string, std::string, double>;

inline double sts_metric(const std::vector<ScoredPair>& pairs, const EmbedFn& embed) {
    if (pairs.size() < 3) throw ContractError("sts_metric: need at least 3 pairs");
    bool all_equal = true;
    for (const auto& [a, b, gold] : pairs) all_equal &= gold == std::get<2>(pairs.front());
    if (all_equal) throw DegenerateInputError("sts_metric: gold scores are constant");
    std::vector<double> sims, golds;
    sims.reserve(pairs.size());
    for (const auto& [a, b, gold] : pairs) {
        Tensor va = embed(a);
        Tensor vb = embed(b);
        sims.push_back(detail::cosine_double(va, vb));
        golds.push_back(gold);
    }
    return spearman(sims, golds);
}

// ---- aggregation ----

struct TaskScore {
    std::string task_id;
    std::string task_type;
    double value = 0;
};

struct ModelScores {
    std::string model;
    std::vector<TaskScore> scores;
};

struct EvalReport {
    std::vector<std::string> models;                       // input order
    std::vector<std::string> task_ids;                     // sorted
    std::map<std::string, std::string> task_types;         // task -> type
    std::map<std::string, std::map<std::string, double>> cells;  // model -> task -> value
    std::map<std::string, double> task_mean;
    std::map<std::string, std::map<std::string, double>> type_means;  // model -> type -> mean
    std::map<std::string, double> type_mean;
    std::map<std::string, double> borda_points;
    std::map<std::string, int> borda_rank;  // 1 = best; ties share a rank
};

// Task mean, per-type means, and Borda points: per task, models are ranked
// descending; position p earns (M - p) points, ties split the points they
// span. The leaderboard orders models by total points.
inline EvalReport aggregate(const std::vector<ModelScores>& inputs) {
    if (inputs.empty()) throw EmptyInputError("aggregate: no models");
    EvalReport rep;
    std::set<std::string> all_tasks;
    for (const auto& m : inputs) {
        rep.models.push_back(m.model);
        for (const auto& s : m.scores) {
            all_tasks.insert(s.task_id);
            rep.task_types[s.task_id] = s.task_type;
            rep.cells[m.model][s.task_id] = s.value;
        }
    }
    rep.task_ids.assign(all_tasks.begin(), all_tasks.end());

    std::vector<std::string> missing;
    for (const auto& m : inputs)
        for (const auto& t : rep.task_ids)
            if (!rep.cells[m.model].count(t)) missing.push_back(m.model + "/" + t);
    if (!missing.empty()) {
        std::string list;
        for (const auto& cell : missing) list += (list.empty() ? "" : ", ") + cell;
        throw IncompatibilityError("aggregate: missing cells: " + list);
    }

    for (const auto& m : inputs) {
        double acc = 0;
        std::map<std::string, std::pair<double, std::int64_t>> per_type;
        for (const auto& t : rep.task_ids) {
            double v = rep.cells[m.model][t];
            acc += v;
            auto& slot = per_type[rep.task_types[t]];
            slot.first += v;
            slot.second += 1;
        }
        rep.task_mean[m.model] = acc / static_cast<double>(rep.task_ids.size());
        double type_acc = 0;
        for (const auto& [type, sum_count] : per_type) {
            double mean = sum_count.first / static_cast<double>(sum_count.second);
            rep.type_means[m.model][type] = mean;
            type_acc += mean;
        }
        rep.type_mean[m.model] = type_acc / static_cast<double>(per_type.size());
    }

    std::size_t m_count = rep.models.size();
    for (const auto& model : rep.models) rep.borda_points[model] = 0.0;
    for (const auto& t : rep.task_ids) {
        std::vector<std::pair<double, std::string>> order;
        order.reserve(m_count);
        for (const auto& model : rep.models) order.emplace_back(rep.cells[model][t], model);
        std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        std::size_t i = 0;
        while (i < order.size()) {
            std::size_t j = i;
            while (j + 1 < order.size() && order[j + 1].first == order[i].first) ++j;
            // positions i+1 .. j+1 (1-based) share the mean of their points
            double pts = 0;
            for (std::size_t p = i + 1; p <= j + 1; ++p)
                pts += static_cast<double>(m_count) - static_cast<double>(p);
            pts /= static_cast<double>(j - i + 1);
            for (std::size_t q = i; q <= j; ++q) rep.borda_points[order[q].second] += pts;
            i = j + 1;
        }
    }
    for (const auto& model : rep.models) {
        int rank = 1;
        for (const auto& other : rep.models)
            if (rep.borda_points[other] > rep.borda_points[model]) ++rank;
        rep.borda_rank[model] = rank;
    }
    return rep;
}

// ---- eval task files ----

struct EvalTask {
    std::string task_id;
    std::string task_type;  // retrieval | classification | sts
    std::string metric;     // primary metric name
    std::optional<std::string> task_prompt;
    // retrieval
    std::vector<std::pair<std::string, std::string>> queries;  // (query_id, text)
    std::vector<std::pair<std::string, std::string>> corpus;   // (doc_id, text)
    QrelMap qrels;
    std::int64_t k = 10;
    std::int64_t token_budget = 5000;
    // classification
    std::vector<LabeledText> train, test;
    // sts
    std::vector<ScoredPair> pairs;
};

namespace detail {

inline std::vector<json> read_jsonl(const std::string& path) {
    std::string body = read_file(path);
    std::vector<json> out;
    std::size_t lineno = 0, pos = 0;
    while (pos < body.size()) {
        std::size_t end = body.find('\n', pos);
        if (end == std::string::npos) end = body.size();
        std::string line = body.substr(pos, end - pos);
        pos = end + 1;
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(json::parse(line));
        } catch (const json::exception& e) {
            throw ParseError(path + ": line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

inline std::string resolve(const std::filesystem::path& base, const std::string& rel) {
    std::filesystem::path p(rel);
    return p.is_absolute() ? p.string() : (base / p).string();
}

}  // namespace detail

inline EvalTask load_eval_task(const json& spec, const std::filesystem::path& base_dir) {
    EvalTask task;
    task.task_id = spec.value("task_id", "");
    if (task.task_id.empty()) throw ConfigError("eval task: missing task_id");
    task.task_type = spec.value("task_type", "");
    task.metric = spec.value("metric", "");
    if (spec.contains("task_prompt")) task.task_prompt = spec["task_prompt"].get<std::string>();

    if (task.task_type == "retrieval") {
        if (task.metric.empty()) task.metric = "ndcg_at_10";
        task.k = spec.value("k", std::int64_t{10});
        task.token_budget = spec.value("token_budget", std::int64_t{5000});
        for (const auto& j : detail::read_jsonl(detail::resolve(base_dir, spec.at("queries"))))
            task.queries.emplace_back(j.at("query_id").get<std::string>(),
                                      j.at("text").get<std::string>());
        std::set<std::string> doc_ids;
        for (const auto& j : detail::read_jsonl(detail::resolve(base_dir, spec.at("corpus")))) {
            auto id = j.at("doc_id").get<std::string>();
            doc_ids.insert(id);
            task.corpus.emplace_back(id, j.at("text").get<std::string>());
        }
        for (const auto& j : detail::read_jsonl(detail::resolve(base_dir, spec.at("qrels")))) {
            auto did = j.at("doc_id").get<std::string>();
            if (!doc_ids.count(did))
                throw SchemaError("eval task " + task.task_id + ": qrel references unknown doc " + did);
            if (j.value("relevance", std::int64_t{1}) > 0)
                task.qrels[j.at("query_id").get<std::string>()].insert(did);
        }
    } else if (task.task_type == "classification") {
        if (task.metric.empty()) task.metric = "accuracy";
        for (const auto& j : detail::read_jsonl(detail::resolve(base_dir, spec.at("train"))))
            task.train.emplace_back(j.at("text").get<std::string>(), j.at("label").get<std::int64_t>());
        for (const auto& j : detail::read_jsonl(detail::resolve(base_dir, spec.at("test"))))
            task.test.emplace_back(j.at("text").get<std::string>(), j.at("label").get<std::int64_t>());
    } else if (task.task_type == "sts") {
        if (task.metric.empty()) task.metric = "spearman";
        for (const auto& j : detail::read_jsonl(detail::resolve(base_dir, spec.at("pairs"))))
            task.pairs.emplace_back(j.at("text_a").get<std::string>(),
                                    j.at("text_b").get<std::string>(), j.at("score").get<double>());
    } else {
        throw ConfigError("eval task " + task.task_id + ": task type '" + task.task_type +
                          "' has no implemented metric");
    }
    return task;
}

inline std::vector<EvalTask> load_eval_manifest(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw ParseError("eval manifest " + path + ": " + e.what());
    }
    if (!j.contains("tasks") || !j["tasks"].is_array())
        throw ConfigError("eval manifest: missing 'tasks' array");
    std::vector<EvalTask> tasks;
    auto base = std::filesystem::path(path).parent_path();
    for (const auto& t : j["tasks"]) tasks.push_back(load_eval_task(t, base));
    return tasks;
}

struct TaskRun {
    double primary = 0;
    std::map<std::string, double> detail;
};

inline TaskRun run_task(const EvalTask& task, const Embedder& embedder, int threads = 1,
                        WarningSink warn = stderr_warnings()) {
    TaskRun run;
    if (task.task_type == "retrieval") {
        std::vector<std::string> doc_texts, query_texts;
        for (const auto& [id, text] : task.corpus) doc_texts.push_back(text);
        for (const auto& [id, text] : task.queries) query_texts.push_back(text);
        auto doc_vecs = embedder.embed_batch(doc_texts, std::nullopt, threads);
        auto query_vecs = embedder.embed_batch(query_texts, task.task_prompt, threads);
        std::map<std::string, Tensor> corpus;
        std::map<std::string, std::int64_t> doc_tokens;
        for (std::size_t i = 0; i < task.corpus.size(); ++i) {
            corpus.emplace(task.corpus[i].first, doc_vecs[i].vector);
            doc_tokens[task.corpus[i].first] =
                static_cast<std::int64_t>(term_count(task.corpus[i].second));
        }
        std::map<std::string, RankedList> rankings;
        for (std::size_t i = 0; i < task.queries.size(); ++i) {
            auto hits = retrieve_topk(query_vecs[i].vector, corpus,
                                      static_cast<std::int64_t>(corpus.size()), warn);
            RankedList rl;
            for (const auto& h : hits) rl.doc_ids.push_back(h.doc_id);
            rankings.emplace(task.queries[i].first, std::move(rl));
        }
        auto m = retrieval_metrics(rankings, task.qrels, task.k, task.token_budget, doc_tokens, warn);
        run.detail["mrr_at_10"] = m.mrr_at_10;
        run.detail["recall_at_k"] = m.recall_at_k;
        run.detail["ndcg_at_10"] = m.ndcg_at_10;
        run.detail["recall_at_token_budget"] = m.recall_at_token_budget;
    } else if (task.task_type == "classification") {
        EmbedFn fn = [&](const std::string& text) {
            return embedder.embed(text, task.task_prompt).vector;
        };
        run.detail["accuracy"] = classification_metric(task.train, task.test, fn);
    } else if (task.task_type == "sts") {
        EmbedFn fn = [&](const std::string& text) {
            return embedder.embed(text, task.task_prompt).vector;
        };
        run.detail["spearman"] = sts_metric(task.pairs, fn);
    } else {
        throw ConfigError("task type '" + task.task_type + "' has no implemented metric");
    }
    auto it = run.detail.find(task.metric);
    if (it == run.detail.end())
        throw ConfigError("task " + task.task_id + ": metric '" + task.metric +
                          "' not produced by task type " + task.task_type);
    run.primary = it->second;
    return run;
}

// ---- report serialization / rendering ----

inline json model_scores_to_json(const std::vector<ModelScores>& all) {
    json models = json::array();
    for (const auto& m : all) {
        json scores = json::array();
        for (const auto& s : m.scores)
            scores.push_back({{"task_id", s.task_id}, {"task_type", s.task_type}, {"value", s.value}});
        models.push_back({{"model", m.model}, {"scores", scores}});
    }
    return json{{"models", models}};
}

inline std::vector<ModelScores> model_scores_from_json(const json& j) {
    std::vector<ModelScores> out;
    for (const auto& m : j.at("models")) {
        ModelScores ms;
        ms.model = m.at("model").get<std::string>();
        for (const auto& s : m.at("scores"))
            ms.scores.push_back({s.at("task_id").get<std::string>(),
                                 s.at("task_type").get<std::string>(),
                                 s.at("value").get<double>()});
        out.push_back(std::move(ms));
    }
    return out;
}

inline json report_to_json(const EvalReport& rep) {
    json j;
    j["models"] = rep.models;
    j["tasks"] = rep.task_ids;
    json cells = json::object();
    for (const auto& [model, row] : rep.cells) {
        json r = json::object();
        for (const auto& [task, v] : row) r[task] = v;
        cells[model] = r;
    }
    j["cells"] = cells;
    j["task_mean"] = rep.task_mean;
    j["type_mean"] = rep.type_mean;
    json tm = json::object();
    for (const auto& [model, row] : rep.type_means) {
        json r = json::object();
        for (const auto& [type, v] : row) r[type] = v;
        tm[model] = r;
    }
    j["type_means"] = tm;
    j["borda_points"] = rep.borda_points;
    j["borda_rank"] = rep.borda_rank;
    return j;
}

// Markdown table mirroring the benchmark layout: rows are tasks and type
// means, columns are models.
inline std::string render_report_markdown(const EvalReport& rep) {
    auto fmt = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.4f", v);
        return std::string(buf);
    };
    std::string out = "| Task |";
    for (const auto& m : rep.models) out += " " + m + " |";
    out += "\n|---|";
    for (std::size_t i = 0; i < rep.models.size(); ++i) out += "---|";
    out += "\n";
    for (const auto& t : rep.task_ids) {
        out += "| " + t + " (" + rep.task_types.at(t) + ") |";
        for (const auto& m : rep.models) out += " " + fmt(rep.cells.at(m).at(t)) + " |";
        out += "\n";
    }
    std::set<std::string> types;
    for (const auto& [task, type] : rep.task_types) types.insert(type);
    for (const auto& type : types) {
        out += "| Mean (" + type + ") |";
        for (const auto& m : rep.models) out += " " + fmt(rep.type_means.at(m).at(type)) + " |";
        out += "\n";
    }
    out += "| Mean (Task) |";
    for (const auto& m : rep.models) out += " " + fmt(rep.task_mean.at(m)) + " |";
    out += "\n| Mean (Type) |";
    for (const auto& m : rep.models) out += " " + fmt(rep.type_mean.at(m)) + " |";
    out += "\n| Borda points |";
    for (const auto& m : rep.models) out += " " + fmt(rep.borda_points.at(m)) + " |";
    out += "\n| Borda rank |";
    for (const auto& m : rep.models) out += " " + std::to_string(rep.borda_rank.at(m)) + " |";
    out += "\n";
    return out;
}

}  // namespace embedkit
