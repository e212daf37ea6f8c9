#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "embedkit/checkpoint.hpp"
#include "embedkit/datapipe.hpp"
#include "embedkit/objective.hpp"
#include "embedkit/tokenizer.hpp"

namespace embedkit {

// Pluggable relevance scorer (higher = more relevant). The production slots
// are stand-ins with the same interface an LLM scorer would use; both are
// deterministic for fixed inputs.
struct Scorer {
    std::string name;
    std::function<double(const std::string& query, const std::string& passage)> score;
};

// Graded-classification stand-in: lexical overlap between query and passage
// terms, discretized into grades {0,1,2,3}.
inline Scorer graded_overlap_scorer() {
    return Scorer{
        "graded_overlap", [](const std::string& query, const std::string& passage) {
            auto q = split_terms(query);
            auto p = split_terms(passage);
            if (q.empty()) return 0.0;
            std::map<std::string, bool> pset;
            for (auto& t : p) pset[t] = true;
            std::size_t hit = 0;
            std::map<std::string, bool> counted;
            for (auto& t : q) {
                if (pset.count(t) && !counted[t]) {
                    ++hit;
                    counted[t] = true;
                }
            }
            std::size_t distinct = counted.size();
            std::map<std::string, bool> quniq;
            for (auto& t : q) quniq[t] = true;
            double overlap = static_cast<double>(distinct) / static_cast<double>(quniq.size());
            return std::min(3.0, std::floor(overlap * 4.0));
        }};
}

// Query-likelihood stand-in: add-half smoothed unigram log-likelihood of the
// query terms under the passage's term distribution.
inline Scorer query_likelihood_scorer() {
    return Scorer{
        "query_likelihood", [](const std::string& query, const std::string& passage) {
            auto q = split_terms(query);
            auto p = split_terms(passage);
            std::map<std::string, std::int64_t> counts;
            for (auto& t : p) ++counts[t];
            double len = static_cast<double>(p.size());
            double vocab = static_cast<double>(counts.size() + 1);
            double ll = 0.0;
            for (auto& t : q) {
                auto it = counts.find(t);
                double c = it == counts.end() ? 0.0 : static_cast<double>(it->second);
                ll += std::log((c + 0.5) / (len + 0.5 * vocab));
            }
            return ll;
        }};
}

struct RetrievalHit {
    std::string doc_id;
    double score;
};

// Exact brute-force cosine ranking, descending; ties broken by ascending
// doc id. Scores are accumulated in 64-bit.
inline std::vector<RetrievalHit> retrieve_topk(const Tensor& query,
                                               const std::map<std::string, Tensor>& corpus,
                                               std::int64_t k,
                                               WarningSink warn = stderr_warnings()) {
    if (k < 1) throw ContractError("retrieve_topk: k must be >= 1");
    if (corpus.empty()) throw EmptyInputError("retrieve_topk: empty corpus");
    std::vector<RetrievalHit> hits;
    hits.reserve(corpus.size());
    for (const auto& [id, vec] : corpus)
        hits.push_back({id, detail::cosine_double(query, vec)});
    std::stable_sort(hits.begin(), hits.end(), [](const RetrievalHit& a, const RetrievalHit& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.doc_id < b.doc_id;
    });
    if (k > static_cast<std::int64_t>(hits.size())) {
        warn("retrieve_topk: k=" + std::to_string(k) + " exceeds corpus size " +
             std::to_string(hits.size()) + "; returning full ranking");
        return hits;
    }
    hits.resize(static_cast<std::size_t>(k));
    return hits;
}

// Reciprocal Rank Fusion: fused(d) = sum over rankings of 1/(constant + rank),
// ranks 1-based. All rankings must cover the same document set.
inline std::map<std::string, double> rrf_fuse(const std::vector<std::vector<std::string>>& rankings,
                                              double constant) {
    if (!(constant > 0.0)) throw ContractError("rrf_fuse: constant must be positive");
    if (rankings.empty()) throw ContractError("rrf_fuse: no rankings");
    std::map<std::string, double> fused;
    for (const auto& d : rankings.front()) fused[d] = 0.0;
    for (const auto& ranking : rankings) {
        if (ranking.size() != fused.size())
            throw ContractError("rrf_fuse: rankings cover different document sets");
        std::map<std::string, bool> seen;
        for (std::size_t r = 0; r < ranking.size(); ++r) {
            if (!fused.count(ranking[r]) || seen[ranking[r]])
                throw ContractError("rrf_fuse: rankings cover different document sets");
            seen[ranking[r]] = true;
            fused[ranking[r]] += 1.0 / (constant + static_cast<double>(r + 1));
        }
    }
    return fused;
}

struct MineOptions {
    std::int64_t k = 5;
    double rrf_constant = 60.0;
    bool force = false;  // skip the trained-without-negatives check
    int threads = 1;
};

struct MineRecord {
    std::size_t query_index = 0;
    std::string query;
    std::string positive_id;
    bool skipped = false;
    std::string note;
    std::vector<std::string> topk;                              // retrieval order
    std::map<std::string, std::vector<double>> scorer_scores;   // aligned with topk
    std::map<std::string, std::vector<std::string>> scorer_rankings;
    std::map<std::string, double> fused;
    std::string selected;
};

struct MineResult {
    std::vector<TrainingExample> dataset;  // hard_negative filled where mining succeeded
    std::vector<MineRecord> report;
};

namespace detail {

// Candidates ranked by one scorer: score descending, retrieval rank ascending
// on ties (deterministic).
inline std::vector<std::string> rank_by_scorer(const std::vector<std::string>& topk,
                                               const std::vector<double>& scores) {
    std::vector<std::size_t> order(topk.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    std::vector<std::string> ranked;
    ranked.reserve(order.size());
    for (auto i : order) ranked.push_back(topk[i]);
    return ranked;
}

}  // namespace detail

// Mining pipeline: embed with the initial model, retrieve top-k neighbors
// (positives excluded), score with every scorer, fuse ranks with RRF, and
// keep the fused-lowest (k-th) neighbor as the hard negative.
inline MineResult mine_hard_negatives(
    const Checkpoint& model, std::vector<TrainingExample> dataset,
    const std::vector<Scorer>& scorers, const MineOptions& opts,
    const std::optional<std::vector<std::pair<std::string, std::string>>>& external_corpus = {},
    WarningSink warn = stderr_warnings()) {
    if (dataset.empty()) throw EmptyInputError("mine_hard_negatives: empty dataset");
    if (scorers.empty()) throw ContractError("mine_hard_negatives: no scorers");
    if (opts.k < 1) throw ContractError("mine_hard_negatives: k must be >= 1");
    if (model.hard_negatives_used && !opts.force)
        throw ContractError(
            "mine_hard_negatives: model was trained with hard negatives; the mining model must "
            "be trained without them (pass force to override)");

    // Corpus: external (id, text) pairs, or unique positives in file order.
    std::vector<std::pair<std::string, std::string>> docs;
    if (external_corpus) {
        docs = *external_corpus;
        if (docs.empty()) throw EmptyInputError("mine_hard_negatives: empty corpus");
    } else {
        std::map<std::string, bool> seen;
        for (const auto& ex : dataset) {
            if (seen.count(ex.positive)) continue;
            seen[ex.positive] = true;
            char id[16];
            std::snprintf(id, sizeof(id), "d%06zu", docs.size());
            docs.emplace_back(id, ex.positive);
        }
    }
    std::map<std::string, std::string> text_by_id;
    std::map<std::string, std::string> id_by_text;
    for (const auto& [id, text] : docs) {
        if (text_by_id.count(id))
            throw IncompatibilityError("mine_hard_negatives: duplicate corpus doc id " + id);
        text_by_id[id] = text;
        id_by_text.emplace(text, id);  // first occurrence wins
    }

    Embedder embedder = embedder_from(model);
    std::vector<std::string> doc_texts;
    doc_texts.reserve(docs.size());
    for (const auto& [id, text] : docs) doc_texts.push_back(text);
    auto doc_vecs = embedder.embed_batch(doc_texts, std::nullopt, opts.threads);
    std::map<std::string, Tensor> corpus_embeds;
    for (std::size_t i = 0; i < docs.size(); ++i)
        corpus_embeds.emplace(docs[i].first, doc_vecs[i].vector);

    MineResult result;
    result.report.resize(dataset.size());
    parallel_for(dataset.size(), opts.threads, [&](std::size_t qi) {
        TrainingExample& ex = dataset[qi];
        MineRecord& rec = result.report[qi];
        rec.query_index = qi;
        rec.query = ex.query;

        auto pos_it = id_by_text.find(ex.positive);
        if (pos_it == id_by_text.end()) {
            rec.skipped = true;
            rec.note = "positive not present in corpus";
            return;
        }
        rec.positive_id = pos_it->second;

        // Exclusion is by exact text match: every doc carrying the positive
        // text is removed, not just the first id.
        std::map<std::string, Tensor> candidates = corpus_embeds;
        for (const auto& [id, text] : text_by_id)
            if (text == ex.positive) candidates.erase(id);
        if (candidates.empty()) {
            rec.skipped = true;
            rec.note = "no candidates besides the positive";
            return;
        }

        Embedding qe = embedder.embed(ex.query, ex.task);
        std::vector<std::string> local_warnings;
        auto hits = retrieve_topk(qe.vector, candidates, opts.k,
                                  [&](const std::string& w) { local_warnings.push_back(w); });
        if (static_cast<std::int64_t>(hits.size()) < opts.k)
            rec.note = "corpus smaller than k+1; using all " + std::to_string(hits.size()) +
                       " candidates";
        for (const auto& h : hits) rec.topk.push_back(h.doc_id);

        std::vector<std::vector<std::string>> rankings;
        for (const auto& scorer : scorers) {
            std::vector<double> scores;
            scores.reserve(rec.topk.size());
            for (const auto& id : rec.topk) scores.push_back(scorer.score(ex.query, text_by_id.at(id)));
            rec.scorer_scores[scorer.name] = scores;
            auto ranked = detail::rank_by_scorer(rec.topk, scores);
            rec.scorer_rankings[scorer.name] = ranked;
            rankings.push_back(std::move(ranked));
        }
        rec.fused = rrf_fuse(rankings, opts.rrf_constant);

        // Fused-descending order, ties by ascending doc id; the last element
        // is the k-th (lowest-scoring) neighbor.
        std::vector<std::string> by_fused = rec.topk;
        std::stable_sort(by_fused.begin(), by_fused.end(),
                         [&](const std::string& a, const std::string& b) {
                             if (rec.fused.at(a) != rec.fused.at(b))
                                 return rec.fused.at(a) > rec.fused.at(b);
                             return a < b;
                         });
        rec.selected = by_fused.back();
        ex.hard_negative = text_by_id.at(rec.selected);
    });

    for (const auto& rec : result.report)
        if (!rec.note.empty() || rec.skipped)
            warn("query " + std::to_string(rec.query_index) + ": " +
                 (rec.skipped ? "skipped: " : "") + rec.note);

    result.dataset = std::move(dataset);
    return result;
}

inline std::string format_mining_report(const MineResult& result) {
    std::string out;
    for (const auto& rec : result.report) {
        json j;
        j["query_index"] = rec.query_index;
        j["query"] = rec.query;
        if (rec.skipped) {
            j["skipped"] = true;
            j["note"] = rec.note;
        } else {
            j["positive_id"] = rec.positive_id;
            j["topk"] = rec.topk;
            j["scores"] = rec.scorer_scores;
            j["rankings"] = rec.scorer_rankings;
            json fused = json::object();
            for (const auto& [id, s] : rec.fused) fused[id] = s;
            j["fused"] = fused;
            j["selected"] = rec.selected;
            if (!rec.note.empty()) j["note"] = rec.note;
        }
        out += j.dump() + "\n";
    }
    return out;
}

}  // namespace embedkit
