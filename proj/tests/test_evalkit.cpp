#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "embedkit/checkpoint.hpp"
#include "embedkit/evalkit.hpp"
#include "support/tmpdir.hpp"

using namespace embedkit;
using ektest::TempDir;

namespace {

WarningSink quiet() {
    return [](const std::string&) {};
}

std::map<std::string, std::int64_t> unit_tokens(const std::map<std::string, RankedList>& rankings) {
    std::map<std::string, std::int64_t> tokens;
    for (const auto& [qid, rl] : rankings)
        for (const auto& id : rl.doc_ids) tokens[id] = 1;
    return tokens;
}

}  // namespace

TEST_CASE("mrr contribution is the reciprocal first-relevant rank", "[evalkit]") {
    std::map<std::string, RankedList> rankings{{"q", RankedList{{"a", "b", "c", "d"}}}};
    QrelMap qrels{{"q", {"c"}}};
    auto m = retrieval_metrics(rankings, qrels, 4, 1000, unit_tokens(rankings), quiet());
    CHECK(m.mrr_at_10 == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("recall saturates when all relevant docs are in the top k", "[evalkit]") {
    std::map<std::string, RankedList> rankings{{"q", RankedList{{"a", "b", "c"}}}};
    QrelMap qrels{{"q", {"a", "b"}}};
    auto m = retrieval_metrics(rankings, qrels, 2, 1000, unit_tokens(rankings), quiet());
    CHECK(m.recall_at_k == 1.0);
    CHECK(m.ndcg_at_10 == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("retrieval metrics match a definition-level 64-bit oracle", "[evalkit][property]") {
    Rng rng(101);
    for (int trial = 0; trial < 10; ++trial) {
        std::map<std::string, RankedList> rankings;
        QrelMap qrels;
        std::map<std::string, std::int64_t> tokens;
        int docs = 12;
        for (int d = 0; d < docs; ++d) tokens["d" + std::to_string(d)] = 1 + rng.uniform_int(9);
        for (int q = 0; q < 5; ++q) {
            std::vector<std::string> ids;
            for (int d = 0; d < docs; ++d) ids.push_back("d" + std::to_string(d));
            for (int i = docs - 1; i > 0; --i)
                std::swap(ids[i], ids[rng.uniform_int(static_cast<std::uint64_t>(i + 1))]);
            std::string qid = "q" + std::to_string(q);
            rankings[qid] = RankedList{ids};
            std::set<std::string> rel;
            int nrel = 1 + static_cast<int>(rng.uniform_int(4));
            while (static_cast<int>(rel.size()) < nrel)
                rel.insert("d" + std::to_string(rng.uniform_int(docs)));
            qrels[qid] = rel;
        }
        std::int64_t k = 4, budget = 9;
        auto got = retrieval_metrics(rankings, qrels, k, budget, tokens, quiet());

        // independent oracle written directly from the definitions
        double mrr = 0, recall = 0, ndcg = 0, brecall = 0;
        for (const auto& [qid, rl] : rankings) {
            const auto& rel = qrels[qid];
            double rr = 0;
            for (std::size_t i = 0; i < rl.doc_ids.size() && i < 10; ++i)
                if (rel.count(rl.doc_ids[i])) {
                    rr = 1.0 / (static_cast<double>(i) + 1.0);
                    break;
                }
            mrr += rr;
            double hits = 0;
            for (std::size_t i = 0; i < static_cast<std::size_t>(k); ++i)
                hits += rel.count(rl.doc_ids[i]) ? 1 : 0;
            recall += hits / static_cast<double>(rel.size());
            double dcg = 0, idcg = 0;
            for (std::size_t i = 0; i < 10 && i < rl.doc_ids.size(); ++i)
                if (rel.count(rl.doc_ids[i])) dcg += 1.0 / std::log2(i + 2.0);
            for (std::size_t i = 0; i < rel.size() && i < 10; ++i) idcg += 1.0 / std::log2(i + 2.0);
            ndcg += dcg / idcg;
            std::int64_t used = 0;
            double bhits = 0;
            for (const auto& id : rl.doc_ids) {
                if (used >= budget) break;
                used += tokens[id];
                bhits += rel.count(id) ? 1 : 0;
            }
            brecall += bhits / static_cast<double>(rel.size());
        }
        double n = 5.0;
        CHECK(std::fabs(got.mrr_at_10 - mrr / n) < 1e-9);
        CHECK(std::fabs(got.recall_at_k - recall / n) < 1e-9);
        CHECK(std::fabs(got.ndcg_at_10 - ndcg / n) < 1e-9);
        CHECK(std::fabs(got.recall_at_token_budget - brecall / n) < 1e-9);
    }
}

TEST_CASE("queries without relevant docs are excluded with a warning", "[evalkit]") {
    std::map<std::string, RankedList> rankings{{"q1", RankedList{{"a", "b"}}},
                                               {"q2", RankedList{{"a", "b"}}}};
    QrelMap qrels{{"q1", {"a"}}};
    std::vector<std::string> warnings;
    auto m = retrieval_metrics(rankings, qrels, 2, 100, unit_tokens(rankings),
                               [&](const std::string& w) { warnings.push_back(w); });
    CHECK(m.queries_scored == 1);
    REQUIRE(warnings.size() == 1);
    CHECK(warnings[0].find("q2") != std::string::npos);

    QrelMap none;
    CHECK_THROWS_AS(retrieval_metrics(rankings, none, 2, 100, unit_tokens(rankings), quiet()),
                    EmptyInputError);
}

namespace {

// Hand-built embedder: red-ish texts on one axis, blue-ish on the other.
Tensor color_vec(const std::string& text) {
    float red = text.find("red") != std::string::npos ? 1.0f : 0.05f;
    float blue = text.find("blue") != std::string::npos ? 1.0f : 0.05f;
    return Tensor({2}, {red, blue});
}

}  // namespace

TEST_CASE("classification: identical point with k=1 returns its label", "[evalkit]") {
    std::vector<LabeledText> train{{"red apple", 0}, {"blue sky", 1}, {"red rose", 0}};
    std::vector<LabeledText> test{{"red apple", 0}};
    double acc = classification_metric(train, test, color_vec, /*k=*/1);
    CHECK(acc == 1.0);
}

TEST_CASE("classification: separable clusters give accuracy 1", "[evalkit]") {
    std::vector<LabeledText> train{{"red apple", 0},  {"red rose", 0},  {"red brick", 0},
                                   {"blue sky", 1},   {"blue sea", 1},  {"blue jay", 1}};
    std::vector<LabeledText> test{{"red wagon", 0}, {"blue whale", 1}, {"red sunset", 0}};
    CHECK(classification_metric(train, test, color_vec) == 1.0);
}

TEST_CASE("classification error paths", "[evalkit]") {
    std::vector<LabeledText> one_class{{"red a", 0}, {"red b", 0}};
    std::vector<LabeledText> test{{"red c", 0}};
    CHECK_THROWS_AS(classification_metric(one_class, test, color_vec), ConfigError);

    std::vector<LabeledText> train{{"red a", 0}, {"blue b", 1}};
    std::vector<LabeledText> unseen{{"green c", 7}};
    CHECK_THROWS_AS(classification_metric(train, unseen, color_vec), ConfigError);
}

TEST_CASE("classification tie-break prefers the lowest class id", "[evalkit]") {
    // k=2 with one vote per class: tie resolved toward class 0
    std::vector<LabeledText> train{{"red thing", 0}, {"blue thing", 1}, {"blue other", 1}};
    std::vector<LabeledText> test{{"red blue mix", 0}};
    double acc = classification_metric(train, test, color_vec, /*k=*/2);
    CHECK(acc == 1.0);
}

TEST_CASE("spearman basics", "[evalkit]") {
    SECTION("perfect monotone order") {
        CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == Catch::Approx(1.0).epsilon(1e-12));
    }
    SECTION("reversed order") {
        CHECK(spearman({1, 2, 3, 4}, {8, 6, 4, 2}) == Catch::Approx(-1.0).epsilon(1e-12));
    }
    SECTION("ties get average ranks") {
        auto r = average_ranks({3.0, 1.0, 3.0, 2.0});
        CHECK(r[0] == 3.5);
        CHECK(r[1] == 1.0);
        CHECK(r[2] == 3.5);
        CHECK(r[3] == 2.0);
    }
    SECTION("needs at least 3 points") {
        CHECK_THROWS_AS(spearman({1, 2}, {1, 2}), ContractError);
    }
}

TEST_CASE("spearman matches a rank-then-pearson oracle", "[evalkit][property]") {
    Rng rng(103);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> x, y;
        for (int i = 0; i < 10; ++i) {
            x.push_back(rng.uniform(-5, 5));
            y.push_back(std::round(rng.uniform(0, 5)));  // coarse gold scores force ties
        }
        double got = spearman(x, y);

        // oracle: O(n^2) average ranks, then textbook pearson
        auto rank_of = [](const std::vector<double>& v) {
            std::vector<double> r(v.size());
            for (std::size_t i = 0; i < v.size(); ++i) {
                double less = 0, equal = 0;
                for (std::size_t j = 0; j < v.size(); ++j) {
                    less += v[j] < v[i] ? 1 : 0;
                    equal += v[j] == v[i] ? 1 : 0;
                }
                r[i] = less + (equal + 1.0) / 2.0;
            }
            return r;
        };
        auto rx = rank_of(x);
        auto ry = rank_of(y);
        double n = 10, sx = 0, sy = 0;
        for (std::size_t i = 0; i < rx.size(); ++i) {
            sx += rx[i];
            sy += ry[i];
        }
        double mx = sx / n, my = sy / n, num = 0, dx = 0, dy = 0;
        for (std::size_t i = 0; i < rx.size(); ++i) {
            num += (rx[i] - mx) * (ry[i] - my);
            dx += (rx[i] - mx) * (rx[i] - mx);
            dy += (ry[i] - my) * (ry[i] - my);
        }
        double want = num / std::sqrt(dx * dy);
        CHECK(std::fabs(got - want) < 1e-9);
    }
}

TEST_CASE("sts metric wiring and degenerate gold", "[evalkit]") {
    std::vector<ScoredPair> pairs{{"red one", "red two", 5.0},
                                  {"red three", "blue one", 1.0},
                                  {"blue two", "blue three", 4.5}};
    double r = sts_metric(pairs, color_vec);
    CHECK(r >= -1.0);
    CHECK(r <= 1.0);

    std::vector<ScoredPair> constant{{"a1 red", "a2 red", 3.0},
                                     {"b1 red", "b2 blue", 3.0},
                                     {"c1 blue", "c2 blue", 3.0}};
    CHECK_THROWS_AS(sts_metric(constant, color_vec), DegenerateInputError);

    std::vector<ScoredPair> two{{"a", "b", 1.0}, {"c", "d", 2.0}};
    CHECK_THROWS_AS(sts_metric(two, color_vec), ContractError);
}

namespace {

std::vector<ModelScores> hand_table() {
    // 3 models x 4 tasks with one tie on t3
    auto row = [](const std::string& model, double t1, double t2, double t3, double t4) {
        ModelScores ms;
        ms.model = model;
        ms.scores = {{"t1", "retrieval", t1},
                     {"t2", "retrieval", t2},
                     {"t3", "sts", t3},
                     {"t4", "classification", t4}};
        return ms;
    };
    return {row("A", 0.9, 0.4, 0.6, 0.2), row("B", 0.5, 0.8, 0.6, 0.1),
            row("C", 0.1, 0.2, 0.3, 0.9)};
}

}  // namespace

TEST_CASE("aggregate: single model trivia", "[evalkit]") {
    std::vector<ModelScores> one{{"only",
                                  {{"t1", "retrieval", 0.5}, {"t2", "sts", 0.7}}}};
    EvalReport rep = aggregate(one);
    CHECK(rep.borda_rank.at("only") == 1);
    CHECK(rep.task_mean.at("only") == Catch::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("aggregate: dominance gives all points to the winner", "[evalkit]") {
    std::vector<ModelScores> two{{"A", {{"t1", "r", 0.9}, {"t2", "r", 0.8}}},
                                 {"B", {{"t1", "r", 0.5}, {"t2", "r", 0.4}}}};
    EvalReport rep = aggregate(two);
    CHECK(rep.borda_points.at("A") == 2.0);  // (M - 1) per task
    CHECK(rep.borda_points.at("B") == 0.0);
    CHECK(rep.borda_rank.at("A") == 1);
    CHECK(rep.borda_rank.at("B") == 2);
}

TEST_CASE("aggregate: hand-computed 3x4 fixture with a tie", "[evalkit]") {
    EvalReport rep = aggregate(hand_table());
    CHECK(rep.borda_points.at("A") == Catch::Approx(5.5).epsilon(1e-12));
    CHECK(rep.borda_points.at("B") == Catch::Approx(4.5).epsilon(1e-12));
    CHECK(rep.borda_points.at("C") == Catch::Approx(2.0).epsilon(1e-12));
    CHECK(rep.borda_rank.at("A") == 1);
    CHECK(rep.borda_rank.at("B") == 2);
    CHECK(rep.borda_rank.at("C") == 3);
    CHECK(rep.task_mean.at("A") == Catch::Approx(0.525).epsilon(1e-12));
    CHECK(rep.type_means.at("A").at("retrieval") == Catch::Approx(0.65).epsilon(1e-12));
    CHECK(rep.type_mean.at("A") == Catch::Approx((0.65 + 0.6 + 0.2) / 3.0).epsilon(1e-12));
    // mean(type) = unweighted mean of per-type means (module invariant)
    for (const auto& model : rep.models) {
        double acc = 0;
        for (const auto& [type, v] : rep.type_means.at(model)) acc += v;
        CHECK(rep.type_mean.at(model) ==
              Catch::Approx(acc / static_cast<double>(rep.type_means.at(model).size())));
    }
}

TEST_CASE("borda is invariant to monotone transforms of one task", "[evalkit][property]") {
    auto table = hand_table();
    EvalReport base = aggregate(table);
    for (auto& ms : table)
        for (auto& s : ms.scores)
            if (s.task_id == "t2") s.value = std::exp(5.0 * s.value);
    EvalReport transformed = aggregate(table);
    for (const auto& m : base.models) {
        CHECK(base.borda_points.at(m) == transformed.borda_points.at(m));
        CHECK(base.borda_rank.at(m) == transformed.borda_rank.at(m));
    }
}

TEST_CASE("aggregate is invariant to model and task ordering", "[evalkit][property]") {
    auto table = hand_table();
    EvalReport base = aggregate(table);
    std::swap(table[0], table[2]);
    for (auto& ms : table) std::reverse(ms.scores.begin(), ms.scores.end());
    EvalReport shuffled = aggregate(table);
    for (const auto& m : base.models) {
        CHECK(base.borda_points.at(m) == shuffled.borda_points.at(m));
        CHECK(base.task_mean.at(m) == shuffled.task_mean.at(m));
        CHECK(base.borda_rank.at(m) == shuffled.borda_rank.at(m));
    }
}

TEST_CASE("aggregate rejects missing cells, listing them", "[evalkit]") {
    auto table = hand_table();
    table[1].scores.pop_back();  // B loses t4
    try {
        aggregate(table);
        FAIL("expected IncompatibilityError");
    } catch (const IncompatibilityError& e) {
        std::string msg = e.what();
        CHECK(msg.find("B/t4") != std::string::npos);
    }
}

TEST_CASE("metrics stay in their definitional ranges", "[evalkit][property]") {
    Rng rng(107);
    for (int trial = 0; trial < 5; ++trial) {
        std::map<std::string, RankedList> rankings;
        QrelMap qrels;
        std::map<std::string, std::int64_t> tokens;
        for (int d = 0; d < 8; ++d) tokens["d" + std::to_string(d)] = 1;
        for (int q = 0; q < 3; ++q) {
            std::vector<std::string> ids;
            for (int d = 0; d < 8; ++d) ids.push_back("d" + std::to_string(d));
            for (int i = 7; i > 0; --i)
                std::swap(ids[i], ids[rng.uniform_int(static_cast<std::uint64_t>(i + 1))]);
            rankings["q" + std::to_string(q)] = RankedList{ids};
            qrels["q" + std::to_string(q)] = {"d" + std::to_string(rng.uniform_int(8))};
        }
        auto m = retrieval_metrics(rankings, qrels, 3, 4, tokens, quiet());
        for (double v : {m.mrr_at_10, m.recall_at_k, m.ndcg_at_10, m.recall_at_token_budget}) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("eval tasks load from files and run end to end", "[evalkit]") {
    TempDir tmp;
    tmp.write("queries.jsonl",
              R"({"query_id": "q1", "text": "tell me about granite"})"
              "\n"
              R"({"query_id": "q2", "text": "tell me about maple"})"
              "\n");
    tmp.write("corpus.jsonl",
              R"({"doc_id": "d1", "text": "granite is an igneous rock"})"
              "\n"
              R"({"doc_id": "d2", "text": "maple is a deciduous tree"})"
              "\n"
              R"({"doc_id": "d3", "text": "falcons are fast birds"})"
              "\n");
    tmp.write("qrels.jsonl",
              R"({"query_id": "q1", "doc_id": "d1"})"
              "\n"
              R"({"query_id": "q2", "doc_id": "d2"})"
              "\n");
    tmp.write("tasks.json", R"({"tasks": [{
        "task_id": "toy", "task_type": "retrieval", "metric": "mrr_at_10",
        "task_prompt": "question answering",
        "queries": "queries.jsonl", "corpus": "corpus.jsonl", "qrels": "qrels.jsonl",
        "k": 2, "token_budget": 100}]})");

    auto tasks = load_eval_manifest(tmp.file("tasks.json"));
    REQUIRE(tasks.size() == 1);
    CHECK(tasks[0].queries.size() == 2);
    CHECK(tasks[0].corpus.size() == 3);

    EncoderConfig enc;
    enc.vocab_buckets = 64;
    enc.max_seq_len = 8;
    enc.model_dim = 8;
    enc.num_layers = 1;
    enc.num_heads = 2;
    enc.ff_dim = 16;
    enc.output_dim = 8;
    enc.mrl_dims = {8};
    Embedder embedder(enc, init_encoder_params(enc, 21));
    auto run = run_task(tasks[0], embedder, 1, quiet());
    CHECK(run.detail.count("mrr_at_10") == 1);
    CHECK(run.detail.count("ndcg_at_10") == 1);
    CHECK(run.primary >= 0.0);
    CHECK(run.primary <= 1.0);
}

TEST_CASE("eval task loading rejects bad references and types", "[evalkit]") {
    TempDir tmp;
    tmp.write("queries.jsonl", R"({"query_id": "q1", "text": "x"})"
                               "\n");
    tmp.write("corpus.jsonl", R"({"doc_id": "d1", "text": "y"})"
                              "\n");
    tmp.write("qrels.jsonl", R"({"query_id": "q1", "doc_id": "missing"})"
                             "\n");
    json spec{{"task_id", "bad"},        {"task_type", "retrieval"},
              {"queries", "queries.jsonl"}, {"corpus", "corpus.jsonl"},
              {"qrels", "qrels.jsonl"}};
    CHECK_THROWS_AS(load_eval_task(spec, tmp.dir()), SchemaError);

    json unknown{{"task_id", "x"}, {"task_type", "clustering"}};
    CHECK_THROWS_AS(load_eval_task(unknown, tmp.dir()), ConfigError);
}

TEST_CASE("report serialization round trip and rendering", "[evalkit]") {
    auto table = hand_table();
    json j = model_scores_to_json(table);
    auto back = model_scores_from_json(j);
    REQUIRE(back.size() == table.size());
    CHECK(back[0].model == "A");
    CHECK(back[0].scores[0].value == 0.9);

    EvalReport rep = aggregate(table);
    std::string md = render_report_markdown(rep);
    CHECK(md.find("| A |") != std::string::npos);
    CHECK(md.find("Borda rank") != std::string::npos);
    CHECK(md.find("Mean (Task)") != std::string::npos);
    CHECK(md.find("t3 (sts)") != std::string::npos);
}
