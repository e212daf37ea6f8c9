#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>

#include "embedkit/miner.hpp"
#include "support/tmpdir.hpp"

using namespace embedkit;

namespace {

EncoderConfig mini_encoder() {
    EncoderConfig enc;
    enc.vocab_buckets = 128;
    enc.max_seq_len = 8;
    enc.model_dim = 8;
    enc.num_layers = 1;
    enc.num_heads = 2;
    enc.ff_dim = 16;
    enc.output_dim = 8;
    enc.mrl_dims = {4, 8};
    return enc;
}

Checkpoint mining_model(std::uint64_t seed = 1) {
    Checkpoint c;
    c.encoder = mini_encoder();
    c.origin = CkptOrigin::prefinetune;
    c.hard_negatives_used = false;
    c.params = init_encoder_params(c.encoder, seed);
    return c;
}

WarningSink quiet() {
    return [](const std::string&) {};
}

std::map<std::string, Tensor> vec_corpus(const std::vector<std::pair<std::string, std::vector<float>>>& docs) {
    std::map<std::string, Tensor> corpus;
    for (const auto& [id, v] : docs)
        corpus.emplace(id, Tensor({static_cast<std::int64_t>(v.size())}, std::vector<float>(v)));
    return corpus;
}

}  // namespace

TEST_CASE("retrieve_topk ranks the query vector itself first", "[miner]") {
    auto corpus = vec_corpus({{"a", {0.1f, 0.9f}}, {"self", {0.6f, 0.8f}}, {"b", {-1, 0}}});
    Tensor q({2}, {0.6f, 0.8f});
    auto hits = retrieve_topk(q, corpus, 3, quiet());
    REQUIRE(hits.size() == 3);
    CHECK(hits[0].doc_id == "self");
    CHECK(hits[0].score == Catch::Approx(1.0));
}

TEST_CASE("retrieve_topk prefers the aligned doc over orthogonal decoys", "[miner]") {
    auto corpus = vec_corpus(
        {{"decoy1", {0, 1, 0}}, {"decoy2", {0, 0, 1}}, {"aligned", {2, 0.1f, 0}}});
    Tensor q({3}, {1, 0, 0});
    auto hits = retrieve_topk(q, corpus, 1, quiet());
    REQUIRE(hits.size() == 1);
    CHECK(hits[0].doc_id == "aligned");
}

TEST_CASE("retrieve_topk matches a full-sort 64-bit oracle", "[miner][property]") {
    Rng rng(71);
    for (int trial = 0; trial < 5; ++trial) {
        std::map<std::string, Tensor> corpus;
        for (int d = 0; d < 50; ++d) {
            Tensor v({6});
            for (std::int64_t i = 0; i < 6; ++i) v[i] = static_cast<float>(rng.uniform(-1, 1));
            char id[8];
            std::snprintf(id, sizeof(id), "c%03d", d);
            corpus.emplace(id, std::move(v));
        }
        Tensor q({6});
        for (std::int64_t i = 0; i < 6; ++i) q[i] = static_cast<float>(rng.uniform(-1, 1));

        auto hits = retrieve_topk(q, corpus, 10, quiet());

        // independent oracle: compute all cosines in double, full sort
        std::vector<std::pair<double, std::string>> oracle;
        for (const auto& [id, v] : corpus) {
            double dot = 0, nq = 0, nv = 0;
            for (std::int64_t i = 0; i < 6; ++i) {
                dot += static_cast<double>(q[i]) * v[i];
                nq += static_cast<double>(q[i]) * q[i];
                nv += static_cast<double>(v[i]) * v[i];
            }
            oracle.emplace_back(dot / std::sqrt(nq * nv), id);
        }
        std::sort(oracle.begin(), oracle.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        REQUIRE(hits.size() == 10);
        for (std::size_t i = 0; i < hits.size(); ++i) CHECK(hits[i].doc_id == oracle[i].second);
    }
}

TEST_CASE("retrieve_topk edge cases", "[miner]") {
    auto corpus = vec_corpus({{"a", {1, 0}}, {"b", {0, 1}}});
    Tensor q({2}, {1, 1});
    SECTION("k beyond corpus returns the full ranking with a warning") {
        std::vector<std::string> warnings;
        auto hits = retrieve_topk(q, corpus, 10, [&](const std::string& w) { warnings.push_back(w); });
        CHECK(hits.size() == 2);
        REQUIRE(warnings.size() == 1);
        CHECK(warnings[0].find("full ranking") != std::string::npos);
    }
    SECTION("k must be positive") {
        CHECK_THROWS_AS(retrieve_topk(q, corpus, 0, quiet()), ContractError);
    }
    SECTION("empty corpus") {
        std::map<std::string, Tensor> none;
        CHECK_THROWS_AS(retrieve_topk(q, none, 1, quiet()), EmptyInputError);
    }
}

TEST_CASE("rrf formula and symmetry", "[miner]") {
    SECTION("single ranking preserves order") {
        auto fused = rrf_fuse({{"x", "y", "z"}}, 60.0);
        CHECK(fused["x"] > fused["y"]);
        CHECK(fused["y"] > fused["z"]);
    }
    SECTION("rank 1 and rank 2 with constant 60") {
        auto fused = rrf_fuse({{"d", "e"}, {"e", "d"}}, 60.0);
        CHECK(fused["d"] == Catch::Approx(1.0 / 61 + 1.0 / 62).epsilon(1e-12));
        CHECK(fused["e"] == Catch::Approx(1.0 / 61 + 1.0 / 62).epsilon(1e-12));
    }
    SECTION("reversed rankings of three docs fuse to equal scores") {
        auto fused = rrf_fuse({{"a", "b", "c"}, {"c", "b", "a"}}, 60.0);
        CHECK(fused["a"] == Catch::Approx(fused["c"]).epsilon(1e-12));
        CHECK(fused["a"] == Catch::Approx(1.0 / 61 + 1.0 / 63).epsilon(1e-12));
        CHECK(fused["b"] == Catch::Approx(2.0 / 62).epsilon(1e-12));
    }
    SECTION("doc-set mismatch rejected") {
        CHECK_THROWS_AS(rrf_fuse({{"a", "b"}, {"a", "c"}}, 60.0), ContractError);
        CHECK_THROWS_AS(rrf_fuse({{"a", "b"}, {"a"}}, 60.0), ContractError);
        CHECK_THROWS_AS(rrf_fuse({{"a", "a"}, {"a", "a"}}, 60.0), ContractError);
    }
    SECTION("constant must be positive") {
        CHECK_THROWS_AS(rrf_fuse({{"a"}}, 0.0), ContractError);
    }
}

TEST_CASE("rrf is invariant to ranking order and label renaming", "[miner][property]") {
    std::vector<std::vector<std::string>> rankings{{"a", "b", "c", "d"},
                                                   {"c", "a", "d", "b"},
                                                   {"b", "a", "c", "d"}};
    auto base = rrf_fuse(rankings, 60.0);
    auto swapped = rrf_fuse({rankings[2], rankings[0], rankings[1]}, 60.0);
    for (const auto& [id, score] : base) CHECK(swapped.at(id) == score);

    // bijective relabeling a->w, b->x, c->y, d->z
    std::map<std::string, std::string> relabel{{"a", "w"}, {"b", "x"}, {"c", "y"}, {"d", "z"}};
    std::vector<std::vector<std::string>> renamed;
    for (const auto& r : rankings) {
        std::vector<std::string> row;
        for (const auto& id : r) row.push_back(relabel.at(id));
        renamed.push_back(row);
    }
    auto renamed_fused = rrf_fuse(renamed, 60.0);
    for (const auto& [id, score] : base) CHECK(renamed_fused.at(relabel.at(id)) == score);
}

TEST_CASE("stand-in scorers are deterministic and sane", "[miner]") {
    Scorer graded = graded_overlap_scorer();
    Scorer likelihood = query_likelihood_scorer();
    std::string q = "alpha beta gamma delta";
    SECTION("graded classification emits grades 0..3") {
        CHECK(graded.score(q, "alpha beta gamma delta extra") == 3.0);
        CHECK(graded.score(q, "alpha beta filler words here") == 2.0);
        CHECK(graded.score(q, "alpha only here") == 1.0);
        CHECK(graded.score(q, "nothing shared at all") == 0.0);
    }
    SECTION("query likelihood rises with term coverage") {
        double full = likelihood.score(q, "alpha beta gamma delta");
        double half = likelihood.score(q, "alpha beta unrelated stuff");
        double none = likelihood.score(q, "totally unrelated stuff here");
        CHECK(full > half);
        CHECK(half > none);
    }
    SECTION("deterministic") {
        CHECK(graded.score(q, "alpha beta") == graded.score(q, "alpha beta"));
        CHECK(likelihood.score(q, "alpha beta") == likelihood.score(q, "alpha beta"));
    }
}

TEST_CASE("mining with corpus of exactly k+1 docs picks the fused-lowest", "[miner]") {
    Checkpoint model = mining_model();
    // query shares 3, 2, 1, 0 terms with the four candidates; both scorers are
    // lexical, so the fused-lowest is the zero-overlap passage.
    std::vector<TrainingExample> dataset{{"question answering", "alpha beta gamma delta",
                                          "alpha beta gamma delta full answer", std::nullopt,
                                          "d"}};
    std::vector<std::pair<std::string, std::string>> corpus{
        {"pos", "alpha beta gamma delta full answer"},
        {"n3", "alpha beta gamma padding words"},
        {"n2", "alpha beta padding padding words"},
        {"n1", "alpha padding padding padding words"},
        {"n0", "padding padding padding padding words"},
    };
    MineOptions opts;
    opts.k = 4;
    auto result = mine_hard_negatives(model, dataset, {graded_overlap_scorer(), query_likelihood_scorer()},
                                      opts, corpus, quiet());
    REQUIRE(result.report.size() == 1);
    const MineRecord& rec = result.report[0];
    CHECK_FALSE(rec.skipped);
    CHECK(rec.topk.size() == 4);
    CHECK(rec.selected == "n0");
    CHECK(result.dataset[0].hard_negative == "padding padding padding padding words");
}

TEST_CASE("k=1 selects the single nearest non-positive neighbor", "[miner]") {
    Checkpoint model = mining_model();
    std::vector<TrainingExample> dataset{
        {"qa", "tell me about granite", "granite is an igneous rock", std::nullopt, "d"},
        {"qa", "tell me about maple", "maple is a deciduous tree", std::nullopt, "d"},
    };
    MineOptions opts;
    opts.k = 1;
    auto result = mine_hard_negatives(model, dataset,
                                      {graded_overlap_scorer(), query_likelihood_scorer()}, opts,
                                      std::nullopt, quiet());
    // with k=1 the choice is the top retrieved candidate, whatever the scorers say
    Embedder embedder = embedder_from(model);
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        REQUIRE(result.report[i].topk.size() == 1);
        CHECK(result.report[i].selected == result.report[i].topk[0]);
        CHECK(result.dataset[i].hard_negative.has_value());
        CHECK(*result.dataset[i].hard_negative != dataset[i].positive);
    }
}

TEST_CASE("mined negative is never the positive and mining is deterministic",
          "[miner][property]") {
    Checkpoint model = mining_model(3);
    Rng rng(83);
    std::vector<TrainingExample> dataset;
    for (int i = 0; i < 12; ++i) {
        std::string topic = "topic" + std::to_string(i);
        dataset.push_back({"qa", "find " + topic + " word" + std::to_string(rng.uniform_int(20)),
                           topic + " body text " + std::to_string(rng.uniform_int(20)),
                           std::nullopt, "d"});
    }
    MineOptions opts;
    opts.k = 3;
    auto a = mine_hard_negatives(model, dataset, {graded_overlap_scorer(), query_likelihood_scorer()},
                                 opts, std::nullopt, quiet());
    auto b = mine_hard_negatives(model, dataset, {graded_overlap_scorer(), query_likelihood_scorer()},
                                 opts, std::nullopt, quiet());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        REQUIRE(a.dataset[i].hard_negative.has_value());
        CHECK(*a.dataset[i].hard_negative != a.dataset[i].positive);
        CHECK(a.report[i].selected == b.report[i].selected);
        CHECK(*a.dataset[i].hard_negative == *b.dataset[i].hard_negative);
    }
}

TEST_CASE("mining against an external corpus handles gaps", "[miner]") {
    Checkpoint model = mining_model();
    std::vector<TrainingExample> dataset{
        {"qa", "about granite rocks", "granite is an igneous rock", std::nullopt, "d"},
        {"qa", "about basalt rocks", "basalt is not in this corpus", std::nullopt, "d"},
    };
    std::vector<std::pair<std::string, std::string>> corpus{
        {"g", "granite is an igneous rock"},
        {"m", "maple is a deciduous tree"},
        {"f", "falcons are fast birds"},
    };
    MineOptions opts;
    opts.k = 5;  // larger than available candidates
    std::vector<std::string> warnings;
    auto result = mine_hard_negatives(model, dataset,
                                      {graded_overlap_scorer(), query_likelihood_scorer()}, opts,
                                      corpus, [&](const std::string& w) { warnings.push_back(w); });
    CHECK(result.dataset[0].hard_negative.has_value());
    CHECK(result.report[0].note.find("smaller than k") != std::string::npos);
    CHECK(result.report[1].skipped);
    CHECK_FALSE(result.dataset[1].hard_negative.has_value());
    CHECK(result.report[1].note.find("positive not present") != std::string::npos);
    CHECK_FALSE(warnings.empty());
}

TEST_CASE("mining requires a model trained without hard negatives", "[miner]") {
    Checkpoint model = mining_model();
    model.hard_negatives_used = true;
    std::vector<TrainingExample> dataset{
        {"qa", "query text here", "positive text here", std::nullopt, "d"},
        {"qa", "other query text", "other positive text", std::nullopt, "d"},
    };
    MineOptions opts;
    opts.k = 1;
    CHECK_THROWS_AS(mine_hard_negatives(model, dataset, {graded_overlap_scorer()}, opts,
                                        std::nullopt, quiet()),
                    ContractError);
    opts.force = true;
    CHECK_NOTHROW(mine_hard_negatives(model, dataset, {graded_overlap_scorer()}, opts,
                                      std::nullopt, quiet()));
}

// Unit-scale version of the selection-rule equivalence: an independent
// brute-force re-implementation of retrieve -> score -> rank -> fuse ->
// argmin must agree exactly.
TEST_CASE("selection rule matches an independent re-implementation", "[miner][property]") {
    Checkpoint model = mining_model(7);
    Embedder embedder = embedder_from(model);
    Rng rng(97);
    std::vector<Scorer> scorers{graded_overlap_scorer(), query_likelihood_scorer()};

    for (int trial = 0; trial < 3; ++trial) {
        std::vector<TrainingExample> dataset;
        for (int i = 0; i < 8; ++i) {
            std::string noise = " filler" + std::to_string(rng.uniform_int(6));
            dataset.push_back({"qa",
                               "query topic" + std::to_string(i) + noise,
                               "passage topic" + std::to_string(i) + " body" +
                                   std::to_string(rng.uniform_int(4)),
                               std::nullopt, "d"});
        }
        MineOptions opts;
        opts.k = 4;
        opts.rrf_constant = 60.0;
        auto result = mine_hard_negatives(model, dataset, scorers, opts, std::nullopt, quiet());

        // independent reconstruction
        std::vector<std::pair<std::string, std::string>> docs;
        std::set<std::string> seen;
        for (const auto& ex : dataset) {
            if (seen.count(ex.positive)) continue;
            seen.insert(ex.positive);
            char id[16];
            std::snprintf(id, sizeof(id), "d%06zu", docs.size());
            docs.emplace_back(id, ex.positive);
        }
        for (std::size_t qi = 0; qi < dataset.size(); ++qi) {
            const auto& ex = dataset[qi];
            Embedding qe = embedder.embed(ex.query, ex.task);
            std::vector<std::pair<double, std::string>> sims;
            for (const auto& [id, text] : docs) {
                if (text == ex.positive) continue;
                Embedding de = embedder.embed(text);
                double dot = 0, nq = 0, nd = 0;
                for (std::int64_t j = 0; j < qe.vector.numel(); ++j) {
                    dot += static_cast<double>(qe.vector[j]) * de.vector[j];
                    nq += static_cast<double>(qe.vector[j]) * qe.vector[j];
                    nd += static_cast<double>(de.vector[j]) * de.vector[j];
                }
                sims.emplace_back(dot / std::sqrt(nq * nd), id);
            }
            std::sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
                if (a.first != b.first) return a.first > b.first;
                return a.second < b.second;
            });
            std::size_t k = std::min<std::size_t>(4, sims.size());
            std::vector<std::string> topk;
            for (std::size_t i = 0; i < k; ++i) topk.push_back(sims[i].second);

            std::map<std::string, double> fused;
            for (const auto& id : topk) fused[id] = 0;
            std::map<std::string, std::string> text_of;
            for (const auto& [id, text] : docs) text_of[id] = text;
            for (const auto& scorer : scorers) {
                std::vector<std::pair<double, std::size_t>> scored;
                for (std::size_t i = 0; i < topk.size(); ++i)
                    scored.emplace_back(scorer.score(ex.query, text_of[topk[i]]), i);
                std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
                    if (a.first != b.first) return a.first > b.first;
                    return a.second < b.second;
                });
                for (std::size_t r = 0; r < scored.size(); ++r)
                    fused[topk[scored[r].second]] += 1.0 / (60.0 + static_cast<double>(r + 1));
            }
            std::string worst = topk.front();
            for (const auto& id : topk) {
                double fw = fused[worst], fc = fused[id];
                if (fc < fw || (fc == fw && id > worst)) worst = id;
            }
            INFO("trial " << trial << " query " << qi);
            REQUIRE(result.report[qi].selected == worst);
        }
    }
}
