// embedkit command-line tool: train / soup / mine / embed / eval / report.
//
// Every command reads one JSON config (all keys defaulted, see
// default_config below), applies --set key=value overrides, and writes its
// artifacts plus a run manifest (resolved config, seed, input hashes) into
// --out.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "embedkit/embedkit.hpp"

namespace fs = std::filesystem;
using embedkit::json;

namespace {

json default_config() {
    return json{
        {"seed", 0},
        {"threads", 1},
        {"encoder",
         {{"vocab_buckets", 4096},
          {"max_seq_len", 64},
          {"model_dim", 64},
          {"num_layers", 2},
          {"num_heads", 4},
          {"ff_dim", 128},
          {"output_dim", 64},
          {"mrl_dims", {16, 32, 64}},
          {"use_positional", true}}},
        {"prefinetune",
         {{"steps", 2000},
          {"batch_size", 64},
          {"learning_rate", 2e-3},
          {"warmup_steps", 100},
          {"eval_every", 0},
          {"loss", {{"temperature", 0.05}, {"mrl_dims", json::array()}, {"use_hard_negatives", false}}}}},
        {"finetune",
         {{"steps", 500},
          {"batch_size", 16},
          {"learning_rate", 1e-3},
          {"warmup_steps", 50},
          {"eval_every", 0},
          {"loss", {{"temperature", 0.05}, {"mrl_dims", json::array()}, {"use_hard_negatives", true}}}}},
        {"mine", {{"k", 5}, {"rrf_constant", 60.0}}},
        {"eval", {{"default_k", 10}, {"default_token_budget", 5000}}}};
}

// Merge `patch` into `base`, requiring every patched key to already exist.
void merge_existing(json& base, const json& patch, const std::string& prefix) {
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!base.contains(it.key()))
            throw embedkit::ConfigError("unknown config key: " + path);
        if (base[it.key()].is_object() && it.value().is_object()) {
            merge_existing(base[it.key()], it.value(), path);
        } else {
            base[it.key()] = it.value();
        }
    }
}

void apply_set_override(json& cfg, const std::string& kv) {
    auto eq = kv.find('=');
    if (eq == std::string::npos)
        throw embedkit::ConfigError("--set expects key=value, got: " + kv);
    std::string key = kv.substr(0, eq);
    std::string value = kv.substr(eq + 1);
    json* node = &cfg;
    std::size_t pos = 0;
    while (true) {
        std::size_t dot = key.find('.', pos);
        std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
        if (!node->contains(part))
            throw embedkit::ConfigError("--set references unknown config key: " + key);
        node = &(*node)[part];
        if (dot == std::string::npos) break;
        pos = dot + 1;
    }
    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::exception&) {
        parsed = value;  // bare strings pass through
    }
    *node = parsed;
}

json load_resolved_config(const std::string& config_path, const std::vector<std::string>& sets) {
    json cfg = default_config();
    if (!config_path.empty()) {
        json file;
        try {
            file = json::parse(embedkit::read_file(config_path));
        } catch (const json::exception& e) {
            throw embedkit::ParseError("config " + config_path + ": " + e.what());
        }
        merge_existing(cfg, file, "");
    }
    for (const auto& kv : sets) apply_set_override(cfg, kv);
    return cfg;
}

embedkit::EncoderConfig encoder_from_json(const json& e) {
    embedkit::EncoderConfig cfg;
    cfg.vocab_buckets = e.at("vocab_buckets").get<std::int64_t>();
    cfg.max_seq_len = e.at("max_seq_len").get<std::int64_t>();
    cfg.model_dim = e.at("model_dim").get<std::int64_t>();
    cfg.num_layers = e.at("num_layers").get<std::int64_t>();
    cfg.num_heads = e.at("num_heads").get<std::int64_t>();
    cfg.ff_dim = e.at("ff_dim").get<std::int64_t>();
    cfg.output_dim = e.at("output_dim").get<std::int64_t>();
    cfg.mrl_dims = e.at("mrl_dims").get<std::vector<std::int64_t>>();
    cfg.use_positional = e.at("use_positional").get<bool>();
    cfg.validate();
    return cfg;
}

embedkit::TrainConfig train_from_json(const json& t, embedkit::Stage stage, std::uint64_t seed) {
    embedkit::TrainConfig cfg;
    cfg.stage = stage;
    cfg.steps = t.at("steps").get<std::int64_t>();
    cfg.batch_size = t.at("batch_size").get<std::int64_t>();
    cfg.learning_rate = t.at("learning_rate").get<float>();
    cfg.warmup_steps = t.at("warmup_steps").get<std::int64_t>();
    cfg.eval_every = t.at("eval_every").get<std::int64_t>();
    cfg.seed = seed;
    const json& l = t.at("loss");
    cfg.loss.temperature = l.at("temperature").get<float>();
    cfg.loss.mrl_dims = l.at("mrl_dims").get<std::vector<std::int64_t>>();
    cfg.loss.use_hard_negatives = l.at("use_hard_negatives").get<bool>();
    cfg.validate();
    return cfg;
}

std::string hash_hex(std::uint64_t h) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "fnv64:%016llx", static_cast<unsigned long long>(h));
    return buf;
}

struct RunOutput {
    fs::path dir;

    explicit RunOutput(const std::string& out) : dir(out) {
        if (out.empty()) throw embedkit::ConfigError("--out is required");
        fs::create_directories(dir);
    }

    std::string path(const std::string& name) const { return (dir / name).string(); }
};

void write_run_manifest(const RunOutput& out, const std::string& command, const json& config,
                        std::uint64_t seed, const std::vector<std::string>& inputs,
                        const std::vector<std::string>& outputs, json extra = json::object()) {
    json inputs_json = json::object();
    for (const auto& p : inputs) inputs_json[p] = hash_hex(embedkit::file_hash(p));
    json m{{"command", command},
           {"config", config},
           {"config_hash", hash_hex(embedkit::fnv1a64(config.dump()))},
           {"seed", seed},
           {"inputs", inputs_json},
           {"outputs", outputs}};
    for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
    embedkit::write_file_atomic(out.path("run_manifest.json"), m.dump(2) + "\n");
}

// ---- subcommand bodies ----

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> sets;
    std::string out;
    std::int64_t seed = -1;  // -1 = take from config
    int threads = 0;         // 0 = take from config

    void attach(CLI::App* cmd, bool needs_out = true) {
        cmd->add_option("--config", config_path, "JSON config file");
        cmd->add_option("--set", sets, "override config key (key=value), repeatable");
        auto* out_opt = cmd->add_option("--out", out, "output directory");
        if (needs_out) out_opt->required();
        cmd->add_option("--seed", seed, "seed override");
        cmd->add_option("--threads", threads, "worker thread cap");
    }

    json resolve() const {
        json cfg = load_resolved_config(config_path, sets);
        if (seed >= 0) cfg["seed"] = seed;
        if (threads > 0) cfg["threads"] = threads;
        return cfg;
    }
};

int cmd_train(const CommonArgs& common, const std::string& stage_str,
              const std::string& manifest_path, const std::string& init_path) {
    json cfg = common.resolve();
    embedkit::Stage stage = embedkit::parse_stage(stage_str);
    if (stage == embedkit::Stage::finetune && init_path.empty())
        throw embedkit::ConfigError("--stage finetune requires --init <checkpoint>");
    std::uint64_t seed = cfg.at("seed").get<std::uint64_t>();
    embedkit::TrainConfig tc = train_from_json(cfg.at(embedkit::stage_name(stage)), stage, seed);
    embedkit::EncoderConfig enc = encoder_from_json(cfg.at("encoder"));

    std::optional<embedkit::Checkpoint> init;
    if (!init_path.empty()) init = embedkit::load_checkpoint(init_path);

    embedkit::DatasetManifest manifest = embedkit::DatasetManifest::load(manifest_path);
    RunOutput out(common.out);
    auto result = embedkit::train_from_manifest(init, tc, enc, manifest);

    std::string ckpt_path = out.path("checkpoint.ekpt");
    embedkit::save_checkpoint(result.checkpoint, ckpt_path);
    embedkit::write_file_atomic(out.path("loss_history.txt"),
                                embedkit::format_loss_history(result.loss_history));

    std::vector<std::string> inputs{manifest_path};
    for (const auto& d : manifest.datasets)
        if (d.stage == stage) inputs.push_back(d.path);
    if (!init_path.empty()) inputs.push_back(init_path);
    json extra{{"stage", stage_str},
               {"hard_negative_rows", result.hard_negative_rows},
               {"final_loss", result.loss_history.back().second},
               {"checkpoint_param_hash", hash_hex(embedkit::checkpoint_param_hash(result.checkpoint))}};
    write_run_manifest(out, "train", cfg, seed, inputs,
                       {ckpt_path, out.path("loss_history.txt")}, extra);
    std::cout << "trained " << stage_str << " for " << tc.steps << " steps; final loss "
              << result.loss_history.back().second << "\n"
              << "checkpoint: " << ckpt_path << "\n";
    return 0;
}

int cmd_soup(const CommonArgs& common, const std::vector<std::string>& ingredients,
             const std::vector<double>& weights) {
    json cfg = common.resolve();
    embedkit::SoupSpec spec;
    spec.ingredient_paths = ingredients;
    spec.weights = weights;
    RunOutput out(common.out);
    embedkit::Checkpoint souped = embedkit::soup(spec);
    std::string ckpt_path = out.path("soup.ekpt");
    embedkit::save_checkpoint(souped, ckpt_path);

    json ing = json::array();
    for (std::size_t i = 0; i < ingredients.size(); ++i) {
        embedkit::Checkpoint c = embedkit::load_checkpoint(ingredients[i]);
        ing.push_back({{"path", ingredients[i]},
                       {"weight", weights.empty() ? 1.0 : weights[i]},
                       {"file_hash", hash_hex(embedkit::file_hash(ingredients[i]))},
                       {"param_hash", hash_hex(embedkit::checkpoint_param_hash(c))}});
    }
    json manifest{{"ingredients", ing},
                  {"output", ckpt_path},
                  {"output_param_hash", hash_hex(embedkit::checkpoint_param_hash(souped))}};
    embedkit::write_file_atomic(out.path("soup_manifest.json"), manifest.dump(2) + "\n");
    write_run_manifest(out, "soup", cfg, cfg.at("seed").get<std::uint64_t>(), ingredients,
                       {ckpt_path, out.path("soup_manifest.json")});
    std::cout << "souped " << ingredients.size() << " checkpoint(s) -> " << ckpt_path << "\n";
    return 0;
}

int cmd_mine(const CommonArgs& common, const std::string& ckpt_path, const std::string& data_path,
             const std::string& corpus_path, std::int64_t k_flag, double constant_flag,
             bool force) {
    json cfg = common.resolve();
    embedkit::MineOptions opts;
    opts.k = k_flag > 0 ? k_flag : cfg.at("mine").at("k").get<std::int64_t>();
    opts.rrf_constant =
        constant_flag > 0 ? constant_flag : cfg.at("mine").at("rrf_constant").get<double>();
    opts.force = force;
    opts.threads = cfg.at("threads").get<int>();

    embedkit::Checkpoint model = embedkit::load_checkpoint(ckpt_path);
    auto dataset = embedkit::load_dataset(data_path, fs::path(data_path).stem().string());
    std::optional<std::vector<std::pair<std::string, std::string>>> corpus;
    if (!corpus_path.empty()) {
        std::vector<std::pair<std::string, std::string>> docs;
        for (const auto& j : embedkit::detail::read_jsonl(corpus_path))
            docs.emplace_back(j.at("doc_id").get<std::string>(), j.at("text").get<std::string>());
        corpus = std::move(docs);
    }

    RunOutput out(common.out);
    std::vector<embedkit::Scorer> scorers{embedkit::graded_overlap_scorer(),
                                          embedkit::query_likelihood_scorer()};
    auto result = embedkit::mine_hard_negatives(model, std::move(dataset), scorers, opts, corpus);

    std::string mined_path = out.path("mined.jsonl");
    embedkit::save_dataset(mined_path, result.dataset);
    embedkit::write_file_atomic(out.path("mining_report.jsonl"),
                                embedkit::format_mining_report(result));

    std::vector<std::string> inputs{ckpt_path, data_path};
    if (!corpus_path.empty()) inputs.push_back(corpus_path);
    std::size_t mined = 0;
    for (const auto& ex : result.dataset) mined += ex.hard_negative.has_value();
    write_run_manifest(out, "mine", cfg, cfg.at("seed").get<std::uint64_t>(), inputs,
                       {mined_path, out.path("mining_report.jsonl")},
                       json{{"k", opts.k}, {"rrf_constant", opts.rrf_constant}, {"mined", mined}});
    std::cout << "mined hard negatives for " << mined << "/" << result.dataset.size()
              << " examples -> " << mined_path << "\n";
    return 0;
}

int cmd_embed(const CommonArgs& common, const std::string& ckpt_path, const std::string& input_path,
              const std::string& output_path, const std::string& task, std::int64_t dim) {
    embedkit::Checkpoint model = embedkit::load_checkpoint(ckpt_path);
    embedkit::Embedder embedder = embedkit::embedder_from(model);
    std::optional<std::string> task_opt;
    if (!task.empty()) task_opt = task;

    std::vector<std::string> texts;
    {
        std::ifstream in(input_path);
        if (!in) throw embedkit::IoError("cannot open input: " + input_path);
        std::string line;
        while (std::getline(in, line))
            if (!line.empty()) texts.push_back(line);
    }
    if (texts.empty()) throw embedkit::EmptyInputError("embed: no input texts");

    json cfg = common.resolve();
    auto vecs = embedder.embed_batch(texts, task_opt, cfg.at("threads").get<int>());
    std::string out_text;
    for (auto& e : vecs) {
        embedkit::Embedding final_e =
            dim > 0 ? embedkit::truncate_embedding(e, dim, model.encoder) : std::move(e);
        char buf[32];
        for (std::int64_t i = 0; i < final_e.vector.numel(); ++i) {
            std::snprintf(buf, sizeof(buf), "%.8g", static_cast<double>(final_e.vector[i]));
            if (i) out_text += " ";
            out_text += buf;
        }
        out_text += "\n";
    }
    if (output_path.empty() || output_path == "-") {
        std::cout << out_text;
    } else {
        embedkit::write_file_atomic(output_path, out_text);
    }
    return 0;
}

int cmd_eval(const CommonArgs& common, const std::vector<std::string>& ckpt_paths,
             const std::string& tasks_path) {
    json cfg = common.resolve();
    int threads = cfg.at("threads").get<int>();
    auto tasks = embedkit::load_eval_manifest(tasks_path);
    RunOutput out(common.out);

    std::vector<embedkit::ModelScores> all;
    std::map<std::string, int> stem_uses;
    for (const auto& path : ckpt_paths) {
        embedkit::Checkpoint model = embedkit::load_checkpoint(path);
        embedkit::Embedder embedder = embedkit::embedder_from(model);
        embedkit::ModelScores ms;
        ms.model = fs::path(path).stem().string();
        int uses = ++stem_uses[ms.model];
        if (uses > 1) ms.model += "-" + std::to_string(uses);
        for (const auto& task : tasks) {
            auto run = embedkit::run_task(task, embedder, threads);
            ms.scores.push_back({task.task_id, task.task_type, run.primary});
            std::cout << ms.model << " " << task.task_id << " " << task.metric << " = "
                      << run.primary << "\n";
        }
        all.push_back(std::move(ms));
    }
    std::string results_path = out.path("results.json");
    embedkit::write_file_atomic(results_path, embedkit::model_scores_to_json(all).dump(2) + "\n");

    std::vector<std::string> inputs{tasks_path};
    for (const auto& p : ckpt_paths) inputs.push_back(p);
    write_run_manifest(out, "eval", cfg, cfg.at("seed").get<std::uint64_t>(), inputs,
                       {results_path});
    std::cout << "results: " << results_path << "\n";
    return 0;
}

int cmd_report(const CommonArgs& common, const std::vector<std::string>& results_paths) {
    json cfg = common.resolve();
    std::vector<embedkit::ModelScores> all;
    for (const auto& p : results_paths) {
        json j;
        try {
            j = json::parse(embedkit::read_file(p));
        } catch (const json::exception& e) {
            throw embedkit::ParseError("results " + p + ": " + e.what());
        }
        for (auto& ms : embedkit::model_scores_from_json(j)) all.push_back(std::move(ms));
    }
    embedkit::EvalReport rep = embedkit::aggregate(all);
    RunOutput out(common.out);
    std::string md = embedkit::render_report_markdown(rep);
    embedkit::write_file_atomic(out.path("report.md"), md);
    embedkit::write_file_atomic(out.path("report.json"),
                                embedkit::report_to_json(rep).dump(2) + "\n");
    write_run_manifest(out, "report", cfg, cfg.at("seed").get<std::uint64_t>(), results_paths,
                       {out.path("report.md"), out.path("report.json")});
    std::cout << md;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"embedkit: desk-scale embedding model training and evaluation"};
    app.require_subcommand(1);

    CommonArgs train_args, soup_args, mine_args, embed_args, eval_args, report_args;

    auto* train = app.add_subcommand("train", "run one training stage");
    std::string stage_str, manifest_path, init_path;
    train->add_option("--stage", stage_str, "prefinetune|finetune")->required();
    train->add_option("--manifest", manifest_path, "dataset manifest JSON")->required();
    train->add_option("--init", init_path, "initial checkpoint (required for finetune)");
    train_args.attach(train);

    auto* soup = app.add_subcommand("soup", "average checkpoint parameters");
    std::vector<std::string> ingredients;
    std::vector<double> weights;
    soup->add_option("--ingredients", ingredients, "ingredient checkpoints")->required();
    soup->add_option("--weights", weights, "per-ingredient weights (default uniform)");
    soup_args.attach(soup);

    auto* mine = app.add_subcommand("mine", "mine hard negatives for a dataset");
    std::string mine_ckpt, mine_data, mine_corpus;
    std::int64_t mine_k = 0;
    double mine_constant = 0;
    bool mine_force = false;
    mine->add_option("--checkpoint", mine_ckpt, "initial model checkpoint")->required();
    mine->add_option("--data", mine_data, "dataset JSONL to fill")->required();
    mine->add_option("--corpus", mine_corpus, "optional external corpus JSONL (doc_id, text)");
    mine->add_option("--k", mine_k, "top-k neighbors to score");
    mine->add_option("--rrf-constant", mine_constant, "RRF constant");
    mine->add_flag("--force", mine_force, "allow a model trained with hard negatives");
    mine_args.attach(mine);

    auto* embed = app.add_subcommand("embed", "embed texts, one per line");
    std::string embed_ckpt, embed_in, embed_out_path, embed_task;
    std::int64_t embed_dim = 0;
    embed->add_option("--checkpoint", embed_ckpt, "model checkpoint")->required();
    embed->add_option("--input", embed_in, "input text file")->required();
    embed->add_option("--output", embed_out_path, "output file (default stdout)");
    embed->add_option("--task", embed_task, "task prompt for queries");
    embed->add_option("--dim", embed_dim, "truncate to this MRL sub-dimension");
    embed_args.attach(embed, /*needs_out=*/false);

    auto* eval = app.add_subcommand("eval", "run benchmark tasks for checkpoints");
    std::vector<std::string> eval_ckpts;
    std::string eval_tasks;
    eval->add_option("--checkpoint", eval_ckpts, "model checkpoint(s)")->required();
    eval->add_option("--tasks", eval_tasks, "eval task manifest JSON")->required();
    eval_args.attach(eval);

    auto* report = app.add_subcommand("report", "aggregate eval results into tables");
    std::vector<std::string> results_paths;
    report->add_option("--results", results_paths, "results.json file(s)")->required();
    report_args.attach(report);

    try {
        app.parse(argc, argv);
        if (train->parsed()) return cmd_train(train_args, stage_str, manifest_path, init_path);
        if (soup->parsed()) return cmd_soup(soup_args, ingredients, weights);
        if (mine->parsed())
            return cmd_mine(mine_args, mine_ckpt, mine_data, mine_corpus, mine_k, mine_constant,
                            mine_force);
        if (embed->parsed())
            return cmd_embed(embed_args, embed_ckpt, embed_in, embed_out_path, embed_task,
                             embed_dim);
        if (eval->parsed()) return cmd_eval(eval_args, eval_ckpts, eval_tasks);
        if (report->parsed()) return cmd_report(report_args, results_paths);
        return 2;
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const embedkit::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const embedkit::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
