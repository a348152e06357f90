#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "crk/analysis.hpp"
#include "crk/data.hpp"
#include "crk/difficulty.hpp"
#include "crk/errors.hpp"
#include "crk/learner.hpp"
#include "crk/metrics.hpp"
#include "crk/scheduler.hpp"

namespace crk::cli {

namespace detail {

inline std::string iso_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    return buf;
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw InputError("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

// Every run leaves a manifest echoing its resolved configuration. The
// timestamp lives here and only here, so all other outputs replay
// byte-identically.
inline void write_manifest(const std::filesystem::path& out_dir, const std::string& subcommand,
                           const nlohmann::json& config, const std::vector<std::string>& outputs) {
    write_json_file(out_dir / "manifest.json", nlohmann::json{{"subcommand", subcommand},
                                                              {"config", config},
                                                              {"timestamp", iso_timestamp()},
                                                              {"outputs", outputs}});
}

inline std::vector<size_t> select_split(const data::Split& split, const std::string& which,
                                        size_t n) {
    if (which == "train") return split.train;
    if (which == "valid") return split.valid;
    if (which == "test") return split.test;
    if (which == "all") {
        std::vector<size_t> all(n);
        for (size_t i = 0; i < n; ++i) all[i] = i;
        return all;
    }
    throw InputError("unknown split: " + which);
}

// Index of the dataset position of every pair id.
inline std::map<int64_t, size_t> pair_positions(const data::Dataset& ds) {
    std::map<int64_t, size_t> out;
    for (size_t i = 0; i < ds.pairs.size(); ++i) out.emplace(ds.pairs[i].pair_id, i);
    return out;
}

}  // namespace detail

struct CommonOpts {
    std::string out_dir;
    uint64_t seed = 0;
    unsigned threads = 1;
};

inline void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--out-dir", opts.out_dir, "Output directory")->required();
    cmd->add_option("--seed", opts.seed, "Global RNG seed")->capture_default_str();
    cmd->add_option("--threads", opts.threads, "Worker thread bound")->capture_default_str();
}

// ---- gen ----

struct GenOpts {
    CommonOpts common;
    size_t n_pairs = 2000;
    int64_t feature_dim = 16;
    int32_t vocab_size = 50;
    double noise_min = 0.0;
    double noise_max = 0.9;
    size_t concepts = 12;
    size_t caption_min = 4;
    size_t caption_max = 8;
    size_t det_k = 0;
    size_t det_n = 0;
    bool with_lm_logprobs = false;
    size_t joint_dim = 0;
};

inline int cmd_gen(const GenOpts& o) {
    data::SynthConfig cfg;
    cfg.n_pairs = o.n_pairs;
    cfg.feature_dim = o.feature_dim;
    cfg.vocab_size = o.vocab_size;
    cfg.noise_min = o.noise_min;
    cfg.noise_max = o.noise_max;
    cfg.seed = o.common.seed;
    cfg.n_concepts = o.concepts;
    cfg.caption_min = o.caption_min;
    cfg.caption_max = o.caption_max;
    cfg.det_k = o.det_k;
    cfg.det_n = o.det_n;
    cfg.with_lm_logprobs = o.with_lm_logprobs;
    cfg.joint_dim = o.joint_dim;

    const std::filesystem::path out_dir(o.common.out_dir);
    std::filesystem::create_directories(out_dir);
    const data::Dataset ds = data::generate_synthetic(cfg);
    data::save_dataset(out_dir / "dataset.jsonl", ds);
    detail::write_manifest(out_dir, "gen",
                           {{"n_pairs", o.n_pairs},
                            {"feature_dim", o.feature_dim},
                            {"vocab_size", o.vocab_size},
                            {"noise_min", o.noise_min},
                            {"noise_max", o.noise_max},
                            {"concepts", o.concepts},
                            {"caption_min", o.caption_min},
                            {"caption_max", o.caption_max},
                            {"det_k", o.det_k},
                            {"det_n", o.det_n},
                            {"with_lm_logprobs", o.with_lm_logprobs},
                            {"joint_dim", o.joint_dim},
                            {"seed", o.common.seed},
                            {"threads", o.common.threads}},
                           {"dataset.jsonl"});
    std::cout << "wrote " << (out_dir / "dataset.jsonl").string() << " (" << ds.pairs.size()
              << " pairs)\n";
    return 0;
}

// ---- score ----

struct ScoreOpts {
    CommonOpts common;
    std::string dataset;
    std::string method;
    double lambda = 0.6;
    int det_k = 10;
    int det_n = 1600;
    std::string head;
    std::string model;
};

inline int cmd_score(const ScoreOpts& o) {
    const data::Dataset ds = data::load_dataset(o.dataset);
    const difficulty::Method method = difficulty::parse_method(o.method);

    std::vector<difficulty::DifficultyScore> scores;
    switch (method) {
        case difficulty::Method::SimiCosine:
            scores = difficulty::score_simi_cosine(ds);
            break;
        case difficulty::Method::SimiSigmoid: {
            if (o.head.empty()) throw InputError("simi-sigmoid requires --head");
            scores = difficulty::score_simi_sigmoid(ds, data::load_head(o.head));
            break;
        }
        case difficulty::Method::Addup: {
            difficulty::AddupConfig cfg{o.lambda, o.det_k, o.det_n};
            scores = difficulty::score_addup(ds, cfg);
            break;
        }
        case difficulty::Method::Bootstrap: {
            if (o.model.empty()) throw InputError("bootstrap requires --model");
            const learner::Checkpoint ckpt = learner::load_checkpoint(o.model);
            scores = difficulty::score_bootstrap(ds, ckpt.model, o.common.threads);
            break;
        }
    }

    const std::filesystem::path out_dir(o.common.out_dir);
    std::filesystem::create_directories(out_dir);
    difficulty::write_scores(out_dir / "scores.jsonl", scores);
    detail::write_manifest(out_dir, "score",
                           {{"dataset", o.dataset},
                            {"method", o.method},
                            {"lambda", o.lambda},
                            {"det_k", o.det_k},
                            {"det_n", o.det_n},
                            {"head", o.head},
                            {"model", o.model},
                            {"seed", o.common.seed},
                            {"threads", o.common.threads}},
                           {"scores.jsonl"});
    std::cout << "wrote " << scores.size() << " scores (" << o.method << ")\n";
    return 0;
}

// ---- train ----

struct TrainOpts {
    CommonOpts common;
    std::string dataset;
    std::string scores;
    size_t buckets = 5;
    int patience = 3;
    double min_delta = 0.0;
    size_t max_epochs = 120;
    bool strict_termination = false;
    std::string baseline;  // "", "vanilla", "anti", "random"
    double lr = 3e-4;
    int batch_size = 10;
    int32_t embed_dim = 16;
    std::string metric = "cider";
    size_t max_len = 20;
    double train_frac = 0.8;
    double valid_frac = 0.1;
};

inline int cmd_train(const TrainOpts& o) {
    if (!o.baseline.empty() && o.baseline != "vanilla" && o.baseline != "anti" &&
        o.baseline != "random")
        throw InputError("unknown baseline: " + o.baseline);

    const data::Dataset ds = data::load_dataset(o.dataset);
    const data::Split split =
        data::split_indices(ds.pairs.size(), o.common.seed, o.train_frac, o.valid_frac);
    const size_t n_train = split.train.size();
    if (n_train == 0) throw InputError("empty training split");

    // Order over train positions 0..n_train-1, easy to hard.
    std::vector<size_t> order;
    size_t num_buckets = o.buckets;
    if (o.baseline == "vanilla") {
        num_buckets = 1;
        order.resize(n_train);
        for (size_t i = 0; i < n_train; ++i) order[i] = i;
    } else if (o.baseline == "random") {
        order.resize(n_train);
        for (size_t i = 0; i < n_train; ++i) order[i] = i;
        Rng rng(seed_stream(o.common.seed, 0x5a5a));
        rng.shuffle(order);
    } else {
        if (o.scores.empty()) throw InputError("--scores is required unless --baseline vanilla");
        const auto all_scores = difficulty::load_scores(o.scores);
        std::map<int64_t, difficulty::DifficultyScore> by_id;
        for (const auto& s : all_scores) by_id[s.pair_id] = s;
        std::vector<difficulty::DifficultyScore> train_scores;
        train_scores.reserve(n_train);
        for (size_t pos : split.train) {
            const int64_t pair_id = ds.pairs[pos].pair_id;
            auto it = by_id.find(pair_id);
            if (it == by_id.end())
                throw InputError("scores do not cover training pair " + std::to_string(pair_id));
            train_scores.push_back(it->second);
        }
        order = difficulty::rank_by_difficulty(train_scores);
        if (o.baseline == "anti") std::reverse(order.begin(), order.end());
    }
    const sched::Curriculum curriculum = sched::curriculum_from_order(order, num_buckets);

    learner::LearnerConfig lcfg;
    lcfg.lr = o.lr;
    lcfg.batch_size = o.batch_size;
    lcfg.seed = o.common.seed;
    lcfg.embed_dim = o.embed_dim;

    sched::BabyStepConfig bcfg;
    bcfg.max_epochs = o.max_epochs;
    bcfg.patience = o.patience;
    bcfg.min_delta = o.min_delta;
    bcfg.seed = o.common.seed;
    bcfg.strict_termination = o.strict_termination;
    bcfg.metric = sched::parse_metric(o.metric);
    bcfg.decode_max_len = o.max_len;

    const sched::TrainResult result =
        sched::run_babystep(ds, curriculum, split.train, split.valid, lcfg, bcfg);

    const std::filesystem::path out_dir(o.common.out_dir);
    std::filesystem::create_directories(out_dir);
    learner::save_checkpoint(out_dir / "checkpoint", result.model, ds.vocab, o.common.seed);
    detail::write_json_file(out_dir / "report.json", sched::to_json(result.report));

    // The realized order as pair ids, easiest first, plus the bucket sizes.
    nlohmann::json order_ids = nlohmann::json::array();
    for (size_t pos : curriculum.order) order_ids.push_back(ds.pairs[split.train[pos]].pair_id);
    nlohmann::json bucket_sizes = nlohmann::json::array();
    for (const auto& [begin, end] : curriculum.buckets) bucket_sizes.push_back(end - begin);
    detail::write_json_file(out_dir / "curriculum.json", {{"buckets", num_buckets},
                                                          {"bucket_sizes", bucket_sizes},
                                                          {"order", order_ids}});

    detail::write_manifest(out_dir, "train",
                           {{"dataset", o.dataset},
                            {"scores", o.scores},
                            {"buckets", num_buckets},
                            {"patience", o.patience},
                            {"min_delta", o.min_delta},
                            {"max_epochs", o.max_epochs},
                            {"strict_termination", o.strict_termination},
                            {"baseline", o.baseline},
                            {"lr", o.lr},
                            {"batch_size", o.batch_size},
                            {"embed_dim", o.embed_dim},
                            {"metric", o.metric},
                            {"max_len", o.max_len},
                            {"train_frac", o.train_frac},
                            {"valid_frac", o.valid_frac},
                            {"seed", o.common.seed},
                            {"threads", o.common.threads}},
                           {"checkpoint", "report.json", "curriculum.json"});
    std::cout << "best " << o.metric << " " << result.report.best_metric << " at epoch "
              << result.report.best_epoch << " (" << result.report.termination_reason << " after "
              << result.report.records.size() << " epochs)\n";
    return 0;
}

// ---- eval ----

struct EvalOpts {
    CommonOpts common;
    std::string checkpoint;
    std::string dataset;
    std::string split = "test";
    bool per_example = false;
    size_t max_len = 20;
    double train_frac = 0.8;
    double valid_frac = 0.1;
};

inline int cmd_eval(const EvalOpts& o) {
    const learner::Checkpoint ckpt = learner::load_checkpoint(o.checkpoint);
    const data::Dataset ds = data::load_dataset(o.dataset);
    if (ckpt.vocab != ds.vocab)
        throw InputError(
            "checkpoint vocabulary differs from the dataset's; use `analyze --mode cross` for "
            "cross-dataset evaluation");
    if (ckpt.model.feature_dim != ds.feature_dim)
        throw InputError("feature-dimension mismatch between checkpoint and dataset");

    const data::Split split =
        data::split_indices(ds.pairs.size(), o.common.seed, o.train_frac, o.valid_frac);
    const std::vector<size_t> indices = detail::select_split(split, o.split, ds.pairs.size());
    if (indices.empty()) throw InputError("selected split is empty");

    const auto images = data::distinct_images(ds, indices);
    std::vector<std::pair<int64_t, const data::CaptionPair*>> ordered(images.begin(), images.end());
    std::vector<metrics::TokenSeq> decoded(ordered.size());
    parallel_for(ordered.size(), o.common.threads, [&](size_t i) {
        decoded[i] = sched::detail::strip_trailing_eos(
            learner::greedy_decode(ckpt.model, ordered[i].second->features, o.max_len));
    });

    metrics::Candidates cands;
    metrics::References refs;
    for (size_t i = 0; i < ordered.size(); ++i) {
        cands[ordered[i].first] = decoded[i];
        refs[ordered[i].first] = ds.references.at(ordered[i].first);
    }
    const metrics::MetricReport report = metrics::evaluate(cands, refs, o.per_example);

    const std::filesystem::path out_dir(o.common.out_dir);
    std::filesystem::create_directories(out_dir);
    metrics::save_candidates(out_dir / "candidates.jsonl", cands);
    detail::write_json_file(out_dir / "metrics.json", metrics::to_json(report));
    detail::write_manifest(out_dir, "eval",
                           {{"checkpoint", o.checkpoint},
                            {"dataset", o.dataset},
                            {"split", o.split},
                            {"per_example", o.per_example},
                            {"max_len", o.max_len},
                            {"train_frac", o.train_frac},
                            {"valid_frac", o.valid_frac},
                            {"seed", o.common.seed},
                            {"threads", o.common.threads}},
                           {"candidates.jsonl", "metrics.json"});
    std::cout << "bleu4 " << report.bleu4 << " cider " << report.cider << " over "
              << cands.size() << " images\n";
    return 0;
}

// ---- compare ----

struct CompareOpts {
    CommonOpts common;
    std::string cands_a;
    std::string cands_b;
    std::string refs;
    size_t resamples = 1000;
    size_t size = 0;
};

inline int cmd_compare(const CompareOpts& o) {
    const metrics::Candidates a = metrics::load_candidates(o.cands_a);
    const metrics::Candidates b = metrics::load_candidates(o.cands_b);
    const data::Dataset refs_ds = data::load_dataset(o.refs);
    metrics::References refs;
    for (const auto& [image_id, cand] : a) {
        auto it = refs_ds.references.find(image_id);
        if (it == refs_ds.references.end())
            throw InputError("refs dataset has no references for image " +
                             std::to_string(image_id));
        refs[image_id] = it->second;
    }

    analysis::BootstrapConfig cfg;
    cfg.n_resamples = o.resamples;
    cfg.resample_size = o.size;
    cfg.seed = o.common.seed;
    cfg.threads = o.common.threads;
    const analysis::SignificanceResult result = analysis::paired_bootstrap_test(a, b, refs, cfg);

    const std::filesystem::path out_dir(o.common.out_dir);
    std::filesystem::create_directories(out_dir);
    detail::write_json_file(out_dir / "significance.json", analysis::to_json(result));
    detail::write_manifest(out_dir, "compare",
                           {{"cands_a", o.cands_a},
                            {"cands_b", o.cands_b},
                            {"refs", o.refs},
                            {"resamples", o.resamples},
                            {"size", result.resample_size},
                            {"seed", o.common.seed},
                            {"threads", o.common.threads}},
                           {"significance.json"});
    std::cout << "p(bleu4) " << result.p_bleu4 << " p(cider) " << result.p_cider << " over "
              << result.n_resamples << " resamples\n";
    return 0;
}

// ---- analyze ----

struct AnalyzeOpts {
    CommonOpts common;
    std::string mode;
    // divide
    std::string per_example;
    size_t levels = 4;
    // dispersion
    std::vector<std::string> score_files;
    // cross
    std::string checkpoint;
    std::string dataset;
    std::string split = "test";
    size_t max_len = 20;
    double train_frac = 0.8;
    double valid_frac = 0.1;
};

inline int cmd_analyze(const AnalyzeOpts& o) {
    const std::filesystem::path out_dir(o.common.out_dir);
    std::filesystem::create_directories(out_dir);

    if (o.mode == "divide") {
        if (o.per_example.empty()) throw InputError("divide mode requires --per-example");
        std::ifstream in(o.per_example);
        if (!in) throw InputError("cannot open metric report: " + o.per_example);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw InputError("malformed metric report: " + std::string(e.what()));
        }
        const metrics::MetricReport report = metrics::report_from_json(j);
        if (report.per_example.empty())
            throw InputError("metric report has no per-example scores (re-run eval with "
                             "--per-example)");
        std::map<int64_t, double> per_image_bleu;
        for (const auto& e : report.per_example) per_image_bleu[e.image_id] = e.bleu4;
        const auto levels = analysis::divide_by_difficulty(per_image_bleu, o.levels);
        nlohmann::json out{{"levels", levels}};
        detail::write_json_file(out_dir / "levels.json", out);
        detail::write_manifest(out_dir, "analyze",
                               {{"mode", o.mode},
                                {"per_example", o.per_example},
                                {"levels", o.levels},
                                {"seed", o.common.seed},
                                {"threads", o.common.threads}},
                               {"levels.json"});
        std::cout << "divided " << per_image_bleu.size() << " images into " << o.levels
                  << " levels\n";
        return 0;
    }

    if (o.mode == "dispersion") {
        if (o.score_files.size() < 2)
            throw InputError("dispersion mode requires at least two --scores tables");
        std::vector<std::pair<std::string, std::vector<double>>> tables;
        std::map<std::string, int> label_counts;
        for (const auto& file : o.score_files) {
            const auto scores = difficulty::load_scores(file);
            if (scores.empty()) throw InputError("empty score table: " + file);
            std::string label = difficulty::method_name(scores.front().method);
            const int n = ++label_counts[label];
            if (n > 1) label += "-" + std::to_string(n);
            std::vector<double> values;
            values.reserve(scores.size());
            for (const auto& s : scores) values.push_back(s.difficulty);
            tables.emplace_back(label, std::move(values));
        }
        const auto ranked = analysis::compare_dispersion(tables);
        detail::write_json_file(out_dir / "dispersion.json", analysis::to_json(ranked));
        std::vector<std::string> outputs{"dispersion.json"};
        for (const auto& entry : ranked) {
            const std::string name = "hist_" + entry.method + ".csv";
            std::ofstream csv(out_dir / name, std::ios::trunc);
            if (!csv) throw InputError("cannot write histogram " + name);
            csv << "bin_left,count\n";
            for (size_t b = 0; b < entry.histogram.size(); ++b)
                csv << (static_cast<double>(b) / 20.0) << "," << entry.histogram[b] << "\n";
            outputs.push_back(name);
        }
        detail::write_manifest(out_dir, "analyze",
                               {{"mode", o.mode},
                                {"scores", o.score_files},
                                {"seed", o.common.seed},
                                {"threads", o.common.threads}},
                               outputs);
        std::cout << "ranked " << ranked.size() << " methods by dispersion\n";
        return 0;
    }

    if (o.mode == "cross") {
        if (o.checkpoint.empty() || o.dataset.empty())
            throw InputError("cross mode requires --checkpoint and --dataset");
        const learner::Checkpoint ckpt = learner::load_checkpoint(o.checkpoint);
        const data::Dataset foreign = data::load_dataset(o.dataset);
        const data::Split split =
            data::split_indices(foreign.pairs.size(), o.common.seed, o.train_frac, o.valid_frac);
        const std::vector<size_t> indices =
            detail::select_split(split, o.split, foreign.pairs.size());
        if (indices.empty()) throw InputError("selected split is empty");
        const metrics::MetricReport report = analysis::cross_dataset_eval(
            ckpt.model, ckpt.vocab, foreign, indices, o.max_len, o.common.threads);
        detail::write_json_file(out_dir / "metrics.json", metrics::to_json(report));
        detail::write_manifest(out_dir, "analyze",
                               {{"mode", o.mode},
                                {"checkpoint", o.checkpoint},
                                {"dataset", o.dataset},
                                {"split", o.split},
                                {"max_len", o.max_len},
                                {"train_frac", o.train_frac},
                                {"valid_frac", o.valid_frac},
                                {"seed", o.common.seed},
                                {"threads", o.common.threads}},
                               {"metrics.json"});
        std::cout << "cross-dataset bleu4 " << report.bleu4 << " cider " << report.cider << "\n";
        return 0;
    }

    throw InputError("unknown analyze mode: " + o.mode + " (expected divide|dispersion|cross)");
}

// ---- dispatcher ----

inline int run_cli(std::vector<std::string> args) {
    CLI::App app{"curriculum-learning harness for desk-scale caption models"};
    app.require_subcommand(1);

    GenOpts gen;
    CLI::App* gen_cmd = app.add_subcommand("gen", "Generate a synthetic dataset");
    add_common(gen_cmd, gen.common);
    gen_cmd->add_option("--n-pairs", gen.n_pairs, "Number of pairs")->capture_default_str();
    gen_cmd->add_option("--feature-dim", gen.feature_dim, "Image feature dimension")->capture_default_str();
    gen_cmd->add_option("--vocab", gen.vocab_size, "Vocabulary size")->capture_default_str();
    gen_cmd->add_option("--noise-min", gen.noise_min, "Noise schedule start")->capture_default_str();
    gen_cmd->add_option("--noise-max", gen.noise_max, "Noise schedule end")->capture_default_str();
    gen_cmd->add_option("--concepts", gen.concepts, "Latent concept count")->capture_default_str();
    gen_cmd->add_option("--caption-min", gen.caption_min, "Shortest gold caption")->capture_default_str();
    gen_cmd->add_option("--caption-max", gen.caption_max, "Longest gold caption")->capture_default_str();
    gen_cmd->add_option("--det-k", gen.det_k, "Emit det_probs with K boxes (0 = off)")->capture_default_str();
    gen_cmd->add_option("--det-n", gen.det_n, "det_probs class count (0 = off)")->capture_default_str();
    gen_cmd->add_flag("--with-lm-logprobs", gen.with_lm_logprobs, "Emit lm_logprobs");
    gen_cmd->add_option("--joint-dim", gen.joint_dim, "joint_repr dimension (0 = off)")
        ->capture_default_str();

    ScoreOpts score;
    CLI::App* score_cmd = app.add_subcommand("score", "Score pair difficulty");
    add_common(score_cmd, score.common);
    score_cmd->add_option("--dataset", score.dataset, "Dataset file")->required();
    score_cmd->add_option("--method", score.method, "simi-cos|simi-sigmoid|addup|bootstrap")
        ->required();
    score_cmd->add_option("--lambda", score.lambda, "Addup visual weight")->capture_default_str();
    score_cmd->add_option("--det-k", score.det_k, "Addup top-K boxes")->capture_default_str();
    score_cmd->add_option("--det-n", score.det_n, "Addup object classes")->capture_default_str();
    score_cmd->add_option("--head", score.head, "Affine head matrix file (simi-sigmoid)");
    score_cmd->add_option("--model", score.model, "Checkpoint directory (bootstrap)");

    TrainOpts train;
    CLI::App* train_cmd = app.add_subcommand("train", "Train under a Baby Step curriculum");
    add_common(train_cmd, train.common);
    train_cmd->add_option("--dataset", train.dataset, "Dataset file")->required();
    train_cmd->add_option("--scores", train.scores, "Difficulty score table");
    train_cmd->add_option("--buckets", train.buckets, "Curriculum bucket count L")->capture_default_str();
    train_cmd->add_option("--patience", train.patience, "Plateau patience in epochs")->capture_default_str();
    train_cmd->add_option("--min-delta", train.min_delta, "Minimum metric improvement")->capture_default_str();
    train_cmd->add_option("--max-epochs", train.max_epochs, "Epoch budget")->capture_default_str();
    train_cmd->add_flag("--strict-termination", train.strict_termination,
                        "Always train to max-epochs after the last merge");
    train_cmd->add_option("--baseline", train.baseline, "vanilla|anti|random");
    train_cmd->add_option("--lr", train.lr, "SGD learning rate")->capture_default_str();
    train_cmd->add_option("--batch-size", train.batch_size, "Mini-batch size")->capture_default_str();
    train_cmd->add_option("--embed-dim", train.embed_dim, "Token embedding dimension")->capture_default_str();
    train_cmd->add_option("--metric", train.metric, "Validation metric (cider|bleu4)")->capture_default_str();
    train_cmd->add_option("--max-len", train.max_len, "Decode length cap")->capture_default_str();
    train_cmd->add_option("--train-frac", train.train_frac, "Training fraction")->capture_default_str();
    train_cmd->add_option("--valid-frac", train.valid_frac, "Validation fraction")->capture_default_str();

    EvalOpts eval;
    CLI::App* eval_cmd = app.add_subcommand("eval", "Decode and score a checkpoint");
    add_common(eval_cmd, eval.common);
    eval_cmd->add_option("--checkpoint", eval.checkpoint, "Checkpoint directory")->required();
    eval_cmd->add_option("--dataset", eval.dataset, "Dataset file")->required();
    eval_cmd->add_option("--split", eval.split, "train|valid|test|all")->capture_default_str();
    eval_cmd->add_flag("--per-example", eval.per_example, "Emit per-image scores");
    eval_cmd->add_option("--max-len", eval.max_len, "Decode length cap")->capture_default_str();
    eval_cmd->add_option("--train-frac", eval.train_frac, "Training fraction")->capture_default_str();
    eval_cmd->add_option("--valid-frac", eval.valid_frac, "Validation fraction")->capture_default_str();

    CompareOpts compare;
    CLI::App* compare_cmd =
        app.add_subcommand("compare", "Paired bootstrap significance test of two systems");
    add_common(compare_cmd, compare.common);
    compare_cmd->add_option("--cands-a", compare.cands_a, "System A candidates")->required();
    compare_cmd->add_option("--cands-b", compare.cands_b, "System B candidates")->required();
    compare_cmd->add_option("--refs", compare.refs, "Dataset file providing references")
        ->required();
    compare_cmd->add_option("--resamples", compare.resamples, "Bootstrap resample count")->capture_default_str();
    compare_cmd->add_option("--size", compare.size, "Resample size (0 = test-set size)")->capture_default_str();

    AnalyzeOpts analyze;
    CLI::App* analyze_cmd = app.add_subcommand("analyze", "Divided sets, dispersion, cross-dataset");
    add_common(analyze_cmd, analyze.common);
    analyze_cmd->add_option("--mode", analyze.mode, "divide|dispersion|cross")->required();
    analyze_cmd->add_option("--per-example", analyze.per_example,
                            "Metric report with per-example scores (divide)");
    analyze_cmd->add_option("--levels", analyze.levels, "Difficulty level count (divide)")->capture_default_str();
    analyze_cmd->add_option("--scores", analyze.score_files, "Score tables (dispersion)");
    analyze_cmd->add_option("--checkpoint", analyze.checkpoint, "Checkpoint directory (cross)");
    analyze_cmd->add_option("--dataset", analyze.dataset, "Foreign dataset file (cross)");
    analyze_cmd->add_option("--split", analyze.split, "Foreign split to decode (cross)")->capture_default_str();
    analyze_cmd->add_option("--max-len", analyze.max_len, "Decode length cap (cross)")->capture_default_str();
    analyze_cmd->add_option("--train-frac", analyze.train_frac, "Training fraction (cross)")->capture_default_str();
    analyze_cmd->add_option("--valid-frac", analyze.valid_frac, "Validation fraction (cross)")->capture_default_str();

    try {
        std::reverse(args.begin(), args.end());  // CLI11 consumes from the back
        app.parse(args);
        if (gen_cmd->parsed()) return cmd_gen(gen);
        if (score_cmd->parsed()) return cmd_score(score);
        if (train_cmd->parsed()) return cmd_train(train);
        if (eval_cmd->parsed()) return cmd_eval(eval);
        if (compare_cmd->parsed()) return cmd_compare(compare);
        if (analyze_cmd->parsed()) return cmd_analyze(analyze);
        std::cerr << app.help();
        return 2;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const InputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace crk::cli
