#pragma once

// Command implementations behind the CLI: each one assembles the pipeline
// pieces from a RunConfig, runs, and writes its artifacts (plus a
// run.json capturing the fully resolved configuration and seeds, from
// which any run can be re-executed bitwise).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "dream/config.hpp"
#include "dream/evaluator.hpp"
#include "dream/model.hpp"
#include "dream/trainer.hpp"

namespace dream {

using nlohmann::json;

inline json config_to_json(const RunConfig& c) {
    json j;
    j["data"] = {{"events", c.events_path},
                 {"social", c.social_path},
                 {"dataset", c.dataset_path},
                 {"granularity", to_string(c.granularity)},
                 {"split_train", c.split_train},
                 {"split_valid", c.split_valid},
                 {"split_test", c.split_test}};
    j["model"] = {{"d", c.d},
                  {"k_real", c.k_real},
                  {"k_virtual", c.k_virtual},
                  {"variant", c.variant},
                  {"sessions", c.sessions},
                  {"aggregate_projected", c.aggregate_projected},
                  {"literal_linear_gates", c.literal_linear_gates},
                  {"predict_from_tie_state", c.predict_from_tie_state},
                  {"batch_norm", c.batch_norm},
                  {"per_session_params", c.per_session_params},
                  {"attention_depth", c.attention_depth},
                  {"head", c.head},
                  {"max_session_items", c.max_session_items}};
    j["glove"] = {{"dim", c.glove_dim},
                  {"epochs", c.glove_epochs},
                  {"lr", c.glove_lr},
                  {"x_max", c.glove_x_max},
                  {"alpha", c.glove_alpha}};
    j["train"] = {{"lr", c.lr},
                  {"batch_size", c.batch_size},
                  {"max_epochs", c.max_epochs},
                  {"patience", c.patience},
                  {"l2_lambda", c.l2_lambda},
                  {"clip_norm", c.clip_norm},
                  {"negatives_per_positive", c.negatives_per_positive},
                  {"resample_friends_per_epoch", c.resample_friends_per_epoch},
                  {"validation_negatives", c.validation_negatives}};
    j["eval"] = {{"negatives", c.eval_negatives}, {"repeats", c.eval_repeats}, {"k", c.eval_k}};
    j["run"] = {{"seed", c.seed}, {"threads", c.threads}};
    return j;
}

inline RunConfig config_from_json(const json& j) {
    RunConfig c;
    const auto& data = j.at("data");
    c.events_path = data.at("events").get<std::string>();
    c.social_path = data.at("social").get<std::string>();
    c.dataset_path = data.at("dataset").get<std::string>();
    c.granularity = granularity_from_string(data.at("granularity").get<std::string>());
    c.split_train = data.at("split_train").get<double>();
    c.split_valid = data.at("split_valid").get<double>();
    c.split_test = data.at("split_test").get<double>();
    const auto& model = j.at("model");
    c.d = model.at("d").get<std::size_t>();
    c.k_real = model.at("k_real").get<std::size_t>();
    c.k_virtual = model.at("k_virtual").get<std::size_t>();
    c.variant = model.at("variant").get<std::string>();
    c.sessions = model.at("sessions").get<int>();
    c.aggregate_projected = model.at("aggregate_projected").get<bool>();
    c.literal_linear_gates = model.at("literal_linear_gates").get<bool>();
    c.predict_from_tie_state = model.at("predict_from_tie_state").get<bool>();
    c.batch_norm = model.at("batch_norm").get<bool>();
    c.per_session_params = model.at("per_session_params").get<bool>();
    c.attention_depth = model.at("attention_depth").get<int>();
    c.head = model.at("head").get<std::string>();
    c.max_session_items = model.at("max_session_items").get<std::size_t>();
    const auto& glove = j.at("glove");
    c.glove_dim = glove.at("dim").get<std::size_t>();
    c.glove_epochs = glove.at("epochs").get<int>();
    c.glove_lr = glove.at("lr").get<double>();
    c.glove_x_max = glove.at("x_max").get<double>();
    c.glove_alpha = glove.at("alpha").get<double>();
    const auto& train = j.at("train");
    c.lr = train.at("lr").get<double>();
    c.batch_size = train.at("batch_size").get<std::size_t>();
    c.max_epochs = train.at("max_epochs").get<int>();
    c.patience = train.at("patience").get<int>();
    c.l2_lambda = train.at("l2_lambda").get<double>();
    c.clip_norm = train.at("clip_norm").get<double>();
    c.negatives_per_positive = train.at("negatives_per_positive").get<std::size_t>();
    c.resample_friends_per_epoch = train.at("resample_friends_per_epoch").get<bool>();
    c.validation_negatives = train.at("validation_negatives").get<std::size_t>();
    const auto& eval = j.at("eval");
    c.eval_negatives = eval.at("negatives").get<std::size_t>();
    c.eval_repeats = eval.at("repeats").get<int>();
    c.eval_k = eval.at("k").get<int>();
    const auto& run = j.at("run");
    c.seed = run.at("seed").get<std::uint64_t>();
    c.threads = run.at("threads").get<int>();
    return c;
}

inline void write_text(const std::string& path, const std::string& contents) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << contents;
    if (!out) throw IoError("short write to " + path);
}

inline void write_run_json(const std::string& out_dir, const std::string& command,
                           const RunConfig& cfg, const json& extras = json::object()) {
    json j;
    j["command"] = command;
    j["config"] = config_to_json(cfg);
    for (auto it = extras.begin(); it != extras.end(); ++it) j[it.key()] = it.value();
    write_text(out_dir + "/run.json", j.dump(2) + "\n");
}

struct RunJson {
    std::string command;
    RunConfig config;
    json extras;
};

inline RunJson load_run_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open run file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ParseError("bad run.json " + path + ": " + e.what());
    }
    RunJson out;
    out.command = j.at("command").get<std::string>();
    out.config = config_from_json(j.at("config"));
    out.extras = json::object();
    for (auto it = j.begin(); it != j.end(); ++it)
        if (it.key() != "command" && it.key() != "config") out.extras[it.key()] = it.value();
    return out;
}

// ---- pipeline assembly ----------------------------------------------------------

struct Prepared {
    Dataset ds;
    SplitAssignment sp;
    std::vector<SessionSequence> train_sessions;
    std::vector<std::set<int>> interacted;
    SocialContext social;
    GraphCache graphs;
    VariantConfig variant;

    Prepared() = default;
    Prepared(const Prepared&) = delete;
    Prepared& operator=(const Prepared&) = delete;
};

inline Dataset load_input_dataset(const RunConfig& cfg) {
    if (!cfg.dataset_path.empty()) return load_dataset(cfg.dataset_path);
    return ingest(cfg.events_path, cfg.social_path);
}

// GraphCache keeps pointers into the Prepared object, so it lives on the
// heap with a stable address.
inline std::unique_ptr<Prepared> prepare(const RunConfig& cfg) {
    auto p = std::make_unique<Prepared>();
    p->variant = cfg.variant_config();
    p->ds = load_input_dataset(cfg);
    p->sp = split(p->ds, {cfg.split_train, cfg.split_valid, cfg.split_test},
                  mix_seed(cfg.seed, hash_name("split")));
    p->train_sessions = segment_sessions(p->ds, cfg.granularity, &p->sp, SplitLabel::train);
    p->interacted = p->ds.interacted_sets();
    p->social = build_social_context(p->ds, p->sp, p->variant, cfg.completion_config(),
                                     cfg.glove_config());
    p->graphs = GraphCache(&p->social, &p->train_sessions);
    return p;
}

// ---- artifact writers -------------------------------------------------------------

inline json stats_to_json(const DatasetStats& s) {
    return json{{"users", s.users},
                {"items", s.items},
                {"events", s.events},
                {"social_links", s.social_links},
                {"avg_sessions_per_user", s.avg_sessions_per_user},
                {"avg_real_friends_per_user", s.avg_real_friends_per_user}};
}

inline json metrics_to_json(const MetricsReport& report, const std::string& split_name) {
    json j;
    j["split"] = split_name;
    j["k"] = report.k;
    j["negatives"] = report.negatives;
    j["repeats"] = report.per_repeat.size();
    j["evaluated_instances"] = report.evaluated;
    j["skipped_instances"] = report.skipped;
    j["recall_at_k"] = report.mean.recall_at_k;
    j["ndcg"] = report.mean.ndcg;
    j["mrr"] = report.mean.mrr;
    j["ndcg_at_k"] = report.mean.ndcg_at_k;
    json reps = json::array();
    for (const auto& m : report.per_repeat)
        reps.push_back({{"recall_at_k", m.recall_at_k},
                        {"ndcg", m.ndcg},
                        {"mrr", m.mrr},
                        {"ndcg_at_k", m.ndcg_at_k}});
    j["per_repeat"] = reps;
    if (report.per_repeat.size() != 10)
        j["protocol_note"] = "non-standard repeat count (protocol reports the mean of 10)";
    return j;
}

// Aligned text table in the R@K, NDCG, MRR column order.
inline std::string metrics_table(const std::vector<std::pair<std::string, RepeatMetrics>>& rows,
                                 int k) {
    char buf[160];
    std::string out;
    std::snprintf(buf, sizeof(buf), "%-14s %10s %10s %10s %10s\n", "model",
                  ("R@" + std::to_string(k)).c_str(), "NDCG", "MRR",
                  ("NDCG@" + std::to_string(k)).c_str());
    out += buf;
    for (const auto& [name, m] : rows) {
        std::snprintf(buf, sizeof(buf), "%-14s %10.5f %10.5f %10.5f %10.5f\n", name.c_str(),
                      m.recall_at_k, m.ndcg, m.mrr, m.ndcg_at_k);
        out += buf;
    }
    return out;
}

inline std::string history_csv(const TrainResult& result) {
    std::string out = "epoch,train_loss,val_recall_at_k,seconds\n";
    char buf[128];
    for (const auto& rec : result.history) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.3f\n", rec.epoch, rec.train_loss,
                      rec.val_recall, rec.seconds);
        out += buf;
    }
    return out;
}

inline std::string attention_csv(const std::vector<AttentionRecord>& records,
                                 const Dataset& ds) {
    std::string out = "user,session,neighbor,relation,alpha\n";
    char buf[256];
    for (const auto& r : records) {
        const std::string user = ds.user_ids[static_cast<std::size_t>(r.user)];
        const std::string neighbor =
            r.neighbor < 0 ? "self" : ds.user_ids[static_cast<std::size_t>(r.neighbor)];
        std::snprintf(buf, sizeof(buf), "%s,%d,%s,%s,%.10g\n", user.c_str(), r.session_rank,
                      neighbor.c_str(), r.neighbor < 0 ? "self" : to_string(r.relation), r.alpha);
        out += buf;
    }
    return out;
}

// ---- commands -----------------------------------------------------------------------

inline void ensure_out_dir(const std::string& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + out_dir + ": " + ec.message());
}

// Ingests the TSVs, writes stats.json (the six summary fields) and the
// binary dataset artifact.
inline DatasetStats cmd_ingest(const RunConfig& cfg, const std::string& out_dir) {
    ensure_out_dir(out_dir);
    Dataset ds = load_input_dataset(cfg);
    auto sessions = segment_sessions(ds, cfg.granularity);
    auto st = stats(ds, sessions);
    write_text(out_dir + "/stats.json", stats_to_json(st).dump(2) + "\n");
    save_dataset(ds, out_dir + "/dataset.bin");
    write_run_json(out_dir, "ingest", cfg);
    return st;
}

// Exports the completed per-session ego edges as TSV:
// user, friend, relation, weight, session. Virtual weights are the
// globally softmax-normalized connection strengths.
inline std::size_t cmd_complete(const RunConfig& cfg, const std::string& out_dir) {
    ensure_out_dir(out_dir);
    auto p = prepare(cfg);
    double log_norm = 0.0;
    if (p->variant.use_virtual && p->social.glove.n_users > 0)
        log_norm = virtual_score_log_norm(p->social.glove);

    std::string out = "# user\tfriend\trelation\tweight\tsession\n";
    char buf[256];
    std::size_t edges = 0;
    for (std::size_t u = 0; u < p->ds.n_users(); ++u) {
        const auto& sessions = p->train_sessions[u].sessions;
        for (const Session& s : sessions) {
            const auto& g = p->graphs.get(static_cast<int>(u), s.index - 1);
            for (const Neighbor& nb : g.neighbors) {
                const double weight = nb.relation == Relation::real
                                          ? 1.0
                                          : std::exp(nb.weight - log_norm);
                std::snprintf(buf, sizeof(buf), "%s\t%s\t%s\t%.10g\t%d\n",
                              p->ds.user_ids[u].c_str(),
                              p->ds.user_ids[static_cast<std::size_t>(nb.user)].c_str(),
                              to_string(nb.relation), weight, s.index);
                out += buf;
                ++edges;
            }
        }
    }
    write_text(out_dir + "/edges.tsv", out);
    write_run_json(out_dir, "complete", cfg);
    return edges;
}

struct TrainOutcome {
    TrainResult result;
    std::string checkpoint_path;
    AccessCounters counters; // which social machinery the run touched
};

inline TrainOutcome cmd_train(const RunConfig& cfg, const std::string& out_dir) {
    ensure_out_dir(out_dir);
    write_run_json(out_dir, "train", cfg);
    auto p = prepare(cfg);
    auto store = ParamStore::init(p->ds.n_users(), p->ds.n_items(), cfg.d, p->variant,
                                  mix_seed(cfg.seed, hash_name("params")));
    TrainData data{&p->ds, &p->sp, &p->train_sessions, &p->interacted, &p->graphs,
                   cfg.granularity};
    auto result = train(store, p->variant, data, cfg.train_config());

    TrainOutcome outcome;
    outcome.result = result;
    outcome.checkpoint_path = out_dir + "/best.ckpt";
    outcome.counters = p->social.counters;
    save_checkpoint(store, outcome.checkpoint_path,
                    {{"best_epoch", std::to_string(result.best_epoch)},
                     {"granularity", to_string(cfg.granularity)}});
    write_text(out_dir + "/history.csv", history_csv(result));
    return outcome;
}

struct EvaluateOptions {
    std::string checkpoint_path;
    std::string split = "test";
    std::string dump_attention_path; // empty = no dump
};

inline MetricsReport cmd_evaluate(const RunConfig& cfg, const EvaluateOptions& opts,
                                  const std::string& out_dir) {
    ensure_out_dir(out_dir);
    if (opts.split != "test" && opts.split != "valid")
        throw ConfigError("evaluate: split must be 'test' or 'valid'");
    write_run_json(out_dir, "evaluate", cfg,
                   {{"checkpoint", opts.checkpoint_path}, {"split", opts.split}});

    auto loaded = load_checkpoint(opts.checkpoint_path);
    RunConfig eval_cfg = cfg;
    eval_cfg.variant = variant_name(loaded.store.variant);
    eval_cfg.sessions = loaded.store.variant.sessions;
    auto p = prepare(eval_cfg);
    if (loaded.store.n_users != p->ds.n_users() || loaded.store.n_items != p->ds.n_items())
        throw ConfigError("evaluate: checkpoint was trained on a different dataset (" +
                          std::to_string(loaded.store.n_users) + " users, " +
                          std::to_string(loaded.store.n_items) + " items)");

    const SplitLabel label = opts.split == "test" ? SplitLabel::test : SplitLabel::valid;
    auto instances = enumerate_eval_instances(p->ds, p->sp, p->train_sessions, cfg.granularity,
                                              loaded.store.variant.sessions, label)
                         .instances;
    std::vector<AttentionRecord> attention;
    auto report = evaluate_model(loaded.store, loaded.store.variant, p->ds, p->train_sessions,
                                 p->interacted, p->graphs, instances, cfg.eval_config(label),
                                 opts.dump_attention_path.empty() ? nullptr : &attention);

    write_text(out_dir + "/metrics.json", metrics_to_json(report, opts.split).dump(2) + "\n");
    write_text(out_dir + "/metrics.txt",
               metrics_table({{eval_cfg.variant, report.mean}}, report.k));
    if (!opts.dump_attention_path.empty())
        write_text(opts.dump_attention_path, attention_csv(attention, p->ds));
    return report;
}

struct AblateRow {
    std::string variant;
    RepeatMetrics metrics;
};

// Trains and evaluates each requested variant with the shared seed and
// writes the combined table (R@K and MRR columns).
inline std::vector<AblateRow> cmd_ablate(const RunConfig& cfg,
                                         const std::vector<std::string>& only,
                                         const std::string& out_dir) {
    ensure_out_dir(out_dir);
    static const std::vector<std::string> all_variants = {
        "dream-r", "dream-v", "dream-gat", "dream-tgru", "dream-s1", "dream-s3", "dream"};
    std::vector<std::string> variants = only.empty() ? all_variants : only;
    for (const auto& v : variants) VariantConfig::from_name(v); // validate names early

    json extras;
    extras["only"] = variants;
    write_run_json(out_dir, "ablate", cfg, extras);

    std::vector<AblateRow> rows;
    for (const std::string& name : variants) {
        RunConfig vc = cfg;
        vc.variant = name;
        if (name == "dream-s1") vc.sessions = 1;
        else if (name == "dream-s3") vc.sessions = 3;
        const std::string subdir = out_dir + "/" + name;
        auto outcome = cmd_train(vc, subdir);

        EvaluateOptions opts;
        opts.checkpoint_path = outcome.checkpoint_path;
        opts.split = "test";
        auto report = cmd_evaluate(vc, opts, subdir + "/eval");
        rows.push_back({name, report.mean});
    }

    std::string tsv = "variant\trecall_at_" + std::to_string(cfg.eval_k) + "\tmrr\n";
    char buf[128];
    for (const auto& row : rows) {
        std::snprintf(buf, sizeof(buf), "%s\t%.5f\t%.5f\n", row.variant.c_str(),
                      row.metrics.recall_at_k, row.metrics.mrr);
        tsv += buf;
    }
    write_text(out_dir + "/ablation.tsv", tsv);
    return rows;
}

} // namespace dream
