// Command-line front end: ingest / complete / train / evaluate / ablate
// subcommands over a TOML config with flag overrides. Every run writes a
// run.json from which it can be re-executed bitwise (--from-run).
//
// Exit codes: 0 ok, 2 configuration or input validation error, 3 runtime
// (training/evaluation) failure.

#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dream/pipeline.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::string from_run;
    std::string out_dir;
    std::vector<std::string> overrides; // section.key=value
    std::optional<std::string> events, social, dataset, granularity, variant;
    std::optional<int> sessions, threads, repeats;
    std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool needs_out = true) {
    cmd->add_option("--config", args.config_path, "TOML configuration file");
    cmd->add_option("--from-run", args.from_run, "re-execute from a run.json");
    auto* out = cmd->add_option("--out", args.out_dir, "output directory");
    if (needs_out) out->required();
    cmd->add_option("--set", args.overrides, "override a config key (section.key=value)");
    cmd->add_option("--events", args.events, "events TSV path");
    cmd->add_option("--social", args.social, "social edges TSV path");
    cmd->add_option("--dataset", args.dataset, "binary dataset artifact path");
    cmd->add_option("--granularity", args.granularity, "session window: week or month");
    cmd->add_option("--variant", args.variant,
                    "model variant (dream, dream-r, dream-v, dream-gat, dream-tgru, "
                    "dream-s1, dream-s3, center-only)");
    cmd->add_option("--sessions", args.sessions, "number of context sessions T");
    cmd->add_option("--seed", args.seed, "root seed for all randomness");
    cmd->add_option("--threads", args.threads, "worker cap for evaluation scoring");
    cmd->add_option("--repeats", args.repeats, "evaluation repeats (protocol default 10)");
}

// defaults -> run.json (if --from-run) -> TOML file -> explicit flags.
dream::RunConfig resolve_config(const CommonArgs& args, dream::json* run_extras) {
    dream::RunConfig cfg;
    if (!args.from_run.empty()) {
        auto run = dream::load_run_json(args.from_run);
        cfg = run.config;
        if (run_extras) *run_extras = run.extras;
    }
    if (!args.config_path.empty()) cfg.load_toml(dream::parse_toml_file(args.config_path));
    if (args.events) cfg.set("data", "events", *args.events);
    if (args.social) cfg.set("data", "social", *args.social);
    if (args.dataset) cfg.set("data", "dataset", *args.dataset);
    if (args.granularity) cfg.set("data", "granularity", *args.granularity);
    if (args.variant) cfg.set("model", "variant", *args.variant);
    if (args.sessions) cfg.set("model", "sessions", std::to_string(*args.sessions));
    if (args.seed) cfg.set("run", "seed", std::to_string(*args.seed));
    if (args.threads) cfg.set("run", "threads", std::to_string(*args.threads));
    if (args.repeats) cfg.set("eval", "repeats", std::to_string(*args.repeats));
    for (const std::string& kv : args.overrides) {
        const std::size_t dot = kv.find('.');
        const std::size_t eq = kv.find('=');
        if (dot == std::string::npos || eq == std::string::npos || eq < dot)
            throw dream::ConfigError("--set expects section.key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, dot), kv.substr(dot + 1, eq - dot - 1), kv.substr(eq + 1));
    }
    cfg.validate();
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"DREAM social session-based recommender"};
    app.require_subcommand(1);

    CommonArgs ingest_args, complete_args, train_args, eval_args, ablate_args;
    std::string eval_checkpoint, eval_split = "test", eval_dump_attention;
    std::string ablate_only;

    auto* ingest = app.add_subcommand("ingest", "parse logs, write stats and dataset artifact");
    add_common(ingest, ingest_args);

    auto* complete = app.add_subcommand("complete", "export completed ego-network edges");
    add_common(complete, complete_args);

    auto* train = app.add_subcommand("train", "train a model and save the best checkpoint");
    add_common(train, train_args);

    auto* evaluate = app.add_subcommand("evaluate", "rank held-out targets with a checkpoint");
    add_common(evaluate, eval_args);
    evaluate->add_option("--checkpoint", eval_checkpoint, "checkpoint to evaluate");
    evaluate->add_option("--split", eval_split, "'test' or 'valid'");
    evaluate->add_option("--dump-attention", eval_dump_attention,
                         "write per-(user,session) attention weights to this CSV");

    auto* ablate = app.add_subcommand("ablate", "train and evaluate the variant family");
    add_common(ablate, ablate_args);
    ablate->add_option("--only", ablate_only, "comma-separated variant subset");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*ingest) {
            auto cfg = resolve_config(ingest_args, nullptr);
            auto st = dream::cmd_ingest(cfg, ingest_args.out_dir);
            std::printf("ingested %zu users, %zu items, %zu events, %zu social links\n", st.users,
                        st.items, st.events, st.social_links);
            std::printf("stats: %s/stats.json  dataset: %s/dataset.bin\n",
                        ingest_args.out_dir.c_str(), ingest_args.out_dir.c_str());
        } else if (*complete) {
            auto cfg = resolve_config(complete_args, nullptr);
            const std::size_t edges = dream::cmd_complete(cfg, complete_args.out_dir);
            std::printf("exported %zu completed edges to %s/edges.tsv\n", edges,
                        complete_args.out_dir.c_str());
        } else if (*train) {
            auto cfg = resolve_config(train_args, nullptr);
            auto outcome = dream::cmd_train(cfg, train_args.out_dir);
            std::printf("trained %s for %zu epochs (best epoch %d, val R@%d %.5f)\n",
                        cfg.variant.c_str(), outcome.result.history.size(),
                        outcome.result.best_epoch, cfg.eval_k, outcome.result.best_metric);
            std::printf("access counters: %llu social edge reads, %llu virtual-friend reads\n",
                        static_cast<unsigned long long>(outcome.counters.social_reads),
                        static_cast<unsigned long long>(outcome.counters.glove_reads));
            std::printf("checkpoint: %s\n", outcome.checkpoint_path.c_str());
        } else if (*evaluate) {
            dream::json extras;
            auto cfg = resolve_config(eval_args, &extras);
            dream::EvaluateOptions opts;
            opts.checkpoint_path = eval_checkpoint;
            opts.split = eval_split;
            opts.dump_attention_path = eval_dump_attention;
            if (opts.checkpoint_path.empty() && extras.contains("checkpoint"))
                opts.checkpoint_path = extras["checkpoint"].get<std::string>();
            if (!evaluate->count("--split") && extras.contains("split"))
                opts.split = extras["split"].get<std::string>();
            if (opts.checkpoint_path.empty())
                throw dream::ConfigError("evaluate: --checkpoint is required");
            auto report = dream::cmd_evaluate(cfg, opts, eval_args.out_dir);
            if (report.per_repeat.size() != 10)
                std::printf("note: %zu repeats (non-standard; protocol averages 10)\n",
                            report.per_repeat.size());
            std::printf("%s", dream::metrics_table({{cfg.variant, report.mean}}, report.k).c_str());
        } else if (*ablate) {
            dream::json extras;
            auto cfg = resolve_config(ablate_args, &extras);
            std::vector<std::string> only;
            if (!ablate_only.empty()) {
                std::stringstream ss(ablate_only);
                for (std::string item; std::getline(ss, item, ',');)
                    if (!item.empty()) only.push_back(item);
            } else if (extras.contains("only")) {
                only = extras["only"].get<std::vector<std::string>>();
            }
            auto rows = dream::cmd_ablate(cfg, only, ablate_args.out_dir);
            std::printf("%-14s %10s %10s\n", "variant",
                        ("R@" + std::to_string(cfg.eval_k)).c_str(), "MRR");
            for (const auto& row : rows)
                std::printf("%-14s %10.5f %10.5f\n", row.variant.c_str(), row.metrics.recall_at_k,
                            row.metrics.mrr);
        }
    } catch (const dream::ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const dream::ParseError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const dream::IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "runtime failure: %s\n", e.what());
        return 3;
    }
    return 0;
}
