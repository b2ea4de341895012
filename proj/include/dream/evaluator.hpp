#pragma once

// Ranking evaluation under the sampled-negative protocol: each target
// event ranks its positive item against freshly sampled unrated items,
// the procedure repeats with new samples, and Recall@K / NDCG / MRR are
// averaged over repeats. Ties rank against the positive, making every
// reported number a reproducible lower bound.

#include <cmath>
#include <cstdint>
#include <functional>
#include <set>
#include <span>
#include <thread>
#include <vector>

#include "dream/dataset.hpp"
#include "dream/error.hpp"
#include "dream/model.hpp"
#include "dream/rng.hpp"

namespace dream {

// 1-based rank of scores[0] among all candidates; ties count against it.
inline int rank_of_positive(std::span<const double> scores) {
    if (scores.empty()) throw EvalError("rank: no scores");
    for (double s : scores)
        if (!std::isfinite(s)) throw EvalError("rank: non-finite candidate score");
    const double pos = scores[0];
    int rank = 1;
    for (std::size_t i = 1; i < scores.size(); ++i)
        if (scores[i] >= pos) ++rank;
    return rank;
}

struct RepeatMetrics {
    double recall_at_k = 0.0;
    double ndcg = 0.0; // full-list: 1 / log2(rank + 1)
    double mrr = 0.0;
    double ndcg_at_k = 0.0;
};

struct MetricsReport {
    std::vector<RepeatMetrics> per_repeat;
    RepeatMetrics mean;
    std::size_t evaluated = 0;
    std::size_t skipped = 0;
    int k = 10;
    std::size_t negatives = 1000;
    // Candidate lists per (instance, repeat), positive first; only kept
    // when EvalConfig::keep_details is set (test/debug).
    std::vector<std::vector<std::vector<int>>> candidate_details;
};

// Per-repeat metric means over instances, then the arithmetic mean of the
// repeats. A single relevant item makes IDCG = 1, so full-list NDCG is
// 1/log2(rank+1) directly.
inline MetricsReport metrics_from_ranks(const std::vector<std::vector<int>>& ranks_per_repeat,
                                        int k = 10) {
    MetricsReport report;
    report.k = k;
    for (const auto& ranks : ranks_per_repeat) {
        RepeatMetrics m;
        for (int rank : ranks) {
            if (rank < 1) throw EvalError("metrics: ranks are 1-based");
            const double gain = 1.0 / std::log2(static_cast<double>(rank) + 1.0);
            m.recall_at_k += rank <= k ? 1.0 : 0.0;
            m.ndcg += gain;
            m.mrr += 1.0 / static_cast<double>(rank);
            m.ndcg_at_k += rank <= k ? gain : 0.0;
        }
        const double n = ranks.empty() ? 1.0 : static_cast<double>(ranks.size());
        m.recall_at_k /= n;
        m.ndcg /= n;
        m.mrr /= n;
        m.ndcg_at_k /= n;
        report.per_repeat.push_back(m);
    }
    const double r = report.per_repeat.empty() ? 1.0 : static_cast<double>(report.per_repeat.size());
    for (const auto& m : report.per_repeat) {
        report.mean.recall_at_k += m.recall_at_k / r;
        report.mean.ndcg += m.ndcg / r;
        report.mean.mrr += m.mrr / r;
        report.mean.ndcg_at_k += m.ndcg_at_k / r;
    }
    return report;
}

struct EvalConfig {
    SplitLabel split_label = SplitLabel::test;
    std::size_t negatives = 1000; // capped by the unrated population per user
    int repeats = 10;
    int k = 10;
    std::uint64_t seed = 1;
    int threads = 1;
    std::size_t max_session_items = 20;
    bool keep_details = false;
};

struct EvalInstance {
    int user = 0;
    std::size_t event_index = 0;
    int pos_item = 0;
    std::vector<int> context_sessions;
};

struct EvalEnumeration {
    std::vector<EvalInstance> instances;
    std::size_t skipped = 0;
};

// Target events in the split whose user has at least one training session
// strictly before the event's window.
inline EvalEnumeration enumerate_eval_instances(const Dataset& ds,
                                                const SplitAssignment& split_labels,
                                                const std::vector<SessionSequence>& train_sessions,
                                                Granularity granularity, int T,
                                                SplitLabel label) {
    EvalEnumeration out;
    for (std::size_t e = 0; e < ds.events.size(); ++e) {
        if (split_labels.labels[e] != label) continue;
        const Event& ev = ds.events[e];
        auto ctx = context_for(train_sessions, ev.user, window_of(ev.ts, granularity), T);
        if (!ctx) {
            ++out.skipped;
            continue;
        }
        out.instances.push_back({ev.user, e, ev.item, std::move(*ctx)});
    }
    return out;
}

// Core protocol loop over a caller-supplied scorer
// (instance index, item) -> score. Negative samples are drawn per
// (instance, repeat) from seeds independent of scorer behavior.
inline MetricsReport evaluate_with(
    const Dataset& ds, const std::vector<std::set<int>>& interacted,
    std::span<const EvalInstance> instances, const EvalConfig& cfg,
    const std::function<double(std::size_t, int)>& scorer) {
    if (instances.empty()) throw EvalError("evaluate: no evaluable instances");
    MetricsReport report;
    std::vector<std::vector<int>> ranks(static_cast<std::size_t>(cfg.repeats));
    if (cfg.keep_details) report.candidate_details.resize(instances.size());

    std::size_t usable = 0;
    for (std::size_t i = 0; i < instances.size(); ++i) {
        const EvalInstance& inst = instances[i];
        const auto& seen = interacted[static_cast<std::size_t>(inst.user)];
        const std::size_t avail = ds.n_items() - seen.size();
        if (avail == 0) {
            ++report.skipped;
            continue;
        }
        ++usable;
        const std::size_t want = std::min(cfg.negatives, avail);
        const double pos_score = scorer(i, inst.pos_item);
        for (int rep = 0; rep < cfg.repeats; ++rep) {
            auto negs = sample_negatives(
                ds, seen, want,
                mix_seed(cfg.seed, hash_name("eval_neg"), inst.event_index,
                         static_cast<std::uint64_t>(rep)));
            std::vector<double> scores;
            scores.reserve(negs.size() + 1);
            scores.push_back(pos_score);
            for (int item : negs) scores.push_back(scorer(i, item));
            ranks[static_cast<std::size_t>(rep)].push_back(rank_of_positive(scores));
            if (cfg.keep_details) {
                std::vector<int> cands;
                cands.push_back(inst.pos_item);
                cands.insert(cands.end(), negs.begin(), negs.end());
                report.candidate_details[i].push_back(std::move(cands));
            }
        }
    }
    if (usable == 0) throw EvalError("evaluate: every instance lacked unrated candidates");

    auto aggregated = metrics_from_ranks(ranks, cfg.k);
    aggregated.evaluated = usable;
    aggregated.skipped = report.skipped;
    aggregated.negatives = cfg.negatives;
    aggregated.candidate_details = std::move(report.candidate_details);
    return aggregated;
}

// Plain (tape-free) ranking score used at evaluation time; mirrors
// score_item arithmetic.
inline double score_value(ParamStore& store, const std::vector<double>& repr, int item) {
    const std::size_t d = store.d;
    const double* v = store.item_emb.data.data() + static_cast<std::size_t>(item) * d;
    if (store.variant.head == RankHead::dot) {
        double acc = 0.0;
        for (std::size_t i = 0; i < d; ++i) acc += repr[i] * v[i];
        return acc;
    }
    double out = store.mlp_out_b.data[0];
    for (std::size_t i = 0; i < d; ++i) {
        double h = store.mlp_hidden_b.data[i];
        for (std::size_t j = 0; j < d; ++j) h += store.mlp_hidden.at(i, j) * repr[j];
        for (std::size_t j = 0; j < d; ++j) h += store.mlp_hidden.at(i, d + j) * v[j];
        out += store.mlp_out.data[i] * (h > 0.0 ? h : 0.0);
    }
    return out;
}

// Full protocol for a trained model: user representations are computed
// once per instance (parallel over a read-only store, results reduced in
// instance order), then every repeat ranks fresh negatives against them.
inline MetricsReport evaluate_model(ParamStore& store, const VariantConfig& variant,
                                    const Dataset& ds,
                                    const std::vector<SessionSequence>& train_sessions,
                                    const std::vector<std::set<int>>& interacted,
                                    GraphCache& graphs, std::span<const EvalInstance> instances,
                                    const EvalConfig& cfg,
                                    std::vector<AttentionRecord>* attention_sink = nullptr) {
    if (instances.empty()) throw EvalError("evaluate: no evaluable instances");
    // Graphs are materialized up front so the parallel phase is read-only.
    for (const EvalInstance& inst : instances)
        for (int s : inst.context_sessions) (void)graphs.get(inst.user, s);

    std::vector<std::vector<double>> reprs(instances.size());
    std::vector<std::vector<AttentionRecord>> sinks(attention_sink ? instances.size() : 0);
    const int n_threads = std::max(1, cfg.threads);
    auto worker = [&](std::size_t begin, std::size_t end) {
        Tape tape;
        for (std::size_t i = begin; i < end; ++i) {
            tape.reset();
            const EvalInstance& inst = instances[i];
            std::vector<const CompletedGraph*> ctx;
            for (int s : inst.context_sessions) ctx.push_back(&graphs.get(inst.user, s));
            Var repr = forward_user(tape, store, variant, train_sessions, inst.user, ctx,
                                    cfg.max_session_items,
                                    attention_sink ? &sinks[i] : nullptr);
            reprs[i] = tape.value_vector(repr);
        }
    };
    if (n_threads == 1 || instances.size() < 2) {
        worker(0, instances.size());
    } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (instances.size() + n_threads - 1) / n_threads;
        for (int t = 0; t < n_threads; ++t) {
            const std::size_t begin = static_cast<std::size_t>(t) * chunk;
            if (begin >= instances.size()) break;
            pool.emplace_back(worker, begin, std::min(begin + chunk, instances.size()));
        }
        for (auto& th : pool) th.join();
    }
    if (attention_sink)
        for (auto& s : sinks)
            attention_sink->insert(attention_sink->end(), s.begin(), s.end());

    return evaluate_with(ds, interacted, instances, cfg,
                         [&](std::size_t i, int item) { return score_value(store, reprs[i], item); });
}

} // namespace dream
