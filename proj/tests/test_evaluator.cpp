#include "doctest.h"

#include <cmath>
#include <sstream>

#include "dream/evaluator.hpp"
#include "oracles.hpp"
#include "temp_files.hpp"

using namespace dream;

namespace {

// 20-ish instance fixture world reused across evaluator tests.
struct EvalWorld {
    Dataset ds;
    SplitAssignment sp;
    std::vector<SessionSequence> train_sessions;
    std::vector<std::set<int>> interacted;
    SocialContext social;
    GraphCache graphs;
    std::vector<EvalInstance> instances;

    explicit EvalWorld(const VariantConfig& variant, std::uint64_t seed = 3) {
        Rng rng(seed);
        std::ostringstream ev, so;
        for (int u = 0; u < 12; ++u) {
            for (int month = 0; month < 4; ++month)
                for (int k = 0; k < 2; ++k)
                    ev << "u" << u << "\ti" << rng.below(25) << "\t"
                       << 86400LL * (3 + month * 31 + static_cast<int>(rng.below(24))) << "\n";
            so << "u" << u << "\tu" << (u + 1) % 12 << "\n";
        }
        testutil::TempDir dir;
        ds = ingest(dir.file("e.tsv", ev.str()), dir.file("s.tsv", so.str()));
        sp = split(ds, {0.7, 0.15, 0.15}, seed);
        train_sessions = segment_sessions(ds, Granularity::month, &sp, SplitLabel::train);
        interacted = ds.interacted_sets();
        CompletionConfig comp;
        comp.k_real = 3;
        comp.k_virtual = 3;
        comp.seed = seed;
        GloveConfig glove;
        glove.dim = 4;
        glove.epochs = 4;
        glove.seed = seed;
        social = build_social_context(ds, sp, variant, comp, glove);
        graphs = GraphCache(&social, &train_sessions);
        instances = enumerate_eval_instances(ds, sp, train_sessions, Granularity::month,
                                             variant.sessions, SplitLabel::test)
                        .instances;
    }
};

} // namespace

TEST_CASE("rank: unique maximum, pessimistic ties, and the sort oracle") {
    std::vector<double> best{5.0, 1.0, 2.0, 3.0};
    CHECK(rank_of_positive(best) == 1);

    std::vector<double> all_equal(1001, 0.25);
    CHECK(rank_of_positive(all_equal) == 1001);

    Rng rng(41);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> scores(1 + rng.below(40));
        for (double& s : scores) s = rng.uniform(-2, 2);
        CHECK(rank_of_positive(scores) == oracles::rank_by_sort(scores));
    }

    std::vector<double> bad{std::nan(""), 1.0};
    CHECK_THROWS_AS(rank_of_positive(bad), EvalError);
}

TEST_CASE("metrics formulas: perfect ranker and the rank-3 case") {
    auto perfect = metrics_from_ranks({{1, 1, 1}, {1, 1, 1}});
    CHECK(perfect.mean.recall_at_k == doctest::Approx(1.0));
    CHECK(perfect.mean.ndcg == doctest::Approx(1.0));
    CHECK(perfect.mean.mrr == doctest::Approx(1.0));

    auto single = metrics_from_ranks({{3}});
    CHECK(single.mean.mrr == doctest::Approx(1.0 / 3.0));
    CHECK(single.mean.ndcg == doctest::Approx(0.5)); // 1/log2(4)
    CHECK(single.mean.ndcg_at_k == doctest::Approx(0.5));
    CHECK(single.mean.recall_at_k == doctest::Approx(1.0));

    auto outside = metrics_from_ranks({{30}});
    CHECK(outside.mean.recall_at_k == doctest::Approx(0.0));
    CHECK(outside.mean.ndcg_at_k == doctest::Approx(0.0));
    CHECK(outside.mean.ndcg > 0.0);
}

TEST_CASE("mean over repeats equals the arithmetic mean of per-repeat values") {
    Rng rng(43);
    std::vector<std::vector<int>> ranks(10);
    for (auto& rep : ranks)
        for (int i = 0; i < 50; ++i) rep.push_back(1 + static_cast<int>(rng.below(1001)));
    auto report = metrics_from_ranks(ranks);
    double recall = 0, ndcg = 0, mrr = 0;
    for (const auto& m : report.per_repeat) {
        recall += m.recall_at_k;
        ndcg += m.ndcg;
        mrr += m.mrr;
    }
    CHECK(std::abs(report.mean.recall_at_k - recall / 10.0) <= 1e-12);
    CHECK(std::abs(report.mean.ndcg - ndcg / 10.0) <= 1e-12);
    CHECK(std::abs(report.mean.mrr - mrr / 10.0) <= 1e-12);
}

TEST_CASE("uniform random scores land at the analytic Recall@10 expectation") {
    // rank is uniform on {1..1001}; E[Recall@10] = 10/1001 ~ 0.00999.
    Rng rng(47);
    std::vector<std::vector<int>> ranks(10);
    for (auto& rep : ranks)
        for (int i = 0; i < 1000; ++i) {
            std::vector<double> scores(1001);
            for (double& s : scores) s = rng.uniform(0, 1);
            rep.push_back(rank_of_positive(scores));
        }
    auto report = metrics_from_ranks(ranks);
    CHECK(std::abs(report.mean.recall_at_k - 10.0 / 1001.0) < 0.003);
}

TEST_CASE("evaluate_with: oracle scorer that always tops the positive") {
    VariantConfig v;
    EvalWorld w(v);
    REQUIRE(!w.instances.empty());
    EvalConfig cfg;
    cfg.negatives = 50;
    cfg.repeats = 3;
    cfg.seed = 5;
    auto report = evaluate_with(w.ds, w.interacted, w.instances, cfg,
                                [&](std::size_t i, int item) {
                                    return item == w.instances[i].pos_item ? 1e6 : 0.0;
                                });
    CHECK(report.mean.recall_at_k == doctest::Approx(1.0));
    CHECK(report.mean.ndcg == doctest::Approx(1.0));
    CHECK(report.mean.mrr == doctest::Approx(1.0));
    CHECK(report.evaluated == w.instances.size());
}

TEST_CASE("metrics are invariant under strictly increasing score transforms") {
    VariantConfig v;
    EvalWorld w(v);
    EvalConfig cfg;
    cfg.negatives = 40;
    cfg.repeats = 2;
    auto base = [&](std::size_t i, int item) {
        return std::sin(static_cast<double>(item) * 0.7 + static_cast<double>(i));
    };
    auto a = evaluate_with(w.ds, w.interacted, w.instances, cfg, base);
    auto b = evaluate_with(w.ds, w.interacted, w.instances, cfg, [&](std::size_t i, int item) {
        return 3.0 * std::tanh(base(i, item)) + 11.0;
    });
    CHECK(a.mean.recall_at_k == b.mean.recall_at_k);
    CHECK(a.mean.ndcg == b.mean.ndcg);
    CHECK(a.mean.mrr == b.mean.mrr);
}

TEST_CASE("negatives are fresh per repeat, seeded, and never interacted") {
    VariantConfig v;
    EvalWorld w(v);
    EvalConfig cfg;
    cfg.negatives = 10;
    cfg.repeats = 4;
    cfg.keep_details = true;
    auto report = evaluate_with(w.ds, w.interacted, w.instances, cfg,
                                [](std::size_t, int) { return 0.0; });
    bool repeats_differ = false;
    for (std::size_t i = 0; i < report.candidate_details.size(); ++i) {
        const auto& per_repeat = report.candidate_details[i];
        if (per_repeat.empty()) continue;
        for (const auto& cands : per_repeat) {
            CHECK(cands[0] == w.instances[i].pos_item);
            for (std::size_t c = 1; c < cands.size(); ++c)
                CHECK(w.interacted[static_cast<std::size_t>(w.instances[i].user)].count(cands[c]) ==
                      0);
        }
        if (per_repeat.size() > 1 && per_repeat[0] != per_repeat[1]) repeats_differ = true;
    }
    CHECK(repeats_differ);
}

TEST_CASE("model evaluation is deterministic and thread-count independent") {
    VariantConfig v;
    v.sessions = 2;
    EvalWorld w(v, 7);
    REQUIRE(!w.instances.empty());
    auto store = ParamStore::init(w.ds.n_users(), w.ds.n_items(), 4, v, 19);
    EvalConfig cfg;
    cfg.negatives = 20;
    cfg.repeats = 3;
    cfg.seed = 77;

    auto a = evaluate_model(store, v, w.ds, w.train_sessions, w.interacted, w.graphs, w.instances,
                            cfg);
    auto b = evaluate_model(store, v, w.ds, w.train_sessions, w.interacted, w.graphs, w.instances,
                            cfg);
    cfg.threads = 2;
    auto c = evaluate_model(store, v, w.ds, w.train_sessions, w.interacted, w.graphs, w.instances,
                            cfg);
    for (const auto* other : {&b, &c}) {
        REQUIRE(other->per_repeat.size() == a.per_repeat.size());
        for (std::size_t i = 0; i < a.per_repeat.size(); ++i) {
            CHECK(a.per_repeat[i].recall_at_k == other->per_repeat[i].recall_at_k);
            CHECK(a.per_repeat[i].ndcg == other->per_repeat[i].ndcg);
            CHECK(a.per_repeat[i].mrr == other->per_repeat[i].mrr);
        }
    }
}

TEST_CASE("tiny fixture report matches a fully brute-forced recomputation") {
    VariantConfig v;
    v.sessions = 2;
    EvalWorld w(v, 9);
    REQUIRE(w.instances.size() >= 5);
    auto store = ParamStore::init(w.ds.n_users(), w.ds.n_items(), 4, v, 23);

    EvalConfig cfg;
    cfg.negatives = 15;
    cfg.repeats = 4;
    cfg.seed = 99;
    cfg.keep_details = true;
    auto report = evaluate_model(store, v, w.ds, w.train_sessions, w.interacted, w.graphs,
                                 w.instances, cfg);

    // Brute force: recompute representations on fresh tapes, score the
    // recorded candidate lists, rank by full sort, apply the formulas.
    std::vector<std::vector<double>> rank_stats(static_cast<std::size_t>(cfg.repeats));
    std::vector<std::vector<int>> brute_ranks(static_cast<std::size_t>(cfg.repeats));
    for (std::size_t i = 0; i < w.instances.size(); ++i) {
        const EvalInstance& inst = w.instances[i];
        Tape tape;
        std::vector<const CompletedGraph*> ctx;
        for (int s : inst.context_sessions) ctx.push_back(&w.graphs.get(inst.user, s));
        auto repr = tape.value_vector(
            forward_user(tape, store, v, w.train_sessions, inst.user, ctx));
        for (int rep = 0; rep < cfg.repeats; ++rep) {
            const auto& cands = report.candidate_details[i][static_cast<std::size_t>(rep)];
            std::vector<double> scores;
            for (int item : cands) {
                double acc = 0.0;
                for (std::size_t k = 0; k < repr.size(); ++k)
                    acc += repr[k] * store.item_emb.at(static_cast<std::size_t>(item), k);
                scores.push_back(acc);
            }
            brute_ranks[static_cast<std::size_t>(rep)].push_back(oracles::rank_by_sort(scores));
        }
    }
    for (int rep = 0; rep < cfg.repeats; ++rep) {
        const auto& ranks = brute_ranks[static_cast<std::size_t>(rep)];
        double recall = 0, ndcg = 0, mrr = 0;
        for (int rank : ranks) {
            recall += rank <= cfg.k ? 1 : 0;
            ndcg += 1.0 / std::log2(rank + 1.0);
            mrr += 1.0 / rank;
        }
        const double n = static_cast<double>(ranks.size());
        CHECK(report.per_repeat[static_cast<std::size_t>(rep)].recall_at_k ==
              doctest::Approx(recall / n).epsilon(1e-12));
        CHECK(report.per_repeat[static_cast<std::size_t>(rep)].ndcg ==
              doctest::Approx(ndcg / n).epsilon(1e-12));
        CHECK(report.per_repeat[static_cast<std::size_t>(rep)].mrr ==
              doctest::Approx(mrr / n).epsilon(1e-12));
    }
}

TEST_CASE("population-capped negatives still produce a full report") {
    VariantConfig v;
    EvalWorld w(v, 13);
    EvalConfig cfg;
    cfg.negatives = 100000; // far beyond the catalog
    cfg.repeats = 2;
    auto report = evaluate_with(w.ds, w.interacted, w.instances, cfg,
                                [](std::size_t, int item) { return -item; });
    CHECK(report.evaluated > 0);
    for (const auto& m : report.per_repeat) {
        CHECK(m.recall_at_k >= 0.0);
        CHECK(m.recall_at_k <= 1.0);
    }
}
