#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "dream/trainer.hpp"
#include "synthetic.hpp"
#include "temp_files.hpp"

using namespace dream;

namespace {

struct TrainWorld {
    Dataset ds;
    SplitAssignment sp;
    std::vector<SessionSequence> train_sessions;
    std::vector<std::set<int>> interacted;
    SocialContext social;
    GraphCache graphs;

    TrainWorld(const VariantConfig& variant, const testutil::SyntheticSpec& spec,
               std::uint64_t seed = 1) {
        auto [events, social_tsv] = testutil::synthetic_tsv(spec);
        testutil::TempDir dir;
        ds = ingest(dir.file("e.tsv", events), dir.file("s.tsv", social_tsv));
        sp = split(ds, {0.8, 0.1, 0.1}, seed);
        train_sessions = segment_sessions(ds, Granularity::month, &sp, SplitLabel::train);
        interacted = ds.interacted_sets();
        CompletionConfig comp;
        comp.k_real = 4;
        comp.k_virtual = 4;
        comp.seed = seed;
        GloveConfig glove;
        glove.dim = 8;
        glove.epochs = 8;
        glove.seed = seed;
        social = build_social_context(ds, sp, variant, comp, glove);
        graphs = GraphCache(&social, &train_sessions);
    }

    TrainData data() {
        return {&ds, &sp, &train_sessions, &interacted, &graphs, Granularity::month};
    }
};

testutil::SyntheticSpec toy_spec() {
    testutil::SyntheticSpec spec;
    spec.users = 8;
    spec.items = 20;
    spec.clusters = 2;
    spec.windows = 4;
    spec.events_per_window = 3;
    spec.friends_per_user = 3;
    spec.seed = 5;
    return spec;
}

} // namespace

TEST_CASE("adam: zero gradients leave parameters untouched") {
    Tensor t = Tensor::vector({1.0, -2.0, 3.0}, true);
    std::vector<Tensor*> params{&t};
    auto state = AdamState::init(params);
    const auto before = t.data;
    adam_step(state, params, 0.01);
    CHECK(t.data == before);
}

TEST_CASE("adam: first-step magnitude is about the learning rate") {
    Tensor t = Tensor::vector({1.0}, true);
    t.grad[0] = 0.5;
    std::vector<Tensor*> params{&t};
    auto state = AdamState::init(params);
    adam_step(state, params, 1e-3);
    // Bias-corrected first step: lr * g / (|g| + eps) ~ lr * sign(g).
    CHECK(std::abs((1.0 - t.data[0]) - 1e-3) < 1e-9);
}

TEST_CASE("adam: constant gradient drives steps toward -sign(g) * lr") {
    Tensor t = Tensor::vector({0.0}, true);
    std::vector<Tensor*> params{&t};
    auto state = AdamState::init(params);
    const double lr = 0.01;
    double prev = t.data[0];
    double last_step = 0.0;
    for (int i = 0; i < 300; ++i) {
        t.grad[0] = -2.5; // constant; parameter should climb by ~lr per step
        adam_step(state, params, lr);
        last_step = t.data[0] - prev;
        prev = t.data[0];
    }
    CHECK(last_step == doctest::Approx(lr).epsilon(0.01));
}

TEST_CASE("adam: identical runs are bit-identical") {
    auto run = [] {
        Tensor t = Tensor::vector({0.3, -0.7}, true);
        std::vector<Tensor*> params{&t};
        auto state = AdamState::init(params);
        for (int i = 0; i < 50; ++i) {
            t.grad = {std::sin(i * 0.1), std::cos(i * 0.2)};
            adam_step(state, params, 0.005);
        }
        return t.data;
    };
    CHECK(run() == run());
}

TEST_CASE("gradient clipping caps the global norm") {
    Tensor a = Tensor::vector({3.0, 4.0}, true);
    a.grad = {30.0, 40.0};
    std::vector<Tensor*> params{&a};
    const double norm = clip_gradients(params, 5.0);
    CHECK(norm == doctest::Approx(50.0));
    CHECK(std::hypot(a.grad[0], a.grad[1]) == doctest::Approx(5.0));

    a.grad = {0.3, 0.4};
    clip_gradients(params, 5.0);
    CHECK(a.grad[0] == doctest::Approx(0.3)); // below threshold: untouched
}

TEST_CASE("l2-only gradients shrink parameter norms monotonically") {
    Tensor w = Tensor::vector({2.0, -1.5, 0.75}, true);
    std::vector<Tensor*> params{&w};
    auto state = AdamState::init(params);
    const double lambda = 1e-3;
    double prev_norm = 1e300;
    for (int step = 0; step < 100; ++step) {
        for (std::size_t i = 0; i < w.data.size(); ++i) w.grad[i] = 2.0 * lambda * w.data[i];
        adam_step(state, params, 0.01);
        double norm = 0.0;
        for (double x : w.data) norm += x * x;
        CHECK(norm < prev_norm);
        prev_norm = norm;
    }
}

TEST_CASE("train with lr=0 changes nothing") {
    VariantConfig v;
    v.sessions = 2;
    TrainWorld w(v, toy_spec());
    auto store = ParamStore::init(w.ds.n_users(), w.ds.n_items(), 4, v, 7);
    auto before = store.user_emb.data;
    TrainConfig cfg;
    cfg.lr = 0.0;
    cfg.max_epochs = 3;
    cfg.patience = 10;
    cfg.seed = 1;
    cfg.validation_negatives = 10;
    auto data = w.data();
    train(store, v, data, cfg);
    CHECK(store.user_emb.data == before);
}

TEST_CASE("training is deterministic: identical checkpoints from identical configs") {
    VariantConfig v;
    v.sessions = 2;
    testutil::TempDir dir;
    auto run = [&](const std::string& name) {
        TrainWorld w(v, toy_spec());
        auto store = ParamStore::init(w.ds.n_users(), w.ds.n_items(), 4, v, 7);
        TrainConfig cfg;
        cfg.lr = 0.01;
        cfg.max_epochs = 4;
        cfg.patience = 10;
        cfg.seed = 3;
        cfg.validation_negatives = 10;
        auto data = w.data();
        train(store, v, data, cfg);
        const std::string path = dir.join(name);
        save_checkpoint(store, path);
        return testutil::slurp(path);
    };
    CHECK(run("a.ckpt") == run("b.ckpt"));
}

TEST_CASE("toy planted-preference dataset overfits below 0.3 loss within 200 epochs") {
    VariantConfig v;
    v.sessions = 2;
    TrainWorld w(v, toy_spec());
    auto store = ParamStore::init(w.ds.n_users(), w.ds.n_items(), 8, v, 11);
    TrainConfig cfg;
    cfg.lr = 0.02;
    cfg.max_epochs = 200;
    cfg.patience = 200; // let the loss keep falling
    cfg.seed = 4;
    cfg.validation_negatives = 10;
    auto data = w.data();
    auto result = train(store, v, data, cfg);
    REQUIRE(!result.history.empty());
    double min_loss = 1e300;
    for (const auto& rec : result.history) min_loss = std::min(min_loss, rec.train_loss);
    CHECK(min_loss < 0.3);
}

TEST_CASE("early stopping returns the best validation checkpoint") {
    VariantConfig v;
    v.sessions = 2;
    TrainWorld w(v, toy_spec(), 9);
    auto store = ParamStore::init(w.ds.n_users(), w.ds.n_items(), 4, v, 13);
    TrainConfig cfg;
    cfg.lr = 0.02;
    cfg.max_epochs = 40;
    cfg.patience = 5;
    cfg.seed = 6;
    cfg.validation_negatives = 10;
    auto data = w.data();
    auto result = train(store, v, data, cfg);

    double best_seen = -1.0;
    for (const auto& rec : result.history) best_seen = std::max(best_seen, rec.val_recall);
    CHECK(result.best_metric == doctest::Approx(best_seen));

    // The restored store reproduces the best epoch's validation metric.
    auto val = enumerate_eval_instances(w.ds, w.sp, w.train_sessions, Granularity::month,
                                        v.sessions, SplitLabel::valid)
                   .instances;
    REQUIRE(!val.empty());
    EvalConfig val_cfg;
    val_cfg.split_label = SplitLabel::valid;
    val_cfg.negatives = cfg.validation_negatives;
    val_cfg.repeats = 1;
    val_cfg.seed = mix_seed(cfg.seed, hash_name("validation"));
    auto report = evaluate_model(store, v, w.ds, w.train_sessions, w.interacted, w.graphs, val,
                                 val_cfg);
    CHECK(report.mean.recall_at_k == doctest::Approx(result.best_metric));
}

TEST_CASE("non-finite parameters abort training with a diagnostic") {
    VariantConfig v;
    v.sessions = 2;
    TrainWorld w(v, toy_spec(), 15);
    auto store = ParamStore::init(w.ds.n_users(), w.ds.n_items(), 4, v, 17);
    store.user_emb.data[0] = std::numeric_limits<double>::quiet_NaN();
    TrainConfig cfg;
    cfg.max_epochs = 2;
    cfg.seed = 8;
    auto data = w.data();
    CHECK_THROWS_AS(train(store, v, data, cfg), std::runtime_error);
}
