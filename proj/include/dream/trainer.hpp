#pragma once

// Mini-batch training: seeded shuffling, Adam with bias correction after
// every batch, optional global-norm gradient clipping, per-epoch
// validation Recall@K with a fixed negative sample, early stopping on the
// validation metric, and restoration of the best checkpoint.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dream/error.hpp"
#include "dream/evaluator.hpp"
#include "dream/model.hpp"
#include "dream/rng.hpp"

namespace dream {

struct TrainConfig {
    double lr = 1e-4;
    std::size_t batch_size = 32;
    int max_epochs = 100;
    int patience = 5;
    std::uint64_t seed = 42;
    double l2_lambda = 1e-5;
    double clip_norm = 5.0; // <= 0 disables clipping
    std::size_t negatives_per_positive = 4;
    std::size_t max_session_items = 20;
    bool resample_friends_per_epoch = false;
    std::size_t validation_negatives = 1000;
    int validation_k = 10;

    void validate() const {
        if (lr < 0) throw ConfigError("train: learning rate must be >= 0");
        if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
        if (patience < 1) throw ConfigError("train: patience must be >= 1");
        if (max_epochs < 1) throw ConfigError("train: max epochs must be >= 1");
    }
};

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    static AdamState init(const std::vector<Tensor*>& params) {
        AdamState s;
        s.m.reserve(params.size());
        s.v.reserve(params.size());
        for (const Tensor* t : params) {
            s.m.emplace_back(t->data.size(), 0.0);
            s.v.emplace_back(t->data.size(), 0.0);
        }
        return s;
    }
};

// One update from the gradients currently held by the tensors:
// m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,
// theta <- theta - lr * m^ / (sqrt(v^) + eps) with bias-corrected moments.
inline void adam_step(AdamState& state, const std::vector<Tensor*>& params, double lr) {
    if (params.size() != state.m.size())
        throw DimensionError("adam_step: parameter list does not match optimizer state");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& t = *params[p];
        if (t.grad.size() != state.m[p].size())
            throw DimensionError("adam_step: gradient shape mismatch");
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            const double g = t.grad[i];
            state.m[p][i] = state.beta1 * state.m[p][i] + (1.0 - state.beta1) * g;
            state.v[p][i] = state.beta2 * state.v[p][i] + (1.0 - state.beta2) * g * g;
            const double mhat = state.m[p][i] / bc1;
            const double vhat = state.v[p][i] / bc2;
            t.data[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

// Scales all gradients so their global L2 norm is at most max_norm.
inline double clip_gradients(const std::vector<Tensor*>& params, double max_norm) {
    double sq = 0.0;
    for (const Tensor* t : params)
        for (double g : t->grad) sq += g * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (Tensor* t : params)
            for (double& g : t->grad) g *= scale;
    }
    return norm;
}

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_recall = 0.0;
    double seconds = 0.0;
};

struct TrainResult {
    std::vector<EpochRecord> history;
    int best_epoch = 0;
    double best_metric = 0.0;
    std::size_t train_instances = 0;
    std::size_t skipped_instances = 0;
    bool early_stopped = false;
};

struct TrainData {
    const Dataset* ds = nullptr;
    const SplitAssignment* split = nullptr;
    const std::vector<SessionSequence>* train_sessions = nullptr;
    const std::vector<std::set<int>>* interacted = nullptr;
    GraphCache* graphs = nullptr;
    Granularity granularity = Granularity::month;
};

namespace trainer_detail {

struct Snapshot {
    std::vector<std::vector<double>> tensors;
    std::vector<double> bn_mean, bn_var;
};

inline Snapshot take(ParamStore& store) {
    Snapshot s;
    for (auto& [name, t] : store.named_tensors()) s.tensors.push_back(t->data);
    s.bn_mean = store.bn_mean;
    s.bn_var = store.bn_var;
    return s;
}

inline void restore(ParamStore& store, const Snapshot& s) {
    auto named = store.named_tensors();
    for (std::size_t i = 0; i < named.size(); ++i) named[i].second->data = s.tensors[i];
    store.bn_mean = s.bn_mean;
    store.bn_var = s.bn_var;
}

inline std::string first_nonfinite_tensor(ParamStore& store) {
    for (auto& [name, t] : store.named_tensors()) {
        for (double x : t->data)
            if (!std::isfinite(x)) return name;
        for (double g : t->grad)
            if (!std::isfinite(g)) return name + " (grad)";
    }
    return "loss";
}

} // namespace trainer_detail

// Trains in place and leaves the store at the best validation checkpoint.
inline TrainResult train(ParamStore& store, const VariantConfig& variant, const TrainData& data,
                         const TrainConfig& cfg) {
    cfg.validate();
    auto build = make_training_instances(*data.ds, *data.split, *data.train_sessions,
                                         *data.interacted, data.granularity, variant.sessions,
                                         cfg.negatives_per_positive,
                                         mix_seed(cfg.seed, hash_name("instances")));
    if (build.instances.empty())
        throw TrainError("no trainable instances: every training event lacks prior sessions");

    auto val_instances = enumerate_eval_instances(*data.ds, *data.split, *data.train_sessions,
                                                  data.granularity, variant.sessions,
                                                  SplitLabel::valid)
                             .instances;
    EvalConfig val_cfg;
    val_cfg.split_label = SplitLabel::valid;
    val_cfg.negatives = cfg.validation_negatives;
    val_cfg.repeats = 1; // fixed validation sample
    val_cfg.k = cfg.validation_k;
    val_cfg.seed = mix_seed(cfg.seed, hash_name("validation"));
    val_cfg.max_session_items = cfg.max_session_items;

    std::vector<Tensor*> params;
    for (auto& [name, t] : store.named_tensors()) params.push_back(t);
    AdamState adam = AdamState::init(params);

    LossConfig loss_cfg;
    loss_cfg.l2_lambda = cfg.l2_lambda;
    loss_cfg.max_session_items = cfg.max_session_items;
    loss_cfg.training_mode = true;

    TrainResult result;
    result.train_instances = build.instances.size();
    result.skipped_instances = build.skipped;

    std::vector<std::size_t> order(build.instances.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    trainer_detail::Snapshot best = trainer_detail::take(store);
    double best_metric = -1.0;
    int best_epoch = 0;
    int epochs_since_improvement = 0;
    Tape tape;
    std::vector<Instance> batch;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto epoch_start = std::chrono::steady_clock::now();
        Rng shuffle_rng(mix_seed(cfg.seed, hash_name("shuffle"), static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);
        const std::uint64_t salt =
            cfg.resample_friends_per_epoch ? static_cast<std::uint64_t>(epoch) : 0;

        double loss_sum = 0.0;
        std::size_t n_batches = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
            batch.clear();
            for (std::size_t i = begin; i < std::min(begin + cfg.batch_size, order.size()); ++i)
                batch.push_back(build.instances[order[i]]);
            tape.reset();
            store.zero_grad();
            Var loss = batch_loss(tape, store, variant, *data.train_sessions, *data.graphs, batch,
                                  loss_cfg, salt);
            const double loss_value = tape.scalar(loss);
            if (!std::isfinite(loss_value))
                throw TrainError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                 std::to_string(n_batches) + "; offending tensor: " +
                                 trainer_detail::first_nonfinite_tensor(store));
            tape.backward(loss);
            clip_gradients(params, cfg.clip_norm);
            adam_step(adam, params, cfg.lr);
            loss_sum += loss_value;
            ++n_batches;
        }

        double metric;
        if (!val_instances.empty()) {
            auto report = evaluate_model(store, variant, *data.ds, *data.train_sessions,
                                         *data.interacted, *data.graphs, val_instances, val_cfg);
            metric = report.mean.recall_at_k;
        } else {
            // Degenerate datasets without validation targets fall back to
            // the (negated) training loss as the selection signal.
            metric = -loss_sum / static_cast<double>(n_batches);
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(n_batches);
        rec.val_recall = metric;
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start)
                          .count();
        result.history.push_back(rec);

        if (metric > best_metric) {
            best_metric = metric;
            best_epoch = epoch;
            best = trainer_detail::take(store);
            epochs_since_improvement = 0;
        } else {
            ++epochs_since_improvement;
            if (epochs_since_improvement >= cfg.patience) {
                result.early_stopped = true;
                break;
            }
        }
    }

    trainer_detail::restore(store, best);
    result.best_epoch = best_epoch;
    result.best_metric = best_metric;
    return result;
}

} // namespace dream
