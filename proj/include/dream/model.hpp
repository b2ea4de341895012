#pragma once

// Full model assembly: per-session completion -> relational attention ->
// temporal encoding over T context sessions, item scoring, and the
// training loss. Ablation variants are wired through VariantConfig so
// every configuration shares this one forward path.

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "dream/completion.hpp"
#include "dream/dataset.hpp"
#include "dream/error.hpp"
#include "dream/gru.hpp"
#include "dream/rgat.hpp"
#include "dream/rng.hpp"
#include "dream/tensor.hpp"
#include "dream/tie.hpp"

namespace dream {

enum class TemporalMode : std::uint8_t { tie, gru, none };
enum class RankHead : std::uint8_t { dot, mlp };

inline const char* to_string(TemporalMode m) {
    switch (m) {
        case TemporalMode::tie: return "tie";
        case TemporalMode::gru: return "gru";
        default: return "none";
    }
}

struct VariantConfig {
    bool use_real = true;
    bool use_virtual = true;
    bool relation_aware = true;
    TemporalMode temporal = TemporalMode::tie;
    int sessions = 2; // T
    bool aggregate_projected = false;
    bool literal_linear_gates = false;
    bool predict_from_tie_state = false;
    bool batch_norm = false;
    bool per_session_params = false;
    bool allow_center_only = false;
    int attention_depth = 1;
    RankHead head = RankHead::dot;

    void validate() const {
        if (sessions < 1) throw ConfigError("variant: sessions (T) must be >= 1");
        if (!use_real && !use_virtual && !allow_center_only)
            throw ConfigError(
                "variant: at least one of real/virtual friends must be enabled "
                "(use the center-only variant to request the degenerate case)");
        if (attention_depth != 1 && attention_depth != 2)
            throw ConfigError("variant: attention_depth must be 1 or 2");
    }

    // Named variants from the ablation family.
    static VariantConfig from_name(const std::string& name, int T = 2) {
        VariantConfig v;
        v.sessions = T;
        if (name == "dream") {
        } else if (name == "dream-r") {
            v.use_virtual = false;
        } else if (name == "dream-v") {
            v.use_real = false;
        } else if (name == "dream-gat") {
            v.relation_aware = false;
        } else if (name == "dream-tgru") {
            v.temporal = TemporalMode::gru;
        } else if (name == "dream-s1") {
            v.sessions = 1;
        } else if (name == "dream-s3") {
            v.sessions = 3;
        } else if (name == "center-only") {
            v.use_real = false;
            v.use_virtual = false;
            v.allow_center_only = true;
        } else {
            throw ConfigError("unknown variant '" + name + "'");
        }
        return v;
    }
};

inline std::string variant_name(const VariantConfig& v) {
    if (!v.use_real && !v.use_virtual) return "center-only";
    if (!v.use_virtual) return "dream-r";
    if (!v.use_real) return "dream-v";
    if (!v.relation_aware) return "dream-gat";
    if (v.temporal == TemporalMode::gru) return "dream-tgru";
    if (v.sessions == 1) return "dream-s1";
    if (v.sessions == 3) return "dream-s3";
    return "dream";
}

// Every learnable tensor plus BN running statistics. Components are
// seeded independently so optional parts do not shift the draws of the
// rest.
struct ParamStore {
    std::size_t n_users = 0, n_items = 0, d = 0;
    VariantConfig variant;
    Tensor user_emb; // n x d
    Tensor item_emb; // m x d, shared by GRU inputs and ranking targets
    GruParams gru;
    GruParams temporal_gru; // DREAM-TGRU fusion cell
    RgatParams rgat;
    std::vector<TieParams> tie; // one set, or T sets with per_session_params
    Tensor mlp_hidden, mlp_hidden_b, mlp_out, mlp_out_b; // optional MLP head
    Tensor bn_gamma, bn_beta;
    std::vector<double> bn_mean, bn_var; // running stats, not learnable
    std::uint64_t init_seed = 0;

    static ParamStore init(std::size_t n_users, std::size_t n_items, std::size_t d,
                           const VariantConfig& variant, std::uint64_t seed) {
        variant.validate();
        ParamStore s;
        s.n_users = n_users;
        s.n_items = n_items;
        s.d = d;
        s.variant = variant;
        s.init_seed = seed;

        // Latent vectors start at small random values, uniform +-0.05.
        Rng ru(mix_seed(seed, hash_name("user_emb")));
        s.user_emb = Tensor::zeros({n_users, d}, true);
        for (double& v : s.user_emb.data) v = ru.uniform(-0.05, 0.05);
        Rng ri(mix_seed(seed, hash_name("item_emb")));
        s.item_emb = Tensor::zeros({n_items, d}, true);
        for (double& v : s.item_emb.data) v = ri.uniform(-0.05, 0.05);

        Rng rg(mix_seed(seed, hash_name("gru")));
        s.gru = GruParams::init(d, rg);
        Rng rr(mix_seed(seed, hash_name("rgat")));
        s.rgat = RgatParams::init(d, rr, 0.05, variant.attention_depth);
        if (variant.temporal == TemporalMode::tie) {
            const std::size_t sets =
                variant.per_session_params ? static_cast<std::size_t>(variant.sessions) : 1;
            for (std::size_t t = 0; t < sets; ++t) {
                Rng rt(mix_seed(seed, hash_name("tie"), t));
                s.tie.push_back(TieParams::init(d, rt));
            }
        } else if (variant.temporal == TemporalMode::gru) {
            Rng rt(mix_seed(seed, hash_name("temporal_gru")));
            s.temporal_gru = GruParams::init(d, rt);
        }
        if (variant.head == RankHead::mlp) {
            Rng rm(mix_seed(seed, hash_name("mlp_head")));
            s.mlp_hidden = Tensor::zeros({d, 2 * d}, true);
            s.mlp_hidden_b = Tensor::zeros({d}, true);
            s.mlp_out = Tensor::zeros({d}, true);
            s.mlp_out_b = Tensor::zeros({1}, true);
            for (Tensor* t : {&s.mlp_hidden, &s.mlp_hidden_b, &s.mlp_out, &s.mlp_out_b})
                for (double& v : t->data) v = rm.uniform(-0.05, 0.05);
        }
        if (variant.batch_norm) {
            s.bn_gamma = Tensor::zeros({d}, true);
            for (double& v : s.bn_gamma.data) v = 1.0;
            s.bn_beta = Tensor::zeros({d}, true);
            s.bn_mean.assign(d, 0.0);
            s.bn_var.assign(d, 1.0);
        }
        return s;
    }

    std::vector<std::pair<std::string, Tensor*>> named_tensors() {
        std::vector<std::pair<std::string, Tensor*>> out;
        out.push_back({"user_emb", &user_emb});
        out.push_back({"item_emb", &item_emb});
        const char* gru_names[] = {"gru.w_update", "gru.u_update", "gru.b_update",
                                   "gru.w_reset",  "gru.u_reset",  "gru.b_reset",
                                   "gru.w_cand",   "gru.u_cand",   "gru.b_cand"};
        auto gts = GruParams::tensors(gru);
        for (std::size_t i = 0; i < gts.size(); ++i) out.push_back({gru_names[i], gts[i]});
        if (variant.temporal == TemporalMode::gru) {
            auto tg = GruParams::tensors(temporal_gru);
            for (std::size_t i = 0; i < tg.size(); ++i)
                out.push_back({std::string("tgru.") + (gru_names[i] + 4), tg[i]});
        }
        std::size_t ri = 0;
        for (Tensor* t : RgatParams::tensors(rgat))
            out.push_back({"rgat." + std::to_string(ri++), t});
        const char* tie_names[] = {"w_gate", "b_gate", "w_excite", "b_excite",
                                   "w_cand", "u_cand", "b_cand"};
        for (std::size_t set = 0; set < tie.size(); ++set) {
            auto ts = TieParams::tensors(tie[set]);
            for (std::size_t i = 0; i < ts.size(); ++i)
                out.push_back({"tie" + std::to_string(set) + "." + tie_names[i], ts[i]});
        }
        if (variant.head == RankHead::mlp) {
            out.push_back({"mlp.hidden", &mlp_hidden});
            out.push_back({"mlp.hidden_b", &mlp_hidden_b});
            out.push_back({"mlp.out", &mlp_out});
            out.push_back({"mlp.out_b", &mlp_out_b});
        }
        if (variant.batch_norm) {
            out.push_back({"bn.gamma", &bn_gamma});
            out.push_back({"bn.beta", &bn_beta});
        }
        return out;
    }

    // Weight tensors regularized in full (embeddings are regularized per
    // touched row inside the loss).
    std::vector<Tensor*> weight_tensors() {
        std::vector<Tensor*> out;
        for (auto& [name, t] : named_tensors())
            if (name != "user_emb" && name != "item_emb") out.push_back(t);
        return out;
    }

    void zero_grad() {
        for (auto& [name, t] : named_tensors()) t->zero_grad();
    }
};

// ---- social context with access instrumentation ------------------------------

struct AccessCounters {
    std::uint64_t glove_reads = 0;  // virtual-friend machinery
    std::uint64_t social_reads = 0; // real-edge machinery
};

struct SocialContext {
    CompletionConfig completion;
    bool use_real = true;
    bool use_virtual = true;
    std::vector<std::vector<int>> real_friends;
    GloveEmbeddings glove;
    std::vector<std::vector<std::pair<int, double>>> virtual_friends;
    mutable AccessCounters counters;
};

// Builds only the machinery the variant needs: DREAM-R never trains GloVe,
// DREAM-V never touches the social edge list.
inline SocialContext build_social_context(const Dataset& ds, const SplitAssignment& split_labels,
                                          const VariantConfig& variant,
                                          const CompletionConfig& completion,
                                          const GloveConfig& glove_cfg) {
    SocialContext ctx;
    ctx.completion = completion;
    ctx.use_real = variant.use_real;
    ctx.use_virtual = variant.use_virtual;
    if (variant.use_real) {
        ctx.counters.social_reads += ds.social_edges.size();
        ctx.real_friends = ds.friend_lists();
    } else {
        ctx.real_friends.assign(ds.n_users(), {});
    }
    ctx.virtual_friends.assign(ds.n_users(), {});
    if (variant.use_virtual) {
        auto X = build_cooccurrence(ds, split_labels);
        if (!X.entries.empty()) {
            ctx.glove = train_glove(X, glove_cfg);
            for (std::size_t u = 0; u < ds.n_users(); ++u) {
                std::vector<int> exclusions = ctx.real_friends[u];
                exclusions.push_back(static_cast<int>(u));
                ctx.counters.glove_reads += 1;
                ctx.virtual_friends[u] = select_virtual_friends(
                    ctx.glove, static_cast<int>(u), completion.k_virtual, exclusions);
            }
        }
    }
    return ctx;
}

// Completed ego graphs cached per (user, training-session index, epoch
// salt). Graph construction is the only reader of the social context, so
// the access counters observed here prove which machinery a variant used.
class GraphCache {
public:
    GraphCache() = default;
    GraphCache(const SocialContext* social, const std::vector<SessionSequence>* train_sessions)
        : social_(social), sessions_(train_sessions) {}

    const CompletedGraph& get(int user, int session_idx, std::uint64_t epoch_salt = 0) {
        const auto key = std::make_tuple(user, session_idx, epoch_salt);
        auto it = cache_.find(key);
        if (it != cache_.end()) return it->second;
        const auto& sess = (*sessions_)[static_cast<std::size_t>(user)].sessions;
        if (session_idx < 0 || static_cast<std::size_t>(session_idx) >= sess.size())
            throw ModelError("graph request for unknown session of user " + std::to_string(user));
        const std::vector<int>* reals = &empty_friends_;
        if (social_->use_real) {
            social_->counters.social_reads += 1;
            reals = &social_->real_friends[static_cast<std::size_t>(user)];
        }
        const std::vector<std::pair<int, double>>* virtuals = &empty_virtuals_;
        if (social_->use_virtual) {
            social_->counters.glove_reads += 1;
            virtuals = &social_->virtual_friends[static_cast<std::size_t>(user)];
        }
        CompletedGraph g =
            complete_graph(user, sess[static_cast<std::size_t>(session_idx)].index,
                           sess[static_cast<std::size_t>(session_idx)].window, *reals, *virtuals,
                           *sessions_, social_->completion, epoch_salt);
        return cache_.emplace(key, std::move(g)).first->second;
    }

    void clear() { cache_.clear(); }

private:
    const SocialContext* social_ = nullptr;
    const std::vector<SessionSequence>* sessions_ = nullptr;
    std::map<std::tuple<int, int, std::uint64_t>, CompletedGraph> cache_;
    std::vector<int> empty_friends_;
    std::vector<std::pair<int, double>> empty_virtuals_;
};

// ---- forward pass -------------------------------------------------------------

struct AttentionRecord {
    int user = 0;
    int session_rank = 0;
    int neighbor = -1; // -1 marks the self node
    Relation relation = Relation::real;
    double alpha = 0.0;
};

namespace model_detail {

inline Var neighbor_state(Tape& tape, ParamStore& store, const Neighbor& nb,
                          const std::vector<SessionSequence>& train_sessions,
                          std::size_t max_session_items) {
    if (nb.session >= 0) {
        const auto& items =
            train_sessions[static_cast<std::size_t>(nb.user)].sessions[static_cast<std::size_t>(
                nb.session)].items;
        return encode_session(tape, store.gru, store.item_emb, items, max_session_items);
    }
    // No prior session: the neighbor's latent feature stands in.
    return tape.embedding_row(store.user_emb, static_cast<std::size_t>(nb.user));
}

struct SessionStep {
    EgoBatch batch;
    Var alpha;
    Var preact; // aggregation before BN/activation
};

inline SessionStep session_preact(Tape& tape, ParamStore& store, const VariantConfig& variant,
                                  const std::vector<SessionSequence>& train_sessions,
                                  Var carry, const CompletedGraph& graph,
                                  std::size_t max_session_items,
                                  std::vector<AttentionRecord>* attention_sink) {
    SessionStep step;
    step.batch.center = carry;
    for (const Neighbor& nb : graph.neighbors)
        step.batch.neighbors.push_back(
            {neighbor_state(tape, store, nb, train_sessions, max_session_items), nb.relation});
    step.alpha = attention_scores(tape, store.rgat, step.batch, variant.relation_aware);
    if (attention_sink) {
        const double* a = tape.values(step.alpha);
        for (std::size_t i = 0; i < graph.neighbors.size(); ++i)
            attention_sink->push_back({graph.center, graph.session_index,
                                       graph.neighbors[i].user, graph.neighbors[i].relation,
                                       a[i]});
        attention_sink->push_back({graph.center, graph.session_index, -1, Relation::real,
                                   a[graph.neighbors.size()]});
    }
    step.preact = aggregate(tape, store.rgat, step.batch, step.alpha, variant.relation_aware,
                            variant.aggregate_projected, /*skip_activation=*/true);
    return step;
}

inline Var bn_eval(Tape& tape, ParamStore& store, Var preact) {
    const std::size_t d = store.d;
    std::vector<double> scale(d), shift(d);
    for (std::size_t i = 0; i < d; ++i) {
        const double denom = std::sqrt(store.bn_var[i] + 1e-5);
        scale[i] = 1.0 / denom;
        shift[i] = -store.bn_mean[i] / denom;
    }
    Var normalized = tape.add(tape.mul(preact, tape.constant_vector(scale)),
                              tape.constant_vector(shift));
    return tape.add(tape.mul(tape.leaf(store.bn_gamma), normalized), tape.leaf(store.bn_beta));
}

inline Var temporal_update(Tape& tape, ParamStore& store, const VariantConfig& variant,
                           std::size_t t_index, Var carry, Var session_out) {
    switch (variant.temporal) {
        case TemporalMode::tie: {
            TieParams& p = store.tie[std::min(t_index, store.tie.size() - 1)];
            return tie_step(tape, p, carry, session_out, variant.literal_linear_gates);
        }
        case TemporalMode::gru:
            // Session output as input, carried state as hidden state.
            return gru_cell(tape, store.temporal_gru, session_out, carry);
        case TemporalMode::none: return carry;
    }
    return carry;
}

} // namespace model_detail

// Runs the completion -> attention -> temporal pipeline over the instance's
// T context graphs and returns the user representation used for ranking
// (the final attention output u_T, or the carried state when
// predict_from_tie_state is set). Training with batch_norm uses the
// batched path in batch_loss instead; this entry point applies running
// statistics.
inline Var forward_user(Tape& tape, ParamStore& store, const VariantConfig& variant,
                        const std::vector<SessionSequence>& train_sessions, int user,
                        std::span<const CompletedGraph* const> context,
                        std::size_t max_session_items = 20,
                        std::vector<AttentionRecord>* attention_sink = nullptr) {
    if (context.empty()) throw ModelError("forward_user: empty context for user " +
                                          std::to_string(user));
    Var carry = tape.embedding_row(store.user_emb, static_cast<std::size_t>(user));
    Var last_out = carry;
    for (std::size_t t = 0; t < context.size(); ++t) {
        auto step = model_detail::session_preact(tape, store, variant, train_sessions, carry,
                                                 *context[t], max_session_items, attention_sink);
        Var pre = step.preact;
        if (variant.batch_norm) pre = model_detail::bn_eval(tape, store, pre);
        last_out = tape.tanh_(pre);
        carry = model_detail::temporal_update(tape, store, variant, t, carry, last_out);
    }
    return variant.predict_from_tie_state ? carry : last_out;
}

// Ranking score (logit). Dot product by default; optional 2-layer MLP head.
inline Var score_item(Tape& tape, ParamStore& store, Var user_repr, int item) {
    Var v = tape.embedding_row(store.item_emb, static_cast<std::size_t>(item));
    if (store.variant.head == RankHead::dot) return tape.dot(user_repr, v);
    Var joint = tape.concat(user_repr, v);
    Var hidden = tape.relu(
        tape.add(tape.matvec(tape.leaf(store.mlp_hidden), joint), tape.leaf(store.mlp_hidden_b)));
    return tape.add(tape.dot(tape.leaf(store.mlp_out), hidden), tape.leaf(store.mlp_out_b));
}

// Clicking probability sigma(f(u_T, v)).
inline Var predict(Tape& tape, ParamStore& store, Var user_repr, int item) {
    return tape.logistic_(score_item(tape, store, user_repr, item));
}

// ---- training instances ----------------------------------------------------------

struct Instance {
    int user = 0;
    std::size_t event_index = 0;
    int pos_item = 0;
    std::vector<int> context_sessions; // indices into the user's training sessions, length T
    std::vector<int> negatives;        // training negatives (evaluation draws its own)
};

struct InstanceBuild {
    std::vector<Instance> instances;
    std::size_t skipped = 0; // targets without any prior training session
};

// Context = the T most recent training sessions strictly before the
// target's window, front-padded by repeating the earliest available one.
inline std::optional<std::vector<int>> context_for(const std::vector<SessionSequence>& sessions,
                                                   int user, std::int64_t target_window, int T) {
    const auto& sess = sessions[static_cast<std::size_t>(user)].sessions;
    int last_before = -1;
    for (std::size_t i = 0; i < sess.size(); ++i) {
        if (sess[i].window < target_window)
            last_before = static_cast<int>(i);
        else
            break;
    }
    if (last_before < 0) return std::nullopt;
    std::vector<int> ctx;
    for (int i = last_before - T + 1; i <= last_before; ++i) ctx.push_back(std::max(i, 0));
    return ctx;
}

inline InstanceBuild make_training_instances(const Dataset& ds, const SplitAssignment& split_labels,
                                             const std::vector<SessionSequence>& train_sessions,
                                             const std::vector<std::set<int>>& interacted,
                                             Granularity granularity, int T,
                                             std::size_t negatives_per_positive,
                                             std::uint64_t seed) {
    InstanceBuild out;
    for (std::size_t e = 0; e < ds.events.size(); ++e) {
        if (split_labels.labels[e] != SplitLabel::train) continue;
        const Event& ev = ds.events[e];
        auto ctx = context_for(train_sessions, ev.user, window_of(ev.ts, granularity), T);
        if (!ctx) {
            ++out.skipped;
            continue;
        }
        Instance inst;
        inst.user = ev.user;
        inst.event_index = e;
        inst.pos_item = ev.item;
        inst.context_sessions = std::move(*ctx);
        const auto& seen = interacted[static_cast<std::size_t>(ev.user)];
        const std::size_t avail = ds.n_items() - seen.size();
        const std::size_t want = std::min(negatives_per_positive, avail);
        if (want > 0)
            inst.negatives =
                sample_negatives(ds, seen, want, mix_seed(seed, hash_name("train_neg"), e));
        out.instances.push_back(std::move(inst));
    }
    return out;
}

// ---- loss -------------------------------------------------------------------------

struct LossConfig {
    double l2_lambda = 1e-5;
    std::size_t max_session_items = 20;
    bool training_mode = true; // batch statistics + running-stat updates for BN
    double bn_momentum = 0.9;
};

// Mean sigmoid cross entropy over every (positive + negative) triple in
// the batch, plus lambda * squared L2 over the weight tensors and the
// embedding rows the batch touched.
inline Var batch_loss(Tape& tape, ParamStore& store, const VariantConfig& variant,
                      const std::vector<SessionSequence>& train_sessions, GraphCache& graphs,
                      std::span<const Instance> batch, const LossConfig& cfg,
                      std::uint64_t epoch_salt = 0) {
    if (batch.empty()) throw ArgumentError("batch_loss: empty batch");
    const std::size_t B = batch.size();
    std::vector<Var> reprs(B);

    if (variant.batch_norm && cfg.training_mode) {
        // Staged forward: all instances advance one session at a time so
        // batch statistics exist for the normalization.
        const std::size_t d = store.d;
        const int T = variant.sessions;
        std::vector<Var> carries(B), last_out(B);
        for (std::size_t i = 0; i < B; ++i)
            carries[i] = tape.embedding_row(store.user_emb, static_cast<std::size_t>(batch[i].user));
        for (int t = 0; t < T; ++t) {
            std::vector<Var> pres(B);
            for (std::size_t i = 0; i < B; ++i) {
                const auto& g = graphs.get(batch[i].user,
                                           batch[i].context_sessions[static_cast<std::size_t>(t)],
                                           epoch_salt);
                pres[i] = model_detail::session_preact(tape, store, variant, train_sessions,
                                                       carries[i], g, cfg.max_session_items,
                                                       nullptr)
                              .preact;
            }
            Var mean = tape.scale(tape.add_n(pres), 1.0 / static_cast<double>(B));
            std::vector<Var> sq(B);
            for (std::size_t i = 0; i < B; ++i) {
                Var diff = tape.sub(pres[i], mean);
                sq[i] = tape.mul(diff, diff);
            }
            Var var = tape.scale(tape.add_n(sq), 1.0 / static_cast<double>(B));
            Var denom = tape.sqrt_(
                tape.add(var, tape.constant(std::vector<double>(d, 1e-5), {d})));
            // Running statistics track the batch values outside the tape.
            const double* mv = tape.values(mean);
            const double* vv = tape.values(var);
            for (std::size_t k = 0; k < d; ++k) {
                store.bn_mean[k] = cfg.bn_momentum * store.bn_mean[k] + (1 - cfg.bn_momentum) * mv[k];
                store.bn_var[k] = cfg.bn_momentum * store.bn_var[k] + (1 - cfg.bn_momentum) * vv[k];
            }
            for (std::size_t i = 0; i < B; ++i) {
                Var normalized = tape.div(tape.sub(pres[i], mean), denom);
                Var scaled = tape.add(tape.mul(tape.leaf(store.bn_gamma), normalized),
                                      tape.leaf(store.bn_beta));
                last_out[i] = tape.tanh_(scaled);
                carries[i] = model_detail::temporal_update(tape, store, variant,
                                                           static_cast<std::size_t>(t), carries[i],
                                                           last_out[i]);
            }
        }
        for (std::size_t i = 0; i < B; ++i)
            reprs[i] = variant.predict_from_tie_state ? carries[i] : last_out[i];
    } else {
        for (std::size_t i = 0; i < B; ++i) {
            std::vector<const CompletedGraph*> ctx;
            for (int s : batch[i].context_sessions)
                ctx.push_back(&graphs.get(batch[i].user, s, epoch_salt));
            reprs[i] = forward_user(tape, store, variant, train_sessions, batch[i].user, ctx,
                                    cfg.max_session_items);
        }
    }

    std::vector<Var> terms;
    for (std::size_t i = 0; i < B; ++i) {
        terms.push_back(tape.bce_with_logits(score_item(tape, store, reprs[i], batch[i].pos_item),
                                             1.0));
        for (int neg : batch[i].negatives)
            terms.push_back(tape.bce_with_logits(score_item(tape, store, reprs[i], neg), 0.0));
    }
    Var data = tape.scale(tape.add_n(terms), 1.0 / static_cast<double>(terms.size()));

    if (cfg.l2_lambda <= 0.0) return data;

    std::vector<Var> reg_terms;
    for (Tensor* w : store.weight_tensors()) reg_terms.push_back(tape.square_norm(tape.leaf(*w)));
    // Embedding rows touched by this batch, each counted once.
    std::set<std::pair<Tensor*, std::size_t>> rows(tape.touched_rows().begin(),
                                                   tape.touched_rows().end());
    for (const auto& [table, row] : rows)
        reg_terms.push_back(tape.square_norm(tape.embedding_row(*table, row)));
    Var reg = tape.scale(tape.add_n(reg_terms), cfg.l2_lambda);
    return tape.add(data, reg);
}

// ---- checkpoints -------------------------------------------------------------------

// Versioned binary container: length-prefixed meta key/value strings
// followed by named tensors with shapes and raw little-endian doubles.
// Round-trips are bit-exact.
inline void save_checkpoint(ParamStore& store, const std::string& path,
                            const std::vector<std::pair<std::string, std::string>>& extra_meta = {}) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    auto put_u64 = [&](std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); };
    auto put_str = [&](const std::string& s) {
        put_u64(s.size());
        out.write(s.data(), static_cast<std::streamsize>(s.size()));
    };
    out.write("DRMC\x01\x00\x00\x00", 8);

    const VariantConfig& v = store.variant;
    std::vector<std::pair<std::string, std::string>> meta = {
        {"n_users", std::to_string(store.n_users)},
        {"n_items", std::to_string(store.n_items)},
        {"d", std::to_string(store.d)},
        {"use_real", v.use_real ? "1" : "0"},
        {"use_virtual", v.use_virtual ? "1" : "0"},
        {"relation_aware", v.relation_aware ? "1" : "0"},
        {"temporal", to_string(v.temporal)},
        {"sessions", std::to_string(v.sessions)},
        {"aggregate_projected", v.aggregate_projected ? "1" : "0"},
        {"literal_linear_gates", v.literal_linear_gates ? "1" : "0"},
        {"predict_from_tie_state", v.predict_from_tie_state ? "1" : "0"},
        {"batch_norm", v.batch_norm ? "1" : "0"},
        {"per_session_params", v.per_session_params ? "1" : "0"},
        {"allow_center_only", v.allow_center_only ? "1" : "0"},
        {"attention_depth", std::to_string(v.attention_depth)},
        {"head", v.head == RankHead::dot ? "dot" : "mlp"},
        {"init_seed", std::to_string(store.init_seed)},
    };
    for (const auto& kv : extra_meta) meta.push_back(kv);
    put_u64(meta.size());
    for (const auto& [k, val] : meta) {
        put_str(k);
        put_str(val);
    }

    auto tensors = store.named_tensors();
    put_u64(tensors.size());
    for (auto& [name, t] : tensors) {
        put_str(name);
        put_u64(t->shape.size());
        for (std::size_t dsz : t->shape) put_u64(dsz);
        out.write(reinterpret_cast<const char*>(t->data.data()),
                  static_cast<std::streamsize>(t->data.size() * sizeof(double)));
    }
    put_u64(store.bn_mean.size());
    out.write(reinterpret_cast<const char*>(store.bn_mean.data()),
              static_cast<std::streamsize>(store.bn_mean.size() * sizeof(double)));
    out.write(reinterpret_cast<const char*>(store.bn_var.data()),
              static_cast<std::streamsize>(store.bn_var.size() * sizeof(double)));
    if (!out) throw IoError("short write to checkpoint: " + path);
}

struct LoadedCheckpoint {
    ParamStore store;
    std::map<std::string, std::string> meta;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    auto get_u64 = [&]() {
        std::uint64_t v = 0;
        in.read(reinterpret_cast<char*>(&v), 8);
        if (!in) throw ParseError("truncated checkpoint: " + path);
        return v;
    };
    auto get_str = [&]() {
        std::string s(get_u64(), '\0');
        in.read(s.data(), static_cast<std::streamsize>(s.size()));
        if (!in) throw ParseError("truncated checkpoint: " + path);
        return s;
    };
    char magic[8];
    in.read(magic, 8);
    if (!in || std::string(magic, 4) != "DRMC") throw ParseError("not a checkpoint: " + path);

    LoadedCheckpoint out;
    const std::uint64_t n_meta = get_u64();
    for (std::uint64_t i = 0; i < n_meta; ++i) {
        std::string k = get_str();
        out.meta[k] = get_str();
    }
    auto meta_at = [&](const std::string& k) {
        auto it = out.meta.find(k);
        if (it == out.meta.end()) throw ParseError("checkpoint missing meta key " + k);
        return it->second;
    };

    VariantConfig v;
    v.use_real = meta_at("use_real") == "1";
    v.use_virtual = meta_at("use_virtual") == "1";
    v.relation_aware = meta_at("relation_aware") == "1";
    const std::string temporal = meta_at("temporal");
    v.temporal = temporal == "tie"   ? TemporalMode::tie
                 : temporal == "gru" ? TemporalMode::gru
                                     : TemporalMode::none;
    v.sessions = std::stoi(meta_at("sessions"));
    v.aggregate_projected = meta_at("aggregate_projected") == "1";
    v.literal_linear_gates = meta_at("literal_linear_gates") == "1";
    v.predict_from_tie_state = meta_at("predict_from_tie_state") == "1";
    v.batch_norm = meta_at("batch_norm") == "1";
    v.per_session_params = meta_at("per_session_params") == "1";
    v.allow_center_only = meta_at("allow_center_only") == "1";
    v.attention_depth = std::stoi(meta_at("attention_depth"));
    v.head = meta_at("head") == "mlp" ? RankHead::mlp : RankHead::dot;

    out.store = ParamStore::init(std::stoull(meta_at("n_users")), std::stoull(meta_at("n_items")),
                                 std::stoull(meta_at("d")), v,
                                 std::stoull(meta_at("init_seed")));

    const std::uint64_t n_tensors = get_u64();
    auto named = out.store.named_tensors();
    if (n_tensors != named.size())
        throw ParseError("checkpoint tensor count mismatch in " + path);
    for (std::uint64_t i = 0; i < n_tensors; ++i) {
        const std::string name = get_str();
        if (name != named[i].first)
            throw ParseError("checkpoint tensor order mismatch at '" + name + "'");
        Tensor* t = named[i].second;
        const std::uint64_t rank = get_u64();
        Shape shape(rank);
        for (auto& dsz : shape) dsz = get_u64();
        if (shape != t->shape) throw ParseError("checkpoint shape mismatch for '" + name + "'");
        in.read(reinterpret_cast<char*>(t->data.data()),
                static_cast<std::streamsize>(t->data.size() * sizeof(double)));
        if (!in) throw ParseError("truncated checkpoint tensor '" + name + "'");
    }
    const std::uint64_t bn_len = get_u64();
    out.store.bn_mean.resize(bn_len);
    out.store.bn_var.resize(bn_len);
    if (bn_len) {
        in.read(reinterpret_cast<char*>(out.store.bn_mean.data()),
                static_cast<std::streamsize>(bn_len * sizeof(double)));
        in.read(reinterpret_cast<char*>(out.store.bn_var.data()),
                static_cast<std::streamsize>(bn_len * sizeof(double)));
        if (!in) throw ParseError("truncated checkpoint BN stats");
    }
    return out;
}

} // namespace dream
