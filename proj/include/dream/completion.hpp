#pragma once

// Social network completion: user-user co-occurrence counts from training
// events, GloVe embeddings over those counts, virtual-friend selection by
// embedding similarity, and assembly of the per-session ego graph mixing
// real and virtual neighbors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "dream/dataset.hpp"
#include "dream/error.hpp"
#include "dream/rng.hpp"

namespace dream {

enum class Relation : std::uint8_t { real, virt };

inline const char* to_string(Relation r) { return r == Relation::real ? "real" : "virtual"; }

// Sparse symmetric counts, diagonal excluded. Entries stored once with
// p < q; counts are the number of distinct items both users consumed.
struct CooccurrenceMatrix {
    struct Entry {
        int p;
        int q;
        std::uint32_t count;
    };
    std::vector<Entry> entries; // sorted by (p, q)
    std::size_t n_users = 0;

    std::uint32_t at(int a, int b) const {
        if (a == b) return 0;
        const int p = std::min(a, b), q = std::max(a, b);
        auto it = std::lower_bound(entries.begin(), entries.end(), std::make_pair(p, q),
                                   [](const Entry& e, const std::pair<int, int>& key) {
                                       return std::make_pair(e.p, e.q) < key;
                                   });
        if (it != entries.end() && it->p == p && it->q == q) return it->count;
        return 0;
    }
};

// X_{p,q} = |items(p) ∩ items(q)| over training events, built by inverting
// the item -> users index.
inline CooccurrenceMatrix build_cooccurrence(const Dataset& ds, const SplitAssignment& split) {
    std::vector<std::vector<int>> item_users(ds.n_items());
    for (std::size_t i = 0; i < ds.events.size(); ++i) {
        if (split.labels[i] != SplitLabel::train) continue;
        item_users[static_cast<std::size_t>(ds.events[i].item)].push_back(ds.events[i].user);
    }
    std::unordered_map<std::uint64_t, std::uint32_t> counts;
    const std::uint64_t n = ds.n_users();
    for (auto& users : item_users) {
        std::sort(users.begin(), users.end());
        users.erase(std::unique(users.begin(), users.end()), users.end());
        for (std::size_t a = 0; a < users.size(); ++a)
            for (std::size_t b = a + 1; b < users.size(); ++b)
                counts[static_cast<std::uint64_t>(users[a]) * n +
                       static_cast<std::uint64_t>(users[b])]++;
    }
    CooccurrenceMatrix X;
    X.n_users = ds.n_users();
    X.entries.reserve(counts.size());
    for (const auto& [key, c] : counts)
        X.entries.push_back({static_cast<int>(key / n), static_cast<int>(key % n), c});
    std::sort(X.entries.begin(), X.entries.end(), [](const auto& a, const auto& b) {
        return std::make_pair(a.p, a.q) < std::make_pair(b.p, b.q);
    });
    return X;
}

struct GloveConfig {
    std::size_t dim = 64;
    double x_max = 100.0;
    double alpha = 0.75;
    double lr = 0.05; // AdaGrad-style per-parameter step
    int epochs = 30;
    std::uint64_t seed = 1;
};

struct GloveEmbeddings {
    std::size_t n_users = 0;
    std::size_t dim = 0;
    std::vector<double> vectors; // n x dim, center + context sum
    std::vector<double> epoch_losses;

    const double* row(int u) const { return vectors.data() + static_cast<std::size_t>(u) * dim; }
};

inline double glove_weight(double x, double x_max, double alpha) {
    return x < x_max ? std::pow(x / x_max, alpha) : 1.0;
}

// Weighted least squares on log co-occurrence with AdaGrad updates; each
// stored pair is visited in both (center, context) roles per epoch.
inline GloveEmbeddings train_glove(const CooccurrenceMatrix& X, const GloveConfig& cfg) {
    if (X.entries.empty()) throw ArgumentError("train_glove: empty co-occurrence matrix");
    const std::size_t n = X.n_users, d = cfg.dim;
    std::vector<double> w(n * d), wt(n * d), b(n, 0.0), bt(n, 0.0);
    std::vector<double> gw(n * d, 1.0), gwt(n * d, 1.0), gb(n, 1.0), gbt(n, 1.0);
    Rng init(mix_seed(cfg.seed, hash_name("glove_init")));
    for (auto* v : {&w, &wt})
        for (double& x : *v) x = init.uniform(-0.5, 0.5) / static_cast<double>(d);

    std::vector<std::size_t> order(X.entries.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    GloveEmbeddings out;
    out.n_users = n;
    out.dim = d;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuf(mix_seed(cfg.seed, hash_name("glove_epoch"), static_cast<std::uint64_t>(epoch)));
        shuf.shuffle(order);
        double loss_sum = 0.0;
        for (std::size_t idx : order) {
            const auto& e = X.entries[idx];
            const double logx = std::log(static_cast<double>(e.count));
            const double f = glove_weight(static_cast<double>(e.count), cfg.x_max, cfg.alpha);
            for (int dir = 0; dir < 2; ++dir) {
                const std::size_t c = static_cast<std::size_t>(dir == 0 ? e.p : e.q);
                const std::size_t t = static_cast<std::size_t>(dir == 0 ? e.q : e.p);
                double* wc = w.data() + c * d;
                double* wx = wt.data() + t * d;
                double dotv = b[c] + bt[t] - logx;
                for (std::size_t k = 0; k < d; ++k) dotv += wc[k] * wx[k];
                loss_sum += 0.5 * f * dotv * dotv;
                const double g = f * dotv;
                for (std::size_t k = 0; k < d; ++k) {
                    const double gc = g * wx[k];
                    const double gt = g * wc[k];
                    wc[k] -= cfg.lr * gc / std::sqrt(gw[c * d + k]);
                    wx[k] -= cfg.lr * gt / std::sqrt(gwt[t * d + k]);
                    gw[c * d + k] += gc * gc;
                    gwt[t * d + k] += gt * gt;
                }
                b[c] -= cfg.lr * g / std::sqrt(gb[c]);
                bt[t] -= cfg.lr * g / std::sqrt(gbt[t]);
                gb[c] += g * g;
                gbt[t] += g * g;
            }
        }
        if (!std::isfinite(loss_sum))
            throw TrainError("GloVe training diverged (non-finite loss); lower the step size");
        out.epoch_losses.push_back(loss_sum);
    }
    out.vectors.resize(n * d);
    for (std::size_t i = 0; i < n * d; ++i) out.vectors[i] = w[i] + wt[i];
    return out;
}

// Raw inner product between user embeddings. The global softmax over
// all pair scores is a monotone transform of this, so top-k selection
// is unchanged; normalized weights are computed only for edge export.
inline double score_virtual(const GloveEmbeddings& g, int p, int q) {
    if (p == q) throw ArgumentError("score_virtual: p and q must differ");
    const double* a = g.row(p);
    const double* b = g.row(q);
    double acc = 0.0;
    for (std::size_t k = 0; k < g.dim; ++k) acc += a[k] * b[k];
    return acc;
}

// The k highest-scoring non-excluded users; ties broken by ascending index.
inline std::vector<std::pair<int, double>> select_virtual_friends(
    const GloveEmbeddings& g, int user, std::size_t k_virtual, const std::vector<int>& exclusions) {
    std::vector<std::pair<int, double>> scored;
    if (k_virtual == 0) return scored;
    std::vector<bool> excluded(g.n_users, false);
    excluded[static_cast<std::size_t>(user)] = true;
    for (int e : exclusions)
        if (e >= 0 && static_cast<std::size_t>(e) < g.n_users)
            excluded[static_cast<std::size_t>(e)] = true;
    scored.reserve(g.n_users);
    for (std::size_t q = 0; q < g.n_users; ++q) {
        if (excluded[q]) continue;
        scored.push_back({static_cast<int>(q), score_virtual(g, user, static_cast<int>(q))});
    }
    auto better = [](const std::pair<int, double>& a, const std::pair<int, double>& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    };
    const std::size_t k = std::min(k_virtual, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k),
                      scored.end(), better);
    scored.resize(k);
    return scored;
}

// log(sum over all ordered pairs p != q of exp(<g_p, g_q>)); the softmax
// denominator used when exporting normalized virtual edge weights.
// Two passes keep memory flat for large user counts.
inline double virtual_score_log_norm(const GloveEmbeddings& g) {
    double mx = -1e300;
    for (std::size_t p = 0; p < g.n_users; ++p)
        for (std::size_t q = p + 1; q < g.n_users; ++q)
            mx = std::max(mx, score_virtual(g, static_cast<int>(p), static_cast<int>(q)));
    double sum = 0.0;
    for (std::size_t p = 0; p < g.n_users; ++p)
        for (std::size_t q = p + 1; q < g.n_users; ++q)
            sum += 2.0 * std::exp(score_virtual(g, static_cast<int>(p), static_cast<int>(q)) - mx);
    return mx + std::log(sum);
}

struct Neighbor {
    int user = 0;
    Relation relation = Relation::real;
    double weight = 0.0;
    // index into the neighbor's training sessions (latest strictly before
    // the center session's window), or -1 when none exists and the
    // neighbor's latent feature is used instead.
    int session = -1;
};

struct CompletedGraph {
    int center = 0;
    int session_index = 0; // center's session rank t
    std::vector<Neighbor> neighbors; // sorted by user index, no duplicates
};

struct CompletionConfig {
    std::size_t k_real = 10;
    std::size_t k_virtual = 10;
    std::uint64_t seed = 1;
};

// Uniformly samples min(k_real, |real|) real friends, seeded by
// (user, session rank); appends precomputed top-k virtual friends.
// Each neighbor points at her latest training session strictly before
// `center_window`.
inline CompletedGraph complete_graph(int user, int t, std::int64_t center_window,
                                     const std::vector<int>& real_friends,
                                     const std::vector<std::pair<int, double>>& virtual_friends,
                                     const std::vector<SessionSequence>& train_sessions,
                                     const CompletionConfig& cfg,
                                     std::uint64_t epoch_salt = 0) {
    if (t < 1) throw ArgumentError("complete_graph: session rank must be >= 1");
    CompletedGraph g;
    g.center = user;
    g.session_index = t;

    auto latest_before = [&](int who) -> int {
        const auto& sess = train_sessions[static_cast<std::size_t>(who)].sessions;
        int found = -1;
        for (std::size_t i = 0; i < sess.size(); ++i) {
            if (sess[i].window < center_window && !sess[i].items.empty())
                found = static_cast<int>(i);
            else if (sess[i].window >= center_window)
                break;
        }
        return found;
    };

    std::vector<int> sampled = real_friends;
    if (sampled.size() > cfg.k_real) {
        Rng rng(mix_seed(cfg.seed, hash_name("real_sample"), static_cast<std::uint64_t>(user),
                         static_cast<std::uint64_t>(t), epoch_salt));
        for (std::size_t i = 0; i < cfg.k_real; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.below(sampled.size() - i));
            std::swap(sampled[i], sampled[j]);
        }
        sampled.resize(cfg.k_real);
    }
    for (int f : sampled)
        g.neighbors.push_back({f, Relation::real, 1.0, latest_before(f)});
    for (std::size_t i = 0; i < std::min(cfg.k_virtual, virtual_friends.size()); ++i) {
        const auto& [f, score] = virtual_friends[i];
        g.neighbors.push_back({f, Relation::virt, score, latest_before(f)});
    }
    std::sort(g.neighbors.begin(), g.neighbors.end(),
              [](const Neighbor& a, const Neighbor& b) { return a.user < b.user; });
    return g;
}

} // namespace dream
