#pragma once

// Relation-aware graph attention over a completed ego network. Neighbor
// states are projected per relation inside the score only; the softmaxed
// attention mixes the un-projected node inputs (a flag switches to
// projecting in the aggregation too). The self node
// always joins the softmax through the identity projection.

#include <cstdint>
#include <vector>

#include "dream/completion.hpp"
#include "dream/error.hpp"
#include "dream/rng.hpp"
#include "dream/tensor.hpp"

namespace dream {

struct RgatParams {
    Tensor proj_real;    // d x d
    Tensor proj_virtual; // d x d
    Tensor attn_real;    // 2d; score = leaky_relu(w . [center || projected])
    Tensor attn_virtual; // 2d
    Tensor attn_self;    // 2d
    // Optional deeper scoring network (attention depth 2).
    int attn_depth = 1;
    Tensor attn_hidden_real, attn_hidden_virtual, attn_hidden_self;       // d x 2d
    Tensor attn_hidden_b_real, attn_hidden_b_virtual, attn_hidden_b_self; // d
    Tensor attn_out_real, attn_out_virtual, attn_out_self;                // d

    static RgatParams init(std::size_t d, Rng& rng, double scale = 0.05, int depth = 1) {
        RgatParams p;
        p.attn_depth = depth;
        p.proj_real = Tensor::zeros({d, d}, true);
        p.proj_virtual = Tensor::zeros({d, d}, true);
        p.attn_real = Tensor::zeros({2 * d}, true);
        p.attn_virtual = Tensor::zeros({2 * d}, true);
        p.attn_self = Tensor::zeros({2 * d}, true);
        if (depth == 2) {
            for (Tensor* t : {&p.attn_hidden_real, &p.attn_hidden_virtual, &p.attn_hidden_self})
                *t = Tensor::zeros({d, 2 * d}, true);
            for (Tensor* t :
                 {&p.attn_hidden_b_real, &p.attn_hidden_b_virtual, &p.attn_hidden_b_self})
                *t = Tensor::zeros({d}, true);
            for (Tensor* t : {&p.attn_out_real, &p.attn_out_virtual, &p.attn_out_self})
                *t = Tensor::zeros({d}, true);
        }
        for (Tensor* t : tensors(p))
            for (double& v : t->data) v = rng.uniform(-scale, scale);
        return p;
    }

    static std::vector<Tensor*> tensors(RgatParams& p) {
        std::vector<Tensor*> out{&p.proj_real, &p.proj_virtual, &p.attn_real, &p.attn_virtual,
                                 &p.attn_self};
        if (p.attn_depth == 2)
            for (Tensor* t : {&p.attn_hidden_real, &p.attn_hidden_virtual, &p.attn_hidden_self,
                              &p.attn_hidden_b_real, &p.attn_hidden_b_virtual,
                              &p.attn_hidden_b_self, &p.attn_out_real, &p.attn_out_virtual,
                              &p.attn_out_self})
                out.push_back(t);
        return out;
    }

    std::size_t dim() const { return proj_real.shape[0]; }
};

// Node inputs for one ego network: center state plus neighbor states with
// relation labels. The center appears exactly once, implicitly last in
// the attention ordering.
struct EgoBatch {
    Var center;
    struct NeighborState {
        Var state;
        Relation relation;
    };
    std::vector<NeighborState> neighbors;
};

namespace rgat_detail {

enum class Slot : std::uint8_t { real, virt, self };

// With relation awareness off, every slot resolves to the `real`
// parameters; tied-parameter runs are then bit-identical to plain GAT.
inline Slot resolve(Slot s, bool relation_aware) { return relation_aware ? s : Slot::real; }

inline Var score(Tape& tape, RgatParams& p, Slot slot, Var center, Var projected) {
    Var joint = tape.concat(center, projected);
    if (p.attn_depth == 2) {
        Tensor* w1 = slot == Slot::real   ? &p.attn_hidden_real
                     : slot == Slot::virt ? &p.attn_hidden_virtual
                                          : &p.attn_hidden_self;
        Tensor* b1 = slot == Slot::real   ? &p.attn_hidden_b_real
                     : slot == Slot::virt ? &p.attn_hidden_b_virtual
                                          : &p.attn_hidden_b_self;
        Tensor* w2 = slot == Slot::real   ? &p.attn_out_real
                     : slot == Slot::virt ? &p.attn_out_virtual
                                          : &p.attn_out_self;
        Var hidden = tape.leaky_relu(tape.add(tape.matvec(tape.leaf(*w1), joint), tape.leaf(*b1)));
        return tape.dot(tape.leaf(*w2), hidden);
    }
    Tensor* w = slot == Slot::real   ? &p.attn_real
                : slot == Slot::virt ? &p.attn_virtual
                                     : &p.attn_self;
    return tape.leaky_relu(tape.dot(tape.leaf(*w), joint));
}

} // namespace rgat_detail

// Softmax-normalized attention over neighbors followed by the self node.
inline Var attention_scores(Tape& tape, RgatParams& params, const EgoBatch& batch,
                            bool relation_aware = true) {
    using rgat_detail::Slot;
    std::vector<Var> scores;
    scores.reserve(batch.neighbors.size() + 1);
    for (const auto& nb : batch.neighbors) {
        const Slot slot = rgat_detail::resolve(
            nb.relation == Relation::real ? Slot::real : Slot::virt, relation_aware);
        Tensor& proj = slot == Slot::virt ? params.proj_virtual : params.proj_real;
        Var projected = tape.matvec(tape.leaf(proj), nb.state);
        scores.push_back(rgat_detail::score(tape, params, slot, batch.center, projected));
    }
    scores.push_back(rgat_detail::score(
        tape, params, rgat_detail::resolve(Slot::self, relation_aware), batch.center,
        batch.center));
    Var stacked = scores[0];
    for (std::size_t i = 1; i < scores.size(); ++i) stacked = tape.concat(stacked, scores[i]);
    return tape.softmax(stacked);
}

// tanh of the attention-weighted sum of node inputs; the session-t user
// representation. `alpha` must be normalized over neighbors + self.
inline Var aggregate(Tape& tape, RgatParams& params, const EgoBatch& batch, Var alpha,
                     bool relation_aware = true, bool aggregate_projected = false,
                     bool skip_activation = false) {
    const std::size_t d = params.dim();
    const std::size_t n = batch.neighbors.size() + 1;
    if (tape.shape(alpha) != Shape{n})
        throw DimensionError("aggregate: alpha length does not match node count");

    std::vector<Var> terms;
    terms.reserve(n);
    for (std::size_t i = 0; i < batch.neighbors.size(); ++i) {
        Var state = batch.neighbors[i].state;
        if (aggregate_projected) {
            const bool use_virtual =
                relation_aware && batch.neighbors[i].relation == Relation::virt;
            Tensor& proj = use_virtual ? params.proj_virtual : params.proj_real;
            state = tape.matvec(tape.leaf(proj), state);
        }
        terms.push_back(tape.mul(tape.broadcast(tape.slice(alpha, i), d), state));
    }
    terms.push_back(tape.mul(tape.broadcast(tape.slice(alpha, n - 1), d), batch.center));
    Var mixed = tape.add_n(terms);
    return skip_activation ? mixed : tape.tanh_(mixed);
}

} // namespace dream
