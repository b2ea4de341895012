#pragma once

// GRU over an item sequence. Encodes a friend's previous-session items
// into her short-term interest vector; the same cell doubles as the
// temporal fusion unit in the DREAM-TGRU variant.

#include <cstdint>
#include <span>
#include <vector>

#include "dream/error.hpp"
#include "dream/rng.hpp"
#include "dream/tensor.hpp"

namespace dream {

struct GruParams {
    Tensor w_update, u_update, b_update; // z gate
    Tensor w_reset, u_reset, b_reset;    // r gate
    Tensor w_cand, u_cand, b_cand;       // candidate

    static GruParams init(std::size_t d, Rng& rng, double scale = 0.05) {
        GruParams p;
        for (Tensor* t : {&p.w_update, &p.u_update, &p.w_reset, &p.u_reset, &p.w_cand, &p.u_cand})
            *t = Tensor::zeros({d, d}, true);
        for (Tensor* t : {&p.b_update, &p.b_reset, &p.b_cand}) *t = Tensor::zeros({d}, true);
        for (Tensor* t : tensors(p))
            for (double& v : t->data) v = rng.uniform(-scale, scale);
        return p;
    }

    static std::vector<Tensor*> tensors(GruParams& p) {
        return {&p.w_update, &p.u_update, &p.b_update, &p.w_reset, &p.u_reset,
                &p.b_reset,  &p.w_cand,   &p.u_cand,   &p.b_cand};
    }

    std::size_t dim() const { return b_update.shape[0]; }
};

// One step: z,r logistic gates, tanh candidate with the reset gate applied
// to the recurrent term, h' = (1-z) o h + z o candidate.
inline Var gru_cell(Tape& tape, GruParams& p, Var x, Var h) {
    Var z = tape.logistic_(tape.add(
        tape.add(tape.matvec(tape.leaf(p.w_update), x), tape.matvec(tape.leaf(p.u_update), h)),
        tape.leaf(p.b_update)));
    Var r = tape.logistic_(tape.add(
        tape.add(tape.matvec(tape.leaf(p.w_reset), x), tape.matvec(tape.leaf(p.u_reset), h)),
        tape.leaf(p.b_reset)));
    Var cand = tape.tanh_(tape.add(
        tape.add(tape.matvec(tape.leaf(p.w_cand), x), tape.mul(r, tape.matvec(tape.leaf(p.u_cand), h))),
        tape.leaf(p.b_cand)));
    Var keep = tape.sub(tape.constant(std::vector<double>(p.dim(), 1.0), {p.dim()}), z);
    return tape.add(tape.mul(keep, h), tape.mul(z, cand));
}

// Runs the GRU from a zero state over the item-embedding rows of a session
// and returns the final hidden state. Sessions longer than `max_items`
// are truncated to their most recent items.
inline Var encode_session(Tape& tape, GruParams& p, Tensor& item_embeddings,
                          std::span<const int> items, std::size_t max_items = 20) {
    if (items.empty()) throw ArgumentError("encode_session: session must be non-empty");
    const std::size_t d = p.dim();
    const std::size_t start = items.size() > max_items ? items.size() - max_items : 0;
    Var h = tape.constant(std::vector<double>(d, 0.0), {d});
    for (std::size_t i = start; i < items.size(); ++i) {
        Var x = tape.embedding_row(item_embeddings, static_cast<std::size_t>(items[i]));
        h = gru_cell(tape, p, x, h);
    }
    return h;
}

} // namespace dream
