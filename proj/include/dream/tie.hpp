#pragma once

// Temporal information encoding: a GRU-like gate that interpolates the
// carried user state with the current session's attention output.
//
//   u_q = gate(W_q u~_{t-1} + b_q)
//   u_e = gate(W_e u_t + b_e)
//   h~  = tanh(W_h u_t + u_e o U_h u~_{t-1} + b_h)
//   u~_t = (1 - u_q) o u~_{t-1} + u_q o h~
//
// The gates are logistic by default. Bare linear gates make (1 - u_q)
// an unbounded mixing weight; `literal_linear_gates` keeps that literal
// form for comparison.

#include <cstdint>
#include <span>
#include <vector>

#include "dream/error.hpp"
#include "dream/rng.hpp"
#include "dream/tensor.hpp"

namespace dream {

struct TieParams {
    Tensor w_gate, b_gate;     // W_q, b_q
    Tensor w_excite, b_excite; // W_e, b_e
    Tensor w_cand, u_cand, b_cand; // W_h, U_h, b_h

    static TieParams init(std::size_t d, Rng& rng, double scale = 0.05) {
        TieParams p;
        for (Tensor* t : {&p.w_gate, &p.w_excite, &p.w_cand, &p.u_cand})
            *t = Tensor::zeros({d, d}, true);
        for (Tensor* t : {&p.b_gate, &p.b_excite, &p.b_cand}) *t = Tensor::zeros({d}, true);
        for (Tensor* t : tensors(p))
            for (double& v : t->data) v = rng.uniform(-scale, scale);
        return p;
    }

    static std::vector<Tensor*> tensors(TieParams& p) {
        return {&p.w_gate, &p.b_gate, &p.w_excite, &p.b_excite, &p.w_cand, &p.u_cand, &p.b_cand};
    }

    std::size_t dim() const { return b_gate.shape[0]; }
};

// One update. `forced_gate`, when given, replaces the computed u_q
// elementwise (diagnostic hook for the exact carry-through/replace limits).
inline Var tie_step(Tape& tape, TieParams& p, Var prev, Var current,
                    bool literal_linear_gates = false,
                    const std::vector<double>* forced_gate = nullptr) {
    const std::size_t d = p.dim();
    if (tape.shape(prev) != Shape{d} || tape.shape(current) != Shape{d})
        throw DimensionError("tie_step: state dimension mismatch");

    Var gate_lin = tape.add(tape.matvec(tape.leaf(p.w_gate), prev), tape.leaf(p.b_gate));
    Var excite_lin = tape.add(tape.matvec(tape.leaf(p.w_excite), current), tape.leaf(p.b_excite));
    Var gate = literal_linear_gates ? gate_lin : tape.logistic_(gate_lin);
    Var excite = literal_linear_gates ? excite_lin : tape.logistic_(excite_lin);
    if (forced_gate) {
        if (forced_gate->size() != d) throw DimensionError("tie_step: forced gate size mismatch");
        gate = tape.constant_vector(*forced_gate);
    }

    Var cand = tape.tanh_(tape.add(
        tape.add(tape.matvec(tape.leaf(p.w_cand), current),
                 tape.mul(excite, tape.matvec(tape.leaf(p.u_cand), prev))),
        tape.leaf(p.b_cand)));
    Var keep = tape.sub(tape.constant(std::vector<double>(d, 1.0), {d}), gate);
    return tape.add(tape.mul(keep, prev), tape.mul(gate, cand));
}

// Sequential application over the per-session attention outputs; returns
// every intermediate state u~_1..u~_T. Gradients flow through the whole
// unroll. With per-session parameters, step t uses params[min(t-1, last)].
inline std::vector<Var> tie_unroll(Tape& tape, std::span<TieParams> params, Var initial,
                                   std::span<const Var> session_outputs,
                                   bool literal_linear_gates = false) {
    if (session_outputs.empty()) throw ArgumentError("tie_unroll: empty session sequence");
    if (params.empty()) throw ArgumentError("tie_unroll: no parameter sets");
    std::vector<Var> states;
    states.reserve(session_outputs.size());
    Var carry = initial;
    for (std::size_t t = 0; t < session_outputs.size(); ++t) {
        TieParams& p = params[std::min(t, params.size() - 1)];
        carry = tie_step(tape, p, carry, session_outputs[t], literal_linear_gates);
        states.push_back(carry);
    }
    return states;
}

} // namespace dream
