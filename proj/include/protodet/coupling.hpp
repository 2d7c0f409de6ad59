#pragma once

#include <utility>

#include "protodet/params.hpp"
#include "protodet/tensor.hpp"

namespace protodet {

// Cross-attention projections for query-conditioned support features.
// proj_q reads the support map, proj_k/proj_v read the query map, all 1x1
// C -> d; proj_out maps the assembled content back d -> C.
struct CouplingParams {
    Tensor wq, bq;      // [d,C,1,1], [d]
    Tensor wk, bk;      // [d,C,1,1], [d]
    Tensor wv, bv;      // [d,C,1,1], [d]
    Tensor wout, bout;  // [C,d,1,1], [C]
    int channels = 0;
    int embed_dim = 0;

    // proj_out starts at zero so the module begins as an identity on the
    // support features.
    static CouplingParams init(int channels, int embed_dim, Rng& rng);
    void register_into(ParamRegistry& registry, const std::string& prefix);
};

// Query-conditioned support feature plus the internals kept for dumps.
struct CoupledFeature {
    Tensor feature;    // [C,Hs,Ws]
    Tensor condition;  // [Hs,Ws], values in [0,1] when clamped
    Tensor attention;  // [Ns,Nq], rows sum to 1
    int class_id = -1;
};

// Restructures the query map onto the support grid: attention rows are
// softmax over query positions of Q^T K, and the output is the attention-
// weighted sum of query values projected back to C channels.
// Returns (restructured query content [C,Hs,Ws], attention [Ns,Nq]).
std::pair<Tensor, Tensor> generate_coupled_info(const Tensor& x_q, const Tensor& x_s,
                                                const CouplingParams& params);

// Cosine similarity between the query's global vector and each support
// position; negatives zeroed unless clamp=false.
Tensor compute_condition(const Tensor& x_q, const Tensor& x_s, bool clamp = true);

// x_hat_s = condition o x_hat_q + x_s
Tensor couple(const Tensor& x_s, const Tensor& x_hat_q, const Tensor& condition);

// Full pass. use_condition=false replaces the mask with all-ones (plain
// residual cross-attention).
CoupledFeature coupling_forward(const Tensor& x_q, const Tensor& x_s, const CouplingParams& params,
                                bool use_condition = true, bool clamp_condition = true);

}  // namespace protodet
