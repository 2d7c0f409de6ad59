#include "protodet/coupling.hpp"

#include <cmath>
#include <stdexcept>

namespace protodet {

CouplingParams CouplingParams::init(int channels, int embed_dim, Rng& rng) {
    if (channels < 1 || embed_dim < 1)
        throw std::invalid_argument("CouplingParams: channels and embed_dim must be positive");
    CouplingParams p;
    p.channels = channels;
    p.embed_dim = embed_dim;
    const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
    p.wq = Tensor::uniform({embed_dim, channels, 1, 1}, -bound, bound, rng);
    p.bq = Tensor::zeros({embed_dim});
    p.wk = Tensor::uniform({embed_dim, channels, 1, 1}, -bound, bound, rng);
    p.bk = Tensor::zeros({embed_dim});
    p.wv = Tensor::uniform({embed_dim, channels, 1, 1}, -bound, bound, rng);
    p.bv = Tensor::zeros({embed_dim});
    p.wout = Tensor::zeros({channels, embed_dim, 1, 1});
    p.bout = Tensor::zeros({channels});
    return p;
}

void CouplingParams::register_into(ParamRegistry& registry, const std::string& prefix) {
    registry.add(prefix + ".q.weight", wq);
    registry.add(prefix + ".q.bias", bq);
    registry.add(prefix + ".k.weight", wk);
    registry.add(prefix + ".k.bias", bk);
    registry.add(prefix + ".v.weight", wv);
    registry.add(prefix + ".v.bias", bv);
    registry.add(prefix + ".out.weight", wout);
    registry.add(prefix + ".out.bias", bout);
}

static void check_channels(const char* op, const Tensor& x, int channels) {
    if (x.rank() != 3 || x.dim(0) != channels)
        throw std::invalid_argument(std::string(op) + ": expected [" + std::to_string(channels) +
                                    ",H,W], got " + shape_str(x.shape()));
}

std::pair<Tensor, Tensor> generate_coupled_info(const Tensor& x_q, const Tensor& x_s,
                                                const CouplingParams& params) {
    check_channels("generate_coupled_info(query)", x_q, params.channels);
    check_channels("generate_coupled_info(support)", x_s, params.channels);
    const int hs = x_s.dim(1), ws = x_s.dim(2);
    const int ns = hs * ws;
    const int nq = x_q.dim(1) * x_q.dim(2);
    const int d = params.embed_dim;

    Tensor q = reshape(conv2d(x_s, params.wq, params.bq), {d, ns});
    Tensor k = reshape(conv2d(x_q, params.wk, params.bk), {d, nq});
    Tensor v = reshape(conv2d(x_q, params.wv, params.bv), {d, nq});

    // each support position distributes weight over query positions
    Tensor attention = softmax(matmul(transpose(q), k), 1);
    Tensor gathered = transpose(matmul(attention, transpose(v)));  // [d,Ns]
    Tensor x_hat_q = conv2d(reshape(gathered, {d, hs, ws}), params.wout, params.bout);
    return {x_hat_q, attention};
}

Tensor compute_condition(const Tensor& x_q, const Tensor& x_s, bool clamp) {
    if (x_q.rank() != 3 || x_s.rank() != 3 || x_q.dim(0) != x_s.dim(0))
        throw std::invalid_argument("compute_condition: channel mismatch " + shape_str(x_q.shape()) +
                                    " vs " + shape_str(x_s.shape()));
    Tensor cond = cosine_map(gap(x_q), x_s);
    return clamp ? relu(cond) : cond;
}

Tensor couple(const Tensor& x_s, const Tensor& x_hat_q, const Tensor& condition) {
    return add(hadamard(condition, x_hat_q), x_s);
}

CoupledFeature coupling_forward(const Tensor& x_q, const Tensor& x_s, const CouplingParams& params,
                                bool use_condition, bool clamp_condition) {
    auto [x_hat_q, attention] = generate_coupled_info(x_q, x_s, params);
    Tensor condition = use_condition ? compute_condition(x_q, x_s, clamp_condition)
                                     : Tensor::full({x_s.dim(1), x_s.dim(2)}, 1.0);
    CoupledFeature out;
    out.feature = couple(x_s, x_hat_q, condition);
    out.condition = condition;
    out.attention = attention;
    return out;
}

}  // namespace protodet
