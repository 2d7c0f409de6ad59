#include "protodet/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace protodet {

InterDamParams InterDamParams::init(int channels, Rng& rng) {
    // scaled well below 1/sqrt(C) so initial contribution probabilities sit
    // near 0.5 whatever magnitude the prototypes reach
    const double bound = 0.1 / std::sqrt(static_cast<double>(channels));
    InterDamParams p;
    p.fc_weight = Tensor::uniform({1, channels}, -bound, bound, rng);
    p.fc_bias = Tensor::zeros({1});
    return p;
}

void InterDamParams::register_into(ParamRegistry& registry, const std::string& prefix) {
    registry.add(prefix + ".fc.weight", fc_weight);
    registry.add(prefix + ".fc.bias", fc_bias);
}

ImagePrototype intra_dam(const Tensor& feature, double alpha, int class_id) {
    if (feature.rank() != 3)
        throw std::invalid_argument("intra_dam: expected [C,H,W], got " + shape_str(feature.shape()));
    if (alpha < 0) throw std::invalid_argument("intra_dam: alpha must be non-negative");
    Tensor pooled = gap(feature);
    Tensor weights = cosine_map(pooled, feature);
    // (alpha/N) * sum of w o x over positions == alpha * gap(w o x)
    Tensor correction = scale(gap(hadamard(weights, feature)), alpha);
    ImagePrototype out;
    out.v = add(pooled, correction);
    out.weights = weights;
    out.class_id = class_id;
    return out;
}

ImagePrototype image_prototype(const Tensor& feature, ImgProtoMode mode, int class_id) {
    if (feature.rank() != 3)
        throw std::invalid_argument("image_prototype: expected [C,H,W], got " +
                                    shape_str(feature.shape()));
    ImagePrototype out;
    out.v = (mode == ImgProtoMode::gap_gmp) ? add(gap(feature), gmp(feature)) : gap(feature);
    out.weights = Tensor::full({feature.dim(1), feature.dim(2)}, 1.0);
    out.class_id = class_id;
    return out;
}

static void check_same_class(const std::vector<ImagePrototype>& protos, const char* op) {
    if (protos.empty()) throw std::invalid_argument(std::string(op) + ": empty prototype list");
    for (const auto& p : protos)
        if (p.class_id != protos.front().class_id)
            throw std::invalid_argument(std::string(op) + ": mixed class ids " +
                                        std::to_string(protos.front().class_id) + " and " +
                                        std::to_string(p.class_id));
}

// Summation order independent of the input permutation, so reordering the k
// supports of a class reproduces v_cls bit-for-bit (float addition is not
// associative, so list order alone would not).
static Tensor sum_canonical(std::vector<Tensor> terms) {
    std::vector<size_t> idx(terms.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
        return std::lexicographical_compare(terms[a].data().begin(), terms[a].data().end(),
                                            terms[b].data().begin(), terms[b].data().end());
    });
    Tensor sum = terms[idx[0]];
    for (size_t i = 1; i < idx.size(); ++i) sum = add(sum, terms[idx[i]]);
    return sum;
}

ClassPrototype inter_dam(const std::vector<ImagePrototype>& protos, const InterDamParams& params,
                         bool normalize) {
    check_same_class(protos, "inter_dam");
    ClassPrototype out;
    out.class_id = protos.front().class_id;
    out.contributions.reserve(protos.size());
    for (const auto& p : protos)
        out.contributions.push_back(sigmoid(linear(p.v, params.fc_weight, params.fc_bias)));

    std::vector<Tensor> weights = out.contributions;
    if (normalize) {
        std::vector<Tensor> probs = out.contributions;
        Tensor inv_total = reciprocal(sum_canonical(std::move(probs)));
        for (auto& w : weights) w = mul_scalar(w, inv_total);
    }
    std::vector<Tensor> terms;
    terms.reserve(protos.size());
    for (size_t i = 0; i < protos.size(); ++i) terms.push_back(mul_scalar(protos[i].v, weights[i]));
    out.v = sum_canonical(std::move(terms));
    return out;
}

ClassPrototype mean_prototype(const std::vector<ImagePrototype>& protos) {
    check_same_class(protos, "mean_prototype");
    std::vector<Tensor> terms;
    terms.reserve(protos.size());
    for (const auto& p : protos) terms.push_back(p.v);
    ClassPrototype out;
    out.v = scale(sum_canonical(std::move(terms)), 1.0 / static_cast<double>(protos.size()));
    out.class_id = protos.front().class_id;
    return out;
}

std::map<int, ClassPrototype> aggregate_prototypes(
    const std::map<int, std::vector<CoupledFeature>>& coupled, const AggregationOptions& options,
    const InterDamParams& params) {
    std::map<int, ClassPrototype> out;
    for (const auto& [class_id, features] : coupled) {
        if (features.empty())
            throw std::invalid_argument("aggregate_prototypes: class " + std::to_string(class_id) +
                                        " has no coupled features");
        std::vector<ImagePrototype> protos;
        protos.reserve(features.size());
        for (const auto& f : features)
            protos.push_back(options.use_intra
                                 ? intra_dam(f.feature, options.alpha, class_id)
                                 : image_prototype(f.feature, options.img_proto, class_id));
        out.emplace(class_id, options.use_inter
                                  ? inter_dam(protos, params, options.normalize_contributions)
                                  : mean_prototype(protos));
    }
    return out;
}

}  // namespace protodet
