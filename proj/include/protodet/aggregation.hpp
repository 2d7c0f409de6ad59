#pragma once

#include <map>
#include <string>
#include <vector>

#include "protodet/coupling.hpp"
#include "protodet/params.hpp"
#include "protodet/tensor.hpp"

namespace protodet {

// One support image condensed to a vector; the per-pixel aggregation weights
// are kept for dumps.
struct ImagePrototype {
    Tensor v;        // [C]
    Tensor weights;  // [Hs,Ws], in [-1,1] (all-ones for the plain pooling modes)
    int class_id = -1;
};

// k image prototypes of one class fused into a class vector; contributions
// are the per-image probabilities (sigmoid outputs).
struct ClassPrototype {
    Tensor v;  // [C]
    int class_id = -1;
    std::vector<Tensor> contributions;  // k scalars
};

struct InterDamParams {
    Tensor fc_weight;  // [1,C]
    Tensor fc_bias;    // [1]

    static InterDamParams init(int channels, Rng& rng);
    void register_into(ParamRegistry& registry, const std::string& prefix);
};

enum class ImgProtoMode { gap, gap_gmp };

// Pixels weighted by their cosine similarity to the map's global mean vector:
// v = gap(x) + (alpha/N) * sum_i w_i * x_i. Weights are not clamped;
// anti-correlated pixels legitimately subtract.
ImagePrototype intra_dam(const Tensor& feature, double alpha, int class_id = -1);

// Plain pooling prototypes for the non-intra arms.
ImagePrototype image_prototype(const Tensor& feature, ImgProtoMode mode, int class_id = -1);

// p_i = sigmoid(fc(v_i)); v_cls = sum_i p_i * v_i. Probabilities are used
// unnormalized; `normalize` rescales them to sum 1 (study switch, not the
// default path).
ClassPrototype inter_dam(const std::vector<ImagePrototype>& protos, const InterDamParams& params,
                         bool normalize = false);

// Unweighted mean of image prototypes (the plain-average arm).
ClassPrototype mean_prototype(const std::vector<ImagePrototype>& protos);

struct AggregationOptions {
    bool use_intra = true;
    bool use_inter = true;
    ImgProtoMode img_proto = ImgProtoMode::gap;  // used when use_intra is false
    double alpha = 1.0;
    bool normalize_contributions = false;
};

// Per class: image prototypes from the coupled features, then the class
// fusion. Prototypes inherit the query specificity of their inputs.
std::map<int, ClassPrototype> aggregate_prototypes(
    const std::map<int, std::vector<CoupledFeature>>& coupled, const AggregationOptions& options,
    const InterDamParams& params);

}  // namespace protodet
