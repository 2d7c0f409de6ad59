#include "protodet/visualize.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace protodet {

ImageU8 normalize_heatmap(const Tensor& map2d, double& min_out, double& max_out, bool& constant_out) {
    if (map2d.rank() != 2)
        throw std::invalid_argument("normalize_heatmap: expected [H,W], got " +
                                    shape_str(map2d.shape()));
    const auto& data = map2d.data();
    min_out = *std::min_element(data.begin(), data.end());
    max_out = *std::max_element(data.begin(), data.end());
    constant_out = (min_out == max_out);
    ImageU8 img = ImageU8::filled(map2d.dim(1), map2d.dim(0), 1, 128);
    if (!constant_out) {
        const double inv = 255.0 / (max_out - min_out);
        for (size_t i = 0; i < data.size(); ++i)
            img.pixels[i] = static_cast<uint8_t>(std::lround((data[i] - min_out) * inv));
    }
    return img;
}

namespace {

void write_heatmap(const std::string& stem, const Tensor& map2d) {
    double lo = 0, hi = 0;
    bool constant = false;
    ImageU8 img = normalize_heatmap(map2d, lo, hi, constant);
    write_pnm(stem + ".pgm", img);
    std::ofstream side(stem + ".range.txt");
    if (!side) throw std::runtime_error("dump_visualizations: cannot write '" + stem + ".range.txt'");
    char buf[96];
    side << "# protodet-range v1\n";
    std::snprintf(buf, sizeof(buf), "min %.17g\nmax %.17g\nconstant %d\n", lo, hi, constant ? 1 : 0);
    side << buf;
}

}  // namespace

void dump_visualizations(const Model& model, const Dataset& dataset, const Episode& episode,
                         const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::map<int, std::vector<SupportInstance>> supports;
    for (const auto& [class_id, indices] : episode.support_indices)
        for (int idx : indices) supports[class_id].push_back(support_instance(dataset, class_id, idx));
    const auto support_feats = model.support_feature_map(supports);
    const AggregationOptions agg = model.aggregation_options();

    char name[160];
    for (size_t qi = 0; qi < episode.query_indices.size(); ++qi) {
        const AnnotatedImage& img = dataset.images[static_cast<size_t>(episode.query_indices[qi])];
        Tensor qfeat = model.query_features(image_to_tensor(img.image));
        const auto coupled = model.couple_supports(qfeat, support_feats);
        for (const auto& [class_id, features] : coupled) {
            std::vector<ImagePrototype> protos;
            for (size_t s = 0; s < features.size(); ++s) {
                std::snprintf(name, sizeof(name), "%s/q%zu_c%d_s%zu_condition", out_dir.c_str(), qi,
                              class_id, s);
                write_heatmap(name, features[s].condition);
                ImagePrototype proto = agg.use_intra
                                           ? intra_dam(features[s].feature, agg.alpha, class_id)
                                           : image_prototype(features[s].feature, agg.img_proto,
                                                             class_id);
                std::snprintf(name, sizeof(name), "%s/q%zu_c%d_s%zu_weights", out_dir.c_str(), qi,
                              class_id, s);
                write_heatmap(name, proto.weights);
                protos.push_back(std::move(proto));
            }
            ClassPrototype cp = agg.use_inter ? inter_dam(protos, model.inter,
                                                          agg.normalize_contributions)
                                              : mean_prototype(protos);
            std::snprintf(name, sizeof(name), "%s/q%zu_c%d_contributions.txt", out_dir.c_str(), qi,
                          class_id);
            std::ofstream contrib(name);
            if (!contrib)
                throw std::runtime_error(std::string("dump_visualizations: cannot write '") + name +
                                         "'");
            contrib << "# protodet-contributions v1\n";
            char buf[64];
            for (const auto& c : cp.contributions) {
                std::snprintf(buf, sizeof(buf), "%.17g\n", c.item());
                contrib << buf;
            }
        }
    }
}

}  // namespace protodet
