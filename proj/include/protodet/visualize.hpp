#pragma once

#include <string>

#include "protodet/detector.hpp"
#include "protodet/episodic.hpp"

namespace protodet {

// Writes, per (query image, support) pair, the coupling condition map and
// the intra-image aggregation weight map as 8-bit PGMs (min-max normalized
// per map, ranges preserved in text sidecars), plus the per-class
// contribution probabilities. Heatmap dimensions equal the support feature
// grid.
void dump_visualizations(const Model& model, const Dataset& dataset, const Episode& episode,
                         const std::string& out_dir);

// Min-max normalization used for the heatmaps; a constant map renders as
// mid-gray (128) and the sidecar flags it.
ImageU8 normalize_heatmap(const Tensor& map2d, double& min_out, double& max_out, bool& constant_out);

}  // namespace protodet
