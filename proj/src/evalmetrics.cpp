#include "protodet/evalmetrics.hpp"

#include <algorithm>
#include <cstdio>

#include "protodet/episodic.hpp"

namespace protodet {

double voc_ap(const std::vector<ScoredBox>& detections,
              const std::map<int, std::vector<Box>>& gts_by_image, double iou_thresh) {
    int total_gt = 0;
    for (const auto& [img, boxes] : gts_by_image) total_gt += static_cast<int>(boxes.size());
    if (total_gt == 0) return 0.0;

    std::vector<size_t> order(detections.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return detections[a].score > detections[b].score; });

    std::map<int, std::vector<bool>> matched;
    for (const auto& [img, boxes] : gts_by_image) matched[img].assign(boxes.size(), false);

    std::vector<double> precision, recall;
    int tp = 0, fp = 0;
    for (size_t oi = 0; oi < order.size(); ++oi) {
        const ScoredBox& det = detections[order[oi]];
        double best_iou = 0.0;
        int best_gt = -1;
        const auto it = gts_by_image.find(det.image_id);
        if (it != gts_by_image.end()) {
            for (size_t g = 0; g < it->second.size(); ++g) {
                const double v = iou(det.box, it->second[g]);
                if (v > best_iou) {
                    best_iou = v;
                    best_gt = static_cast<int>(g);
                }
            }
        }
        if (best_gt >= 0 && best_iou >= iou_thresh && !matched[det.image_id][static_cast<size_t>(best_gt)]) {
            matched[det.image_id][static_cast<size_t>(best_gt)] = true;
            ++tp;
        } else {
            ++fp;
        }
        precision.push_back(static_cast<double>(tp) / (tp + fp));
        recall.push_back(static_cast<double>(tp) / total_gt);
    }

    // area under the interpolated PR curve (precision made monotone from the right)
    double ap = 0.0, prev_recall = 0.0;
    for (size_t i = 0; i < precision.size(); ++i) {
        double p_interp = 0.0;
        for (size_t j = i; j < precision.size(); ++j) p_interp = std::max(p_interp, precision[j]);
        ap += (recall[i] - prev_recall) * p_interp;
        prev_recall = recall[i];
    }
    return ap;
}

EvalReport evaluate_detections(const Dataset& dataset, int first, int last,
                               const DetectorFn& detector) {
    EvalReport report;
    report.n_images = last - first;
    std::map<int, std::vector<ScoredBox>> dets_by_class;
    std::map<int, std::map<int, std::vector<Box>>> gts_by_class;
    for (int i = first; i < last; ++i) {
        const AnnotatedImage& img = dataset.images[static_cast<size_t>(i)];
        for (const auto& ann : img.boxes) {
            gts_by_class[ann.class_id][i].push_back(ann.box);
            report.gt_counts[ann.class_id]++;
        }
        for (const auto& det : detector(i, img)) {
            dets_by_class[det.class_id].push_back({det.score, i, det.box});
            report.detection_counts[det.class_id]++;
        }
    }
    double base_sum = 0, novel_sum = 0;
    int base_n = 0, novel_n = 0;
    for (const auto& [class_id, gts] : gts_by_class) {
        const auto it = dets_by_class.find(class_id);
        const double ap = voc_ap(it == dets_by_class.end() ? std::vector<ScoredBox>{} : it->second,
                                 gts);
        report.per_class_ap[class_id] = ap;
        if (class_id < dataset.spec.num_base) {
            base_sum += ap;
            ++base_n;
        } else {
            novel_sum += ap;
            ++novel_n;
        }
    }
    report.map_base = base_n ? base_sum / base_n : 0.0;
    report.map_novel = novel_n ? novel_sum / novel_n : 0.0;
    return report;
}

std::map<int, std::vector<int>> eval_support_indices(const Dataset& dataset,
                                                     const EvalOptions& options) {
    Rng rng(Rng::mix(options.seed, 0x4556414cULL));
    std::map<int, std::vector<int>> out;
    for (int class_id = 0; class_id < dataset.spec.num_classes; ++class_id) {
        const auto fixed = options.fixed_supports.find(class_id);
        if (fixed != options.fixed_supports.end()) {
            std::vector<int> indices = fixed->second;
            if (static_cast<int>(indices.size()) > options.k)
                indices.resize(static_cast<size_t>(options.k));
            out[class_id] = std::move(indices);
            continue;
        }
        const int n = static_cast<int>(dataset.supports[static_cast<size_t>(class_id)].size());
        std::vector<int> pool(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
        for (int i = 0; i < options.k && i < n; ++i) {
            const int j = rng.uniform_int(i, n - 1);
            std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
        }
        pool.resize(static_cast<size_t>(std::min(options.k, n)));
        out[class_id] = std::move(pool);
    }
    return out;
}

EvalReport evaluate_map(const Model& model, const Dataset& dataset, const EvalOptions& options) {
    const auto support_idx = eval_support_indices(dataset, options);
    std::map<int, std::vector<SupportInstance>> supports;
    for (const auto& [class_id, indices] : support_idx)
        for (int idx : indices) supports[class_id].push_back(support_instance(dataset, class_id, idx));
    const auto support_feats = model.support_feature_map(supports);

    EvalReport report = evaluate_detections(
        dataset, options.first, options.last, [&](int, const AnnotatedImage& img) {
            return predict_with_features(model, image_to_tensor(img.image), support_feats,
                                         options.score_thresh, options.nms_iou);
        });
    report.seed = options.seed;
    report.config_fingerprint = options.config_fingerprint;
    return report;
}

std::string EvalReport::to_text(const ShapeWorldSpec& spec) const {
    std::string out = "# protodet-eval v1\n";
    char buf[160];
    std::snprintf(buf, sizeof(buf), "seed %llu\n", static_cast<unsigned long long>(seed));
    out += buf;
    out += "config " + config_fingerprint + "\n";
    std::snprintf(buf, sizeof(buf), "images %d\n", n_images);
    out += buf;
    for (const auto& [class_id, ap] : per_class_ap) {
        const auto det_it = detection_counts.find(class_id);
        std::snprintf(buf, sizeof(buf), "class %d %s %s ap %.17g gts %d dets %d\n", class_id,
                      shape_name(class_id), class_id < spec.num_base ? "base" : "novel", ap,
                      gt_counts.at(class_id),
                      det_it == detection_counts.end() ? 0 : det_it->second);
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "map_base %.17g\nmap_novel %.17g\n", map_base, map_novel);
    out += buf;
    return out;
}

}  // namespace protodet
