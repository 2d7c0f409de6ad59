#include "protodet/episodic.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace protodet {

namespace {

// Fisher-Yates prefix of size k over a copy of `pool`.
std::vector<int> sample_without_replacement(std::vector<int> pool, int k, Rng& rng) {
    for (int i = 0; i < k; ++i) {
        const int j = rng.uniform_int(i, static_cast<int>(pool.size()) - 1);
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    }
    pool.resize(static_cast<size_t>(k));
    return pool;
}

}  // namespace

std::vector<int> eligible_query_images(const Dataset& dataset, const std::vector<int>& class_pool,
                                       int first, int last) {
    std::vector<int> out;
    for (int i = first; i < last; ++i) {
        bool ok = true;
        for (const auto& ann : dataset.images[static_cast<size_t>(i)].boxes)
            if (std::find(class_pool.begin(), class_pool.end(), ann.class_id) == class_pool.end())
                ok = false;
        if (ok) out.push_back(i);
    }
    return out;
}

Episode sample_episode(const Dataset& dataset, const std::vector<int>& class_pool, int k,
                       int n_query, const std::vector<int>& query_pool, Rng& rng,
                       const std::map<int, std::vector<int>>* allowed_supports) {
    if (class_pool.empty()) throw std::invalid_argument("sample_episode: empty class pool");
    if (query_pool.empty()) throw std::invalid_argument("sample_episode: empty query image pool");
    Episode ep;
    ep.k = k;
    for (int class_id : class_pool) {
        std::vector<int> pool;
        if (allowed_supports && allowed_supports->count(class_id)) {
            pool = allowed_supports->at(class_id);
        } else {
            const int n = static_cast<int>(dataset.supports[static_cast<size_t>(class_id)].size());
            pool.resize(static_cast<size_t>(n));
            for (int i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
        }
        if (static_cast<int>(pool.size()) < k)
            throw std::invalid_argument("sample_episode: class " + std::to_string(class_id) +
                                        " (" + shape_name(class_id) + ") has only " +
                                        std::to_string(pool.size()) + " supports, need " +
                                        std::to_string(k));
        ep.support_indices[class_id] = sample_without_replacement(std::move(pool), k, rng);
    }
    std::vector<int> queries = query_pool;
    const int nq = std::min<int>(n_query, static_cast<int>(queries.size()));
    ep.query_indices = sample_without_replacement(std::move(queries), nq, rng);
    return ep;
}

SupportInstance support_instance(const Dataset& dataset, int class_id, int index) {
    const SupportRender& render = dataset.supports[static_cast<size_t>(class_id)][static_cast<size_t>(index)];
    SupportInstance out;
    out.image = image_to_tensor(render.image);
    out.mask = mask_to_tensor(render.mask);
    out.class_id = class_id;
    return out;
}

namespace {

// Jittered copy of a GT box with IoU >= 0.5, so the classifier and the
// regression head see the imperfect boxes the sliding-window grid produces
// at inference.
std::optional<RoI> sample_jittered_positive(const Tensor& feat, const BoxAnnotation& gt,
                                            int image_size, Rng& rng) {
    for (int attempt = 0; attempt < 20; ++attempt) {
        const double jw = gt.box.width() * rng.uniform(0.8, 1.25);
        const double jh = gt.box.height() * rng.uniform(0.8, 1.25);
        const double jcx = gt.box.cx() + gt.box.width() * rng.uniform(-0.15, 0.15);
        const double jcy = gt.box.cy() + gt.box.height() * rng.uniform(-0.15, 0.15);
        Box box{jcx - jw / 2, jcy - jh / 2, jcx + jw / 2, jcy + jh / 2};
        box.x1 = std::max(box.x1, 0.0);
        box.y1 = std::max(box.y1, 0.0);
        box.x2 = std::min(box.x2, static_cast<double>(image_size));
        box.y2 = std::min(box.y2, static_cast<double>(image_size));
        if (iou(box, gt.box) < 0.5) continue;
        RoI roi;
        roi.box = box;
        roi.feature = roi_feature(feat, box, image_size, image_size);
        roi.label = gt.class_id;
        roi.positive = true;
        roi.reg_target = encode_deltas(box, gt.box);
        return roi;
    }
    return std::nullopt;
}

// Random boxes from the candidate shape set with IoU < 0.3 to every GT box.
std::vector<Box> sample_negative_boxes(const std::vector<BoxAnnotation>& gts, int image_size,
                                       int count, Rng& rng) {
    static const std::array<std::pair<double, double>, 6> kShapes = {{
        {24, 24}, {32, 32}, {44, 44}, {30, 15}, {40, 20}, {54, 27},
    }};
    std::vector<Box> out;
    for (int i = 0; i < count; ++i) {
        for (int attempt = 0; attempt < 50; ++attempt) {
            const auto& [w, h] = kShapes[static_cast<size_t>(rng.uniform_int(0, 5))];
            const double cx = rng.uniform(w / 2, image_size - w / 2);
            const double cy = rng.uniform(h / 2, image_size - h / 2);
            Box box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
            bool clash = false;
            for (const auto& gt : gts)
                if (iou(box, gt.box) >= 0.3) clash = true;
            if (clash) continue;
            out.push_back(box);
            break;
        }
    }
    return out;
}

}  // namespace

Tensor episode_loss(const Model& model, const Dataset& dataset, const Episode& episode, Rng& rng,
                    const TrainSchedule& schedule) {
    const int image_size = dataset.spec.image_size;
    std::map<int, std::vector<SupportInstance>> supports;
    for (const auto& [class_id, indices] : episode.support_indices)
        for (int idx : indices) supports[class_id].push_back(support_instance(dataset, class_id, idx));
    auto support_feats = model.support_feature_map(supports);

    Tensor loss;
    for (size_t qi = 0; qi < episode.query_indices.size(); ++qi) {
        const AnnotatedImage& annotated = dataset.images[static_cast<size_t>(episode.query_indices[qi])];
        ImageU8 pixels = annotated.image;
        std::vector<BoxAnnotation> gts = annotated.boxes;
        if (schedule.flip_augment && rng.bernoulli(0.5)) {
            pixels = flip_horizontal(pixels);
            for (auto& ann : gts) ann.box = flip_horizontal(ann.box, image_size);
        }
        Tensor qfeat = model.query_features(image_to_tensor(pixels));
        auto prototypes = model.build_prototypes(qfeat, support_feats);

        std::vector<RoI> rois = extract_roi_features(qfeat, gts, image_size, image_size);
        for (const auto& gt : gts) {
            auto jittered = sample_jittered_positive(qfeat, gt, image_size, rng);
            if (jittered) rois.push_back(std::move(*jittered));
        }
        const int n_positive = static_cast<int>(rois.size());
        const auto negatives =
            sample_negative_boxes(gts, image_size, schedule.negatives_per_positive * n_positive, rng);
        for (const auto& box : negatives) {
            RoI roi;
            roi.box = box;
            roi.feature = roi_feature(qfeat, box, image_size, image_size);
            rois.push_back(std::move(roi));
        }

        DetectionOutputs outputs = detection_forward(rois, prototypes, model.heads);
        // labels as roster indices, background last
        std::vector<int> labels(rois.size());
        std::vector<Tensor> positive_deltas;
        std::vector<std::array<double, 4>> reg_targets;
        for (size_t r = 0; r < rois.size(); ++r) {
            if (rois[r].positive) {
                const auto it = std::find(outputs.roster.begin(), outputs.roster.end(), rois[r].label);
                if (it == outputs.roster.end())
                    throw std::runtime_error("episode_loss: query annotation class " +
                                             std::to_string(rois[r].label) +
                                             " missing from the episode roster");
                const size_t roster_idx = static_cast<size_t>(it - outputs.roster.begin());
                labels[r] = static_cast<int>(roster_idx);
                positive_deltas.push_back(outputs.deltas[r][roster_idx]);
                reg_targets.push_back(rois[r].reg_target);
            } else {
                labels[r] = static_cast<int>(outputs.roster.size());
            }
        }
        std::vector<int> proto_labels;
        for (const auto& [class_id, proto] : prototypes) proto_labels.push_back(class_id);
        Tensor q_loss = total_loss(outputs.logits, labels, positive_deltas, reg_targets,
                                   meta_logits(prototypes, model.heads), proto_labels,
                                   model.config.lambda);
        loss = loss.defined() ? add(loss, q_loss) : q_loss;
    }
    return scale(loss, 1.0 / static_cast<double>(episode.query_indices.size()));
}

namespace {

TrainResult train_loop(Model& model, const Dataset& dataset, const TrainSchedule& schedule,
                       uint64_t seed, const std::vector<int>& class_pool,
                       const std::vector<int>& query_pool,
                       const std::map<int, std::vector<int>>* allowed_supports) {
    if (query_pool.empty()) throw std::invalid_argument("train: no eligible query images");
    TrainResult result;
    result.loss_trace.reserve(static_cast<size_t>(schedule.iterations));
    SgdOptimizer opt(model.registry, schedule.lr, schedule.momentum, schedule.weight_decay);
    Rng root(seed);
    for (int iter = 0; iter < schedule.iterations; ++iter) {
        Rng rng = root.fork(static_cast<uint64_t>(iter));
        Episode episode = sample_episode(dataset, class_pool, schedule.k, schedule.n_query,
                                         query_pool, rng, allowed_supports);
        for (int idx : episode.query_indices) result.visited_images.push_back(idx);
        Tensor loss = episode_loss(model, dataset, episode, rng, schedule);
        const double value = loss.item();
        if (!std::isfinite(value))
            throw std::runtime_error("train: non-finite loss " + std::to_string(value) +
                                     " at iteration " + std::to_string(iter) + ", episode seed " +
                                     std::to_string(rng.seed()));
        loss.backward();
        opt.step();
        result.loss_trace.push_back(value);
    }
    return result;
}

}  // namespace

TrainResult meta_train(Model& model, const Dataset& dataset, const TrainSchedule& schedule,
                       uint64_t seed, int train_first, int train_last) {
    const auto base = dataset.spec.base_classes();
    const auto pool = eligible_query_images(dataset, base, train_first, train_last);
    return train_loop(model, dataset, schedule, Rng::mix(seed, 0x4d545241), base, pool, nullptr);
}

TrainResult meta_finetune(Model& model, const Dataset& dataset, const TrainSchedule& schedule,
                          uint64_t seed, int train_first, int train_last,
                          const std::map<int, std::vector<int>>& novel_pool) {
    std::vector<int> all_classes;
    for (int c = 0; c < dataset.spec.num_classes; ++c) all_classes.push_back(c);
    const auto pool = eligible_query_images(dataset, all_classes, train_first, train_last);
    return train_loop(model, dataset, schedule, Rng::mix(seed, 0x46494e45), all_classes, pool,
                      &novel_pool);
}

std::map<int, std::vector<int>> pick_novel_pool(const Dataset& dataset, int k, uint64_t seed) {
    Rng rng(Rng::mix(seed, 0x4e4f56454cULL));
    std::map<int, std::vector<int>> out;
    for (int class_id : dataset.spec.novel_classes()) {
        const int n = static_cast<int>(dataset.supports[static_cast<size_t>(class_id)].size());
        std::vector<int> pool(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
        for (int i = 0; i < k && i < n; ++i) {
            const int j = rng.uniform_int(i, n - 1);
            std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
        }
        pool.resize(static_cast<size_t>(std::min(k, n)));
        out[class_id] = std::move(pool);
    }
    return out;
}

}  // namespace protodet
