#include "protodet/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace protodet {

uint64_t fnv1a64(const std::string& text) {
    uint64_t hash = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        hash ^= c;
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

namespace {

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw std::invalid_argument("config: boolean expected for '" + key + "', got '" + value + "'");
}

int parse_int(const std::string& key, const std::string& value) {
    size_t pos = 0;
    int v = 0;
    try {
        v = std::stoi(value, &pos);
    } catch (...) {
        pos = 0;
    }
    if (pos != value.size())
        throw std::invalid_argument("config: integer expected for '" + key + "', got '" + value + "'");
    return v;
}

double parse_double(const std::string& key, const std::string& value) {
    size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(value, &pos);
    } catch (...) {
        pos = 0;
    }
    if (pos != value.size())
        throw std::invalid_argument("config: number expected for '" + key + "', got '" + value + "'");
    return v;
}

uint64_t parse_u64(const std::string& key, const std::string& value) {
    size_t pos = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(value, &pos);
    } catch (...) {
        pos = 0;
    }
    if (pos != value.size())
        throw std::invalid_argument("config: unsigned integer expected for '" + key + "', got '" +
                                    value + "'");
    return v;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

}  // namespace

void RunConfig::set(const std::string& section, const std::string& key, const std::string& value) {
    const std::string full = section + "." + key;
    if (full == "run.seed") seed = parse_u64(full, value);
    else if (full == "run.out") out = value;
    else if (full == "run.threads") threads = parse_int(full, value);
    else if (full == "dataset.image_size") image_size = parse_int(full, value);
    else if (full == "dataset.train_images") train_images = parse_int(full, value);
    else if (full == "dataset.eval_images") eval_images = parse_int(full, value);
    else if (full == "dataset.supports_per_class") supports_per_class = parse_int(full, value);
    else if (full == "dataset.clutter_blobs") clutter_blobs = parse_int(full, value);
    else if (full == "dataset.noise_amplitude") noise_amplitude = parse_int(full, value);
    else if (full == "dataset.num_classes") num_classes = parse_int(full, value);
    else if (full == "dataset.num_base") num_base = parse_int(full, value);
    else if (full == "model.channels") channels = parse_int(full, value);
    else if (full == "model.embed_dim") embed_dim = parse_int(full, value);
    else if (full == "coupling.enabled") coupling_enabled = parse_bool(full, value);
    else if (full == "coupling.condition") coupling_condition = parse_bool(full, value);
    else if (full == "coupling.clamp") coupling_clamp = parse_bool(full, value);
    else if (full == "aggregation.intra") aggregation_intra = parse_bool(full, value);
    else if (full == "aggregation.inter") aggregation_inter = parse_bool(full, value);
    else if (full == "aggregation.alpha") alpha = parse_double(full, value);
    else if (full == "aggregation.img_proto") {
        if (value != "gap" && value != "gap_gmp")
            throw std::invalid_argument("config: aggregation.img_proto must be gap or gap_gmp");
        img_proto = value;
    } else if (full == "aggregation.normalize") normalize_contributions = parse_bool(full, value);
    else if (full == "loss.lambda") lambda = parse_double(full, value);
    else if (full == "train.iterations") train_iterations = parse_int(full, value);
    else if (full == "train.lr") train_lr = parse_double(full, value);
    else if (full == "train.momentum") train_momentum = parse_double(full, value);
    else if (full == "train.weight_decay") train_weight_decay = parse_double(full, value);
    else if (full == "train.k") train_k = parse_int(full, value);
    else if (full == "train.flip") train_flip = parse_bool(full, value);
    else if (full == "train.negatives_per_positive") negatives_per_positive = parse_int(full, value);
    else if (full == "finetune.iterations") finetune_iterations = parse_int(full, value);
    else if (full == "finetune.lr") finetune_lr = parse_double(full, value);
    else if (full == "finetune.k") finetune_k = parse_int(full, value);
    else if (full == "eval.score_thresh") score_thresh = parse_double(full, value);
    else if (full == "eval.nms_iou") nms_iou = parse_double(full, value);
    else if (full == "ablate.seeds") ablate_seeds = parse_int(full, value);
    else if (full == "ablate.shots") ablate_shots = value;
    else if (full == "ablate.arms") {
        if (value != "table3" && value != "pooling" && value != "condition")
            throw std::invalid_argument("config: ablate.arms must be table3, pooling or condition");
        ablate_arms = value;
    } else if (full == "gradcheck.scope") gradcheck_scope = value;
    else if (full == "viz.queries") viz_queries = parse_int(full, value);
    else
        throw std::invalid_argument("config: unknown key '" + full + "'");

    if (lambda < 0) throw std::invalid_argument("config: loss.lambda must be >= 0");
    if (alpha < 0) throw std::invalid_argument("config: aggregation.alpha must be >= 0");
}

std::string RunConfig::serialize() const {
    char buf[128];
    std::ostringstream out_s;
    out_s << "# protodet-config v1\n";
    const auto emit = [&](const char* key, const std::string& value) {
        out_s << key << "=" << value << "\n";
    };
    const auto num = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return std::string(buf);
    };
    out_s << "[run]\n";
    emit("seed", std::to_string(seed));
    emit("out", out);
    emit("threads", std::to_string(threads));
    out_s << "[dataset]\n";
    emit("image_size", std::to_string(image_size));
    emit("train_images", std::to_string(train_images));
    emit("eval_images", std::to_string(eval_images));
    emit("supports_per_class", std::to_string(supports_per_class));
    emit("clutter_blobs", std::to_string(clutter_blobs));
    emit("noise_amplitude", std::to_string(noise_amplitude));
    emit("num_classes", std::to_string(num_classes));
    emit("num_base", std::to_string(num_base));
    out_s << "[model]\n";
    emit("channels", std::to_string(channels));
    emit("embed_dim", std::to_string(embed_dim));
    out_s << "[coupling]\n";
    emit("enabled", coupling_enabled ? "true" : "false");
    emit("condition", coupling_condition ? "true" : "false");
    emit("clamp", coupling_clamp ? "true" : "false");
    out_s << "[aggregation]\n";
    emit("intra", aggregation_intra ? "true" : "false");
    emit("inter", aggregation_inter ? "true" : "false");
    emit("alpha", num(alpha));
    emit("img_proto", img_proto);
    emit("normalize", normalize_contributions ? "true" : "false");
    out_s << "[loss]\n";
    emit("lambda", num(lambda));
    out_s << "[train]\n";
    emit("iterations", std::to_string(train_iterations));
    emit("lr", num(train_lr));
    emit("momentum", num(train_momentum));
    emit("weight_decay", num(train_weight_decay));
    emit("k", std::to_string(train_k));
    emit("flip", train_flip ? "true" : "false");
    emit("negatives_per_positive", std::to_string(negatives_per_positive));
    out_s << "[finetune]\n";
    emit("iterations", std::to_string(finetune_iterations));
    emit("lr", num(finetune_lr));
    emit("k", std::to_string(finetune_k));
    out_s << "[eval]\n";
    emit("score_thresh", num(score_thresh));
    emit("nms_iou", num(nms_iou));
    out_s << "[ablate]\n";
    emit("seeds", std::to_string(ablate_seeds));
    emit("shots", ablate_shots);
    emit("arms", ablate_arms);
    out_s << "[gradcheck]\n";
    emit("scope", gradcheck_scope);
    out_s << "[viz]\n";
    emit("queries", std::to_string(viz_queries));
    return out_s.str();
}

std::string RunConfig::fingerprint() const {
    // out dir and worker count do not influence any output byte
    RunConfig canonical = *this;
    canonical.out = "";
    canonical.threads = 0;
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(canonical.serialize())));
    return buf;
}

RunConfig RunConfig::parse_text(const std::string& text) {
    RunConfig config;
    std::istringstream in(text);
    std::string line, section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw std::invalid_argument("config: malformed section at line " +
                                            std::to_string(line_no));
            section = line.substr(1, line.size() - 2);
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: expected key=value at line " +
                                        std::to_string(line_no));
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (section.empty())
            throw std::invalid_argument("config: key '" + key + "' outside any [section]");
        config.set(section, key, value);
    }
    return config;
}

RunConfig RunConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_text(buf.str());
}

ShapeWorldSpec RunConfig::world_spec() const {
    ShapeWorldSpec spec;
    spec.seed = Rng::mix(seed, 0x574f524c44ULL);
    spec.image_size = image_size;
    spec.num_classes = num_classes;
    spec.num_base = num_base;
    spec.clutter_blobs = clutter_blobs;
    spec.noise_amplitude = noise_amplitude;
    spec.supports_per_class = supports_per_class;
    return spec;
}

ModelConfig RunConfig::model_config() const {
    ModelConfig m;
    m.channels = channels;
    m.embed_dim = embed_dim;
    m.num_classes = num_classes;
    m.use_coupling = coupling_enabled;
    m.use_condition = coupling_condition;
    m.clamp_condition = coupling_clamp;
    m.use_intra = aggregation_intra;
    m.use_inter = aggregation_inter;
    m.img_proto = (img_proto == "gap_gmp") ? ImgProtoMode::gap_gmp : ImgProtoMode::gap;
    m.normalize_contributions = normalize_contributions;
    m.alpha = alpha;
    m.lambda = lambda;
    m.score_thresh = score_thresh;
    m.nms_iou = nms_iou;
    return m;
}

TrainSchedule RunConfig::train_schedule() const {
    TrainSchedule s;
    s.iterations = train_iterations;
    s.lr = train_lr;
    s.momentum = train_momentum;
    s.weight_decay = train_weight_decay;
    s.k = train_k;
    s.flip_augment = train_flip;
    s.negatives_per_positive = negatives_per_positive;
    return s;
}

TrainSchedule RunConfig::finetune_schedule() const {
    TrainSchedule s = train_schedule();
    s.iterations = finetune_iterations;
    s.lr = finetune_lr;
    s.k = finetune_k;
    return s;
}

std::vector<int> RunConfig::shots_list() const {
    std::vector<int> shots;
    std::istringstream in(ablate_shots);
    std::string item;
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) shots.push_back(parse_int("ablate.shots", item));
    }
    if (shots.empty()) throw std::invalid_argument("config: ablate.shots is empty");
    return shots;
}

AblationRunConfig RunConfig::ablation_config() const {
    AblationRunConfig a;
    a.world = world_spec();
    a.train_images = train_images;
    a.eval_images = eval_images;
    a.model = model_config();
    a.train = train_schedule();
    a.finetune = finetune_schedule();
    a.seeds.clear();
    for (int i = 0; i < ablate_seeds; ++i) a.seeds.push_back(seed + static_cast<uint64_t>(i));
    a.shots = shots_list();
    a.threads = threads;
    return a;
}

}  // namespace protodet
