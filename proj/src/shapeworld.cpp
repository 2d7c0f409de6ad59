#include "protodet/shapeworld.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace protodet {

const char* shape_name(int class_id) {
    static const char* kNames[] = {"circle", "square", "triangle", "cross",
                                   "ring",   "diamond", "bar",     "star"};
    if (class_id < 0 || class_id >= 8) return "unknown";
    return kNames[class_id];
}

std::vector<int> ShapeWorldSpec::base_classes() const {
    std::vector<int> out;
    for (int c = 0; c < num_base; ++c) out.push_back(c);
    return out;
}

std::vector<int> ShapeWorldSpec::novel_classes() const {
    std::vector<int> out;
    for (int c = num_base; c < num_classes; ++c) out.push_back(c);
    return out;
}

bool Dataset::image_is_all_base(int index) const {
    for (const auto& ann : images[static_cast<size_t>(index)].boxes)
        if (ann.class_id >= spec.num_base) return false;
    return true;
}

namespace {

constexpr int kBar = 6;

// nominal extent (w,h) for a class at one of the three discrete scales;
// these match the detector's candidate grid shapes
std::pair<int, int> shape_extent(int class_id, int size_idx) {
    static const int kSquare[3] = {24, 32, 44};
    static const std::pair<int, int> kBarSizes[3] = {{30, 15}, {40, 20}, {54, 27}};
    if (class_id == kBar) return kBarSizes[size_idx];
    return {kSquare[size_idx], kSquare[size_idx]};
}

bool shape_hit(int class_id, double dx, double dy, double w, double h) {
    const double s = w;  // square-extent classes use w == h
    switch (class_id) {
        case 0:  // circle
            return dx * dx + dy * dy < 0.25 * s * s;
        case 1:  // square
            return std::abs(dx) < 0.5 * s && std::abs(dy) < 0.5 * s;
        case 2: {  // triangle, apex up
            if (std::abs(dy) >= 0.5 * s) return false;
            const double rel = (dy + 0.5 * s) / s;
            return std::abs(dx) < rel * 0.5 * s;
        }
        case 3:  // cross
            return (std::abs(dx) < s / 6.0 && std::abs(dy) < 0.5 * s) ||
                   (std::abs(dy) < s / 6.0 && std::abs(dx) < 0.5 * s);
        case 4: {  // ring
            const double r2 = dx * dx + dy * dy;
            return r2 < 0.25 * s * s && r2 >= 0.0625 * s * s;
        }
        case 5:  // diamond
            return std::abs(dx) + std::abs(dy) < 0.5 * s;
        case kBar:
            return std::abs(dx) < 0.5 * w && std::abs(dy) < 0.5 * h;
        case 7:  // four-point star
            return std::sqrt(std::abs(dx)) + std::sqrt(std::abs(dy)) < std::sqrt(0.5 * s);
        default:
            throw std::invalid_argument("shape_hit: unknown class " + std::to_string(class_id));
    }
}

struct RasterResult {
    Box tight;
    int on_pixels = 0;
};

// Draws the shape and returns the tight box of its raster. When `mask` is
// given the geometry is also recorded there (255 = object).
RasterResult draw_shape(ImageU8& img, ImageU8* mask, int class_id, int cx, int cy, int w, int h,
                        const std::array<uint8_t, 3>& color) {
    int min_x = img.width, min_y = img.height, max_x = -1, max_y = -1;
    int count = 0;
    const int x0 = std::max(0, cx - w / 2 - 1), x1 = std::min(img.width - 1, cx + w / 2 + 1);
    const int y0 = std::max(0, cy - h / 2 - 1), y1 = std::min(img.height - 1, cy + h / 2 + 1);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            if (!shape_hit(class_id, x + 0.5 - cx, y + 0.5 - cy, w, h)) continue;
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = color[c];
            if (mask) mask->at(y, x) = 255;
            min_x = std::min(min_x, x);
            min_y = std::min(min_y, y);
            max_x = std::max(max_x, x);
            max_y = std::max(max_y, y);
            ++count;
        }
    RasterResult out;
    out.on_pixels = count;
    out.tight = {static_cast<double>(min_x), static_cast<double>(min_y),
                 static_cast<double>(max_x + 1), static_cast<double>(max_y + 1)};
    return out;
}

void add_noise(ImageU8& img, int amplitude, Rng& rng) {
    if (amplitude <= 0) return;
    for (auto& p : img.pixels) {
        const int v = static_cast<int>(p) + rng.uniform_int(-amplitude, amplitude);
        p = static_cast<uint8_t>(std::clamp(v, 0, 255));
    }
}

std::array<uint8_t, 3> hsv_to_rgb(double h360, double s, double v) {
    const double c = v * s;
    const double hp = h360 / 60.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else { r = c; b = x; }
    const double m = v - c;
    return {static_cast<uint8_t>(std::lround((r + m) * 255)),
            static_cast<uint8_t>(std::lround((g + m) * 255)),
            static_cast<uint8_t>(std::lround((b + m) * 255))};
}

// Per-class hue windows with jitter; near-disjoint, so color is a strong but
// imperfect cue (distractor blobs reuse the full hue circle) and the
// silhouette disambiguates the rest.
std::array<uint8_t, 3> object_color(int class_id, Rng& rng) {
    const double hue = std::fmod(class_id * 45.0 + rng.uniform(-18.0, 18.0) + 360.0, 360.0);
    return hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.7, 1.0));
}

std::array<uint8_t, 3> distractor_color(Rng& rng) {
    return hsv_to_rgb(rng.uniform(0.0, 360.0), rng.uniform(0.6, 1.0), rng.uniform(0.7, 1.0));
}

AnnotatedImage generate_image(const ShapeWorldSpec& spec, uint64_t image_seed) {
    Rng rng(image_seed);
    const int size = spec.image_size;
    while (true) {  // resample the whole image when placement is unsatisfiable
        const int n_objects = rng.uniform_int(1, 3);
        struct Placed {
            int class_id, size_idx, cx, cy;
            Box nominal;
        };
        std::vector<Placed> placed;
        bool failed = false;
        for (int obj = 0; obj < n_objects && !failed; ++obj) {
            bool ok = false;
            for (int attempt = 0; attempt < 100; ++attempt) {
                const int class_id = rng.uniform_int(0, spec.num_classes - 1);
                const int size_idx = rng.uniform_int(0, 2);
                const auto [w, h] = shape_extent(class_id, size_idx);
                if (w + 2 >= size || h + 2 >= size) continue;
                const int cx = rng.uniform_int(w / 2 + 1, size - w / 2 - 1);
                const int cy = rng.uniform_int(h / 2 + 1, size - h / 2 - 1);
                Box nominal{static_cast<double>(cx - w / 2), static_cast<double>(cy - h / 2),
                            static_cast<double>(cx + w / 2), static_cast<double>(cy + h / 2)};
                bool overlaps = false;
                for (const auto& p : placed)
                    if (iou(nominal, p.nominal) >= 0.2) overlaps = true;
                if (overlaps) continue;
                placed.push_back({class_id, size_idx, cx, cy, nominal});
                ok = true;
                break;
            }
            if (!ok) failed = true;
        }
        if (failed) continue;

        AnnotatedImage out;
        out.image = ImageU8::filled(size, size, 3, 0);
        for (int c = 0; c < 3; ++c) {
            const uint8_t bg = static_cast<uint8_t>(rng.uniform_int(0, 40));
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) out.image.at(y, x, c) = bg;
        }
        // distractor blobs, kept clear of the object boxes
        const int n_blobs = spec.clutter_blobs > 0 ? rng.uniform_int(0, spec.clutter_blobs) : 0;
        for (int blob = 0; blob < n_blobs; ++blob) {
            const int rx = rng.uniform_int(2, 5), ry = rng.uniform_int(2, 5);
            const int bx = rng.uniform_int(rx, size - 1 - rx);
            const int by = rng.uniform_int(ry, size - 1 - ry);
            const std::array<uint8_t, 3> color = distractor_color(rng);
            Box bb{static_cast<double>(bx - rx), static_cast<double>(by - ry),
                   static_cast<double>(bx + rx), static_cast<double>(by + ry)};
            bool clash = false;
            for (const auto& p : placed) {
                const Box& o = p.nominal;
                if (bb.x1 < o.x2 && o.x1 < bb.x2 && bb.y1 < o.y2 && o.y1 < bb.y2) clash = true;
            }
            if (clash) continue;
            for (int y = by - ry; y <= by + ry; ++y)
                for (int x = bx - rx; x <= bx + rx; ++x) {
                    const double ex = (x + 0.5 - bx) / rx, ey = (y + 0.5 - by) / ry;
                    if (ex * ex + ey * ey >= 1.0) continue;
                    for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = color[c];
                }
        }
        for (const auto& p : placed) {
            const auto [w, h] = shape_extent(p.class_id, p.size_idx);
            RasterResult r = draw_shape(out.image, nullptr, p.class_id, p.cx, p.cy, w, h,
                                        object_color(p.class_id, rng));
            if (r.on_pixels == 0) continue;
            out.boxes.push_back({r.tight, p.class_id});
        }
        if (out.boxes.empty()) continue;
        add_noise(out.image, spec.noise_amplitude, rng);
        return out;
    }
}

SupportRender generate_support(const ShapeWorldSpec& spec, int class_id, uint64_t support_seed) {
    Rng rng(support_seed);
    const int size = spec.image_size;
    SupportRender out;
    out.class_id = class_id;
    out.image = ImageU8::filled(size, size, 3, 0);
    for (int c = 0; c < 3; ++c) {
        const uint8_t bg = static_cast<uint8_t>(rng.uniform_int(0, 40));
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) out.image.at(y, x, c) = bg;
    }
    out.mask = ImageU8::filled(size, size, 1, 0);
    // object-crop framing: the object fills most of the support image, the
    // way a resized square crop of a detection box would
    const int s = 2 * rng.uniform_int(24, 29);  // 48..58, even
    const int h = (class_id == kBar) ? s / 2 : s;
    draw_shape(out.image, &out.mask, class_id, size / 2, size / 2, s, h,
               object_color(class_id, rng));
    add_noise(out.image, spec.noise_amplitude, rng);
    return out;
}

}  // namespace

Dataset generate_dataset(const ShapeWorldSpec& spec, int n_images) {
    if (spec.image_size % 8)
        throw std::invalid_argument("generate_dataset: image_size must be divisible by 8");
    Dataset ds;
    ds.spec = spec;
    ds.images.reserve(static_cast<size_t>(n_images));
    for (int i = 0; i < n_images; ++i)
        ds.images.push_back(
            generate_image(spec, Rng::mix(spec.seed, Rng::mix(0x494d47, static_cast<uint64_t>(i)))));
    ds.supports.resize(static_cast<size_t>(spec.num_classes));
    for (int c = 0; c < spec.num_classes; ++c) {
        ds.supports[static_cast<size_t>(c)].reserve(static_cast<size_t>(spec.supports_per_class));
        for (int j = 0; j < spec.supports_per_class; ++j)
            ds.supports[static_cast<size_t>(c)].push_back(generate_support(
                spec, c,
                Rng::mix(spec.seed, Rng::mix(0x535550, static_cast<uint64_t>(c) * 1000 + j))));
    }
    return ds;
}

void save_dataset(const Dataset& dataset, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir + "/images");
    fs::create_directories(dir + "/supports");
    std::ofstream man(dir + "/manifest.txt");
    if (!man) throw std::runtime_error("save_dataset: cannot write manifest in '" + dir + "'");
    const auto& spec = dataset.spec;
    man << "# protodet-dataset v1\n";
    man << "seed " << spec.seed << "\n";
    man << "image_size " << spec.image_size << "\n";
    man << "num_classes " << spec.num_classes << "\n";
    man << "num_base " << spec.num_base << "\n";
    man << "clutter_blobs " << spec.clutter_blobs << "\n";
    man << "noise_amplitude " << spec.noise_amplitude << "\n";
    man << "supports_per_class " << spec.supports_per_class << "\n";
    char buf[256];
    for (size_t i = 0; i < dataset.images.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "images/img_%05zu.ppm", i);
        write_pnm(dir + "/" + buf, dataset.images[i].image);
        man << "image " << buf << " " << dataset.images[i].boxes.size() << "\n";
        for (const auto& ann : dataset.images[i].boxes) {
            std::snprintf(buf, sizeof(buf), "box %.17g %.17g %.17g %.17g %d", ann.box.x1, ann.box.y1,
                          ann.box.x2, ann.box.y2, ann.class_id);
            man << buf << "\n";
        }
    }
    for (size_t c = 0; c < dataset.supports.size(); ++c)
        for (size_t j = 0; j < dataset.supports[c].size(); ++j) {
            char img_path[64], mask_path[64];
            std::snprintf(img_path, sizeof(img_path), "supports/s%zu_%02zu.ppm", c, j);
            std::snprintf(mask_path, sizeof(mask_path), "supports/s%zu_%02zu_mask.pgm", c, j);
            write_pnm(dir + "/" + img_path, dataset.supports[c][j].image);
            write_pnm(dir + "/" + mask_path, dataset.supports[c][j].mask);
            man << "support " << c << " " << img_path << " " << mask_path << "\n";
        }
    if (!man) throw std::runtime_error("save_dataset: manifest write failed");
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream man(dir + "/manifest.txt");
    if (!man) throw std::runtime_error("load_dataset: cannot open manifest in '" + dir + "'");
    std::string header;
    std::getline(man, header);
    if (header != "# protodet-dataset v1")
        throw std::runtime_error("load_dataset: unsupported manifest header '" + header + "'");
    Dataset ds;
    std::string key;
    while (man >> key) {
        if (key == "seed")
            man >> ds.spec.seed;
        else if (key == "image_size")
            man >> ds.spec.image_size;
        else if (key == "num_classes") {
            man >> ds.spec.num_classes;
            ds.supports.resize(static_cast<size_t>(ds.spec.num_classes));
        } else if (key == "num_base")
            man >> ds.spec.num_base;
        else if (key == "clutter_blobs")
            man >> ds.spec.clutter_blobs;
        else if (key == "noise_amplitude")
            man >> ds.spec.noise_amplitude;
        else if (key == "supports_per_class")
            man >> ds.spec.supports_per_class;
        else if (key == "image") {
            std::string path;
            size_t n_boxes = 0;
            man >> path >> n_boxes;
            AnnotatedImage img;
            img.image = read_pnm(dir + "/" + path);
            for (size_t b = 0; b < n_boxes; ++b) {
                std::string tag;
                BoxAnnotation ann;
                man >> tag >> ann.box.x1 >> ann.box.y1 >> ann.box.x2 >> ann.box.y2 >> ann.class_id;
                if (tag != "box") throw std::runtime_error("load_dataset: malformed box line");
                img.boxes.push_back(ann);
            }
            ds.images.push_back(std::move(img));
        } else if (key == "support") {
            int class_id = 0;
            std::string img_path, mask_path;
            man >> class_id >> img_path >> mask_path;
            SupportRender s;
            s.class_id = class_id;
            s.image = read_pnm(dir + "/" + img_path);
            s.mask = read_pnm(dir + "/" + mask_path);
            ds.supports[static_cast<size_t>(class_id)].push_back(std::move(s));
        } else {
            throw std::runtime_error("load_dataset: unknown manifest key '" + key + "'");
        }
    }
    return ds;
}

}  // namespace protodet
