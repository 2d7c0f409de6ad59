#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "protodet/geometry.hpp"
#include "protodet/imageio.hpp"
#include "protodet/rng.hpp"

namespace protodet {

// Class roster: 0 circle, 1 square, 2 triangle, 3 cross, 4 ring, 5 diamond,
// 6 bar, 7 star. The first num_base ids are base classes, the rest novel.
const char* shape_name(int class_id);

struct ShapeWorldSpec {
    uint64_t seed = 42;
    int image_size = 64;
    int num_classes = 8;
    int num_base = 6;
    int clutter_blobs = 3;     // distractor blobs per query image
    int noise_amplitude = 8;   // +- uniform 8-bit channel noise
    int supports_per_class = 20;

    std::vector<int> base_classes() const;
    std::vector<int> novel_classes() const;
};

struct AnnotatedImage {
    ImageU8 image;
    std::vector<BoxAnnotation> boxes;
};

// Single centered object with its exact binary raster mask.
struct SupportRender {
    ImageU8 image;
    ImageU8 mask;
    int class_id = -1;
};

struct Dataset {
    ShapeWorldSpec spec;
    std::vector<AnnotatedImage> images;
    std::vector<std::vector<SupportRender>> supports;  // indexed by class id

    bool image_is_all_base(int index) const;
};

// Deterministic: same spec and count give bit-identical pixels and boxes.
// Each image derives its own seed, so generation order is irrelevant.
Dataset generate_dataset(const ShapeWorldSpec& spec, int n_images);

// On-disk layout: manifest.txt plus binary PPM images and PGM masks.
// Round-trips bit-exactly.
void save_dataset(const Dataset& dataset, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace protodet
