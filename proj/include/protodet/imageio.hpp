#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "protodet/tensor.hpp"

namespace protodet {

// Interleaved 8-bit image, 1 (grayscale) or 3 (RGB) channels.
struct ImageU8 {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<uint8_t> pixels;

    uint8_t& at(int y, int x, int c = 0) {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    uint8_t at(int y, int x, int c = 0) const {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    static ImageU8 filled(int width, int height, int channels, uint8_t value);
};

// Binary PPM (P6) for 3-channel, binary PGM (P5) for 1-channel images.
void write_pnm(const std::string& path, const ImageU8& image);
ImageU8 read_pnm(const std::string& path);

// [C,H,W] tensor with values scaled by 1/255
Tensor image_to_tensor(const ImageU8& image);
// grayscale mask to a binary [1,H,W] tensor (nonzero -> 1)
Tensor mask_to_tensor(const ImageU8& mask);
ImageU8 flip_horizontal(const ImageU8& image);

}  // namespace protodet
