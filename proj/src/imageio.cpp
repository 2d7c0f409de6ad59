#include "protodet/imageio.hpp"

#include <fstream>
#include <stdexcept>

namespace protodet {

ImageU8 ImageU8::filled(int width, int height, int channels, uint8_t value) {
    ImageU8 img;
    img.width = width;
    img.height = height;
    img.channels = channels;
    img.pixels.assign(static_cast<size_t>(width) * height * channels, value);
    return img;
}

void write_pnm(const std::string& path, const ImageU8& image) {
    if (image.channels != 1 && image.channels != 3)
        throw std::invalid_argument("write_pnm: unsupported channel count " +
                                    std::to_string(image.channels));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_pnm: cannot open '" + path + "'");
    out << (image.channels == 3 ? "P6" : "P5") << "\n"
        << image.width << " " << image.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(image.pixels.data()),
              static_cast<std::streamsize>(image.pixels.size()));
    if (!out) throw std::runtime_error("write_pnm: write failed for '" + path + "'");
}

ImageU8 read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_pnm: cannot open '" + path + "'");
    std::string magic;
    in >> magic;
    if (magic != "P5" && magic != "P6")
        throw std::runtime_error("read_pnm: '" + path + "' is not a binary PGM/PPM");
    int width = 0, height = 0, maxval = 0;
    in >> width >> height >> maxval;
    if (maxval != 255 || width <= 0 || height <= 0)
        throw std::runtime_error("read_pnm: unsupported header in '" + path + "'");
    in.get();  // single whitespace after header
    ImageU8 img;
    img.width = width;
    img.height = height;
    img.channels = (magic == "P6") ? 3 : 1;
    img.pixels.resize(static_cast<size_t>(width) * height * img.channels);
    in.read(reinterpret_cast<char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    if (!in) throw std::runtime_error("read_pnm: truncated payload in '" + path + "'");
    return img;
}

Tensor image_to_tensor(const ImageU8& image) {
    const int h = image.height, w = image.width, c = image.channels;
    std::vector<double> data(static_cast<size_t>(c) * h * w);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                data[(static_cast<size_t>(ch) * h + y) * w + x] = image.at(y, x, ch) / 255.0;
    return Tensor::from_data({c, h, w}, std::move(data));
}

Tensor mask_to_tensor(const ImageU8& mask) {
    if (mask.channels != 1) throw std::invalid_argument("mask_to_tensor: expected 1 channel");
    std::vector<double> data(static_cast<size_t>(mask.height) * mask.width);
    for (size_t i = 0; i < data.size(); ++i) data[i] = mask.pixels[i] ? 1.0 : 0.0;
    return Tensor::from_data({1, mask.height, mask.width}, std::move(data));
}

ImageU8 flip_horizontal(const ImageU8& image) {
    ImageU8 out = image;
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x)
            for (int c = 0; c < image.channels; ++c)
                out.at(y, x, c) = image.at(y, image.width - 1 - x, c);
    return out;
}

}  // namespace protodet
