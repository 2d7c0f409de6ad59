#pragma once

#include <algorithm>
#include <array>
#include <cmath>

namespace protodet {

// Axis-aligned box, x1 < x2 and y1 < y2 in image coordinates.
struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
    double cx() const { return 0.5 * (x1 + x2); }
    double cy() const { return 0.5 * (y1 + y2); }
};

struct BoxAnnotation {
    Box box;
    int class_id = -1;
};

struct Detection {
    Box box;
    int class_id = -1;
    double score = 0;
};

inline double iou(const Box& a, const Box& b) {
    if (a.area() <= 0 || b.area() <= 0) return 0.0;
    const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (ix <= 0 || iy <= 0) return 0.0;
    const double inter = ix * iy;
    return inter / (a.area() + b.area() - inter);
}

inline Box flip_horizontal(const Box& b, double image_w) {
    return {image_w - b.x2, b.y1, image_w - b.x1, b.y2};
}

// Center/size deltas: dx,dy relative to the box size, dw,dh as log-ratios.
inline std::array<double, 4> encode_deltas(const Box& roi, const Box& target) {
    return {(target.cx() - roi.cx()) / roi.width(), (target.cy() - roi.cy()) / roi.height(),
            std::log(target.width() / roi.width()), std::log(target.height() / roi.height())};
}

inline Box decode_deltas(const Box& roi, const std::array<double, 4>& d, double image_w,
                         double image_h) {
    const auto clamp1 = [](double v) { return std::clamp(v, -1.0, 1.0); };
    const double cx = roi.cx() + clamp1(d[0]) * roi.width();
    const double cy = roi.cy() + clamp1(d[1]) * roi.height();
    const double w = roi.width() * std::exp(clamp1(d[2]));
    const double h = roi.height() * std::exp(clamp1(d[3]));
    Box out{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
    out.x1 = std::clamp(out.x1, 0.0, image_w - 1.0);
    out.y1 = std::clamp(out.y1, 0.0, image_h - 1.0);
    out.x2 = std::clamp(out.x2, out.x1 + 1.0, image_w);
    out.y2 = std::clamp(out.y2, out.y1 + 1.0, image_h);
    return out;
}

}  // namespace protodet
