#include "protodet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <unordered_set>

namespace protodet {

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

static int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) {
        if (d <= 0) throw std::invalid_argument("non-positive dimension in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

Tensor Tensor::zeros(Shape shape) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
    impl->shape = std::move(shape);
    return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
        throw std::invalid_argument("data size " + std::to_string(data.size()) +
                                    " does not match shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

double Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool value) {
    impl_->requires_grad = value;
    return *this;
}

std::vector<double>& Tensor::grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

const std::vector<double>& Tensor::grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

Tensor Tensor::detach() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    return Tensor(std::move(impl));
}

// Builds the op result and attaches a node only when a parent is tracked,
// so constant subgraphs never allocate gradient machinery.
Tensor make_op(const char* tag, Shape shape, std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(const std::vector<double>&)> apply) {
    Tensor out = Tensor::from_data(std::move(shape), std::move(data));
    bool tracked = false;
    for (const auto& p : parents) tracked = tracked || p.tracked();
    if (tracked) {
        auto node = std::make_shared<Node>();
        node->op = tag;
        node->parents = std::move(parents);
        node->apply = std::move(apply);
        out.impl_->node = std::move(node);
    }
    return out;
}

static std::vector<double>& grad_buf(TensorImpl& impl) {
    if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0);
    return impl.grad;
}

static bool wants_grad(const TensorImpl& impl) { return impl.requires_grad || impl.node != nullptr; }

void Tensor::backward() const {
    if (numel() != 1)
        throw std::invalid_argument("backward() root must be scalar, got shape " + shape_str(shape()));

    // Iterative post-order DFS; order depends only on graph structure.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    struct Frame {
        TensorImpl* impl;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    if (impl_->node) {
        stack.push_back({impl_.get(), 0});
        visited.insert(impl_.get());
    }
    while (!stack.empty()) {
        Frame& f = stack.back();
        Node* node = f.impl->node.get();
        if (node && f.next_parent < node->parents.size()) {
            TensorImpl* p = node->parents[f.next_parent++].impl_.get();
            if (p->node && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.impl);
            stack.pop_back();
        }
    }

    grad_buf(*impl_)[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* impl = *it;
        impl->node->apply(grad_buf(*impl));
    }
}

// --- op helpers -------------------------------------------------------------

namespace {

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

// Broadcast classification for add/hadamard: 0 = equal shapes,
// 1 = a is [C,H,W] and b is [H,W], 2 = a is [H,W] and b is [C,H,W].
int broadcast_kind(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) return 0;
    if (a.rank() == 3 && b.rank() == 2 && a.dim(1) == b.dim(0) && a.dim(2) == b.dim(1)) return 1;
    if (a.rank() == 2 && b.rank() == 3 && b.dim(1) == a.dim(0) && b.dim(2) == a.dim(1)) return 2;
    throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

}  // namespace

// --- matmul / transpose -----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (int i = 0; i < m; ++i) {
        double* orow = out.data() + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = pa[static_cast<size_t>(i) * k + p];
            const double* brow = pb + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    auto ai = a.impl(), bi = b.impl();
    return make_op("matmul", {m, n}, std::move(out), {a, b},
                   [ai, bi, m, k, n](const std::vector<double>& g) {
                       if (wants_grad(*ai)) {
                           auto& ga = grad_buf(*ai);
                           const double* pb2 = bi->data.data();
                           for (int i = 0; i < m; ++i)
                               for (int p = 0; p < k; ++p) {
                                   double acc = 0.0;
                                   const double* grow = g.data() + static_cast<size_t>(i) * n;
                                   const double* brow = pb2 + static_cast<size_t>(p) * n;
                                   for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                                   ga[static_cast<size_t>(i) * k + p] += acc;
                               }
                       }
                       if (wants_grad(*bi)) {
                           auto& gb = grad_buf(*bi);
                           const double* pa2 = ai->data.data();
                           for (int p = 0; p < k; ++p) {
                               double* gbrow = gb.data() + static_cast<size_t>(p) * n;
                               for (int i = 0; i < m; ++i) {
                                   const double av = pa2[static_cast<size_t>(i) * k + p];
                                   const double* grow = g.data() + static_cast<size_t>(i) * n;
                                   for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                               }
                           }
                       }
                   });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2)
        throw std::invalid_argument("transpose: expected rank-2 tensor, got " + shape_str(a.shape()));
    const int m = a.dim(0), n = a.dim(1);
    std::vector<double> out(a.data().size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<size_t>(j) * m + i] = a.data()[static_cast<size_t>(i) * n + j];
    auto ai = a.impl();
    return make_op("transpose", {n, m}, std::move(out), {a},
                   [ai, m, n](const std::vector<double>& g) {
                       if (!wants_grad(*ai)) return;
                       auto& ga = grad_buf(*ai);
                       for (int j = 0; j < n; ++j)
                           for (int i = 0; i < m; ++i)
                               ga[static_cast<size_t>(i) * n + j] += g[static_cast<size_t>(j) * m + i];
                   });
}

// --- softmax ----------------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
    if (axis < 0 || axis >= x.rank())
        throw std::invalid_argument("softmax: axis " + std::to_string(axis) +
                                    " out of range for shape " + shape_str(x.shape()));
    const int n = x.dim(axis);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);

    std::vector<double> out(x.data().size());
    const double* px = x.data().data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * n * inner + in;
            double mx = px[base];
            for (int i = 1; i < n; ++i) mx = std::max(mx, px[base + i * inner]);
            double sum = 0.0;
            for (int i = 0; i < n; ++i) {
                const double e = std::exp(px[base + i * inner] - mx);
                out[static_cast<size_t>(base + i * inner)] = e;
                sum += e;
            }
            const double inv = 1.0 / sum;
            for (int i = 0; i < n; ++i) out[static_cast<size_t>(base + i * inner)] *= inv;
        }
    }
    auto xi = x.impl();
    auto saved = out;
    return make_op("softmax", x.shape(), std::move(out), {x},
                   [xi, saved = std::move(saved), outer, inner, n](const std::vector<double>& g) {
                       if (!wants_grad(*xi)) return;
                       auto& gx = grad_buf(*xi);
                       for (int64_t o = 0; o < outer; ++o)
                           for (int64_t in = 0; in < inner; ++in) {
                               const int64_t base = o * n * inner + in;
                               double dot = 0.0;
                               for (int i = 0; i < n; ++i) {
                                   const size_t idx = static_cast<size_t>(base + i * inner);
                                   dot += g[idx] * saved[idx];
                               }
                               for (int i = 0; i < n; ++i) {
                                   const size_t idx = static_cast<size_t>(base + i * inner);
                                   gx[idx] += saved[idx] * (g[idx] - dot);
                               }
                           }
                   });
}

// --- conv2d -----------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.rank() != 3 || weight.rank() != 4 || bias.rank() != 1)
        throw std::invalid_argument("conv2d: expected x[C,H,W], weight[Co,Ci,k,k], bias[Co], got " +
                                    shape_str(x.shape()) + ", " + shape_str(weight.shape()) + ", " +
                                    shape_str(bias.shape()));
    const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int co = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != ci)
        throw std::invalid_argument("conv2d: channel mismatch, input " + shape_str(x.shape()) +
                                    " vs weight " + shape_str(weight.shape()));
    if (weight.dim(3) != k || (k != 1 && k != 3))
        throw std::invalid_argument("conv2d: kernel must be 1x1 or 3x3, got " +
                                    shape_str(weight.shape()));
    if (bias.dim(0) != co)
        throw std::invalid_argument("conv2d: bias " + shape_str(bias.shape()) +
                                    " does not match weight " + shape_str(weight.shape()));

    const int pad = (k == 3) ? 1 : 0;
    const size_t plane = static_cast<size_t>(h) * w;
    std::vector<double> out(static_cast<size_t>(co) * plane);
    const double* px = x.data().data();
    const double* pw = weight.data().data();
    const double* pb = bias.data().data();
    for (int oc = 0; oc < co; ++oc) {
        double* oplane = out.data() + static_cast<size_t>(oc) * plane;
        std::fill(oplane, oplane + plane, pb[oc]);
        for (int ic = 0; ic < ci; ++ic) {
            const double* xplane = px + static_cast<size_t>(ic) * plane;
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const double wv = pw[((static_cast<size_t>(oc) * ci + ic) * k + ky) * k + kx];
                    const int dy = ky - pad, dx = kx - pad;
                    const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                    const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
                    for (int y = y0; y < y1; ++y) {
                        const double* xrow = xplane + static_cast<size_t>(y + dy) * w + dx;
                        double* orow = oplane + static_cast<size_t>(y) * w;
                        for (int xx = x0; xx < x1; ++xx) orow[xx] += wv * xrow[xx];
                    }
                }
        }
    }

    auto xi = x.impl(), wi = weight.impl(), bi = bias.impl();
    return make_op(
        "conv2d", {co, h, w}, std::move(out), {x, weight, bias},
        [xi, wi, bi, ci, co, h, w, k, pad, plane](const std::vector<double>& g) {
            const double* px2 = xi->data.data();
            const double* pw2 = wi->data.data();
            if (wants_grad(*xi)) {
                auto& gx = grad_buf(*xi);
                for (int oc = 0; oc < co; ++oc) {
                    const double* gplane = g.data() + static_cast<size_t>(oc) * plane;
                    for (int ic = 0; ic < ci; ++ic) {
                        double* gxplane = gx.data() + static_cast<size_t>(ic) * plane;
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const double wv =
                                    pw2[((static_cast<size_t>(oc) * ci + ic) * k + ky) * k + kx];
                                const int dy = ky - pad, dx = kx - pad;
                                const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                                const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
                                for (int y = y0; y < y1; ++y) {
                                    double* gxrow = gxplane + static_cast<size_t>(y + dy) * w + dx;
                                    const double* grow = gplane + static_cast<size_t>(y) * w;
                                    for (int xx = x0; xx < x1; ++xx) gxrow[xx] += wv * grow[xx];
                                }
                            }
                    }
                }
            }
            if (wants_grad(*wi)) {
                auto& gw = grad_buf(*wi);
                for (int oc = 0; oc < co; ++oc) {
                    const double* gplane = g.data() + static_cast<size_t>(oc) * plane;
                    for (int ic = 0; ic < ci; ++ic) {
                        const double* xplane = px2 + static_cast<size_t>(ic) * plane;
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int dy = ky - pad, dx = kx - pad;
                                const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                                const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
                                double acc = 0.0;
                                for (int y = y0; y < y1; ++y) {
                                    const double* xrow = xplane + static_cast<size_t>(y + dy) * w + dx;
                                    const double* grow = gplane + static_cast<size_t>(y) * w;
                                    for (int xx = x0; xx < x1; ++xx) acc += xrow[xx] * grow[xx];
                                }
                                gw[((static_cast<size_t>(oc) * ci + ic) * k + ky) * k + kx] += acc;
                            }
                    }
                }
            }
            if (wants_grad(*bi)) {
                auto& gb = grad_buf(*bi);
                for (int oc = 0; oc < co; ++oc) {
                    const double* gplane = g.data() + static_cast<size_t>(oc) * plane;
                    double acc = 0.0;
                    for (size_t i = 0; i < plane; ++i) acc += gplane[i];
                    gb[oc] += acc;
                }
            }
        });
}

// --- pooling ----------------------------------------------------------------

static void check_chw(const char* op, const Tensor& x) {
    if (x.rank() != 3)
        throw std::invalid_argument(std::string(op) + ": expected [C,H,W], got " +
                                    shape_str(x.shape()));
}

Tensor gap(const Tensor& x) {
    check_chw("gap", x);
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const size_t plane = static_cast<size_t>(h) * w;
    const double inv = 1.0 / static_cast<double>(plane);
    std::vector<double> out(static_cast<size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        const double* p = x.data().data() + static_cast<size_t>(ch) * plane;
        double acc = 0.0;
        for (size_t i = 0; i < plane; ++i) acc += p[i];
        out[static_cast<size_t>(ch)] = acc * inv;
    }
    auto xi = x.impl();
    return make_op("gap", {c}, std::move(out), {x},
                   [xi, c, plane, inv](const std::vector<double>& g) {
                       if (!wants_grad(*xi)) return;
                       auto& gx = grad_buf(*xi);
                       for (int ch = 0; ch < c; ++ch) {
                           const double gv = g[static_cast<size_t>(ch)] * inv;
                           double* p = gx.data() + static_cast<size_t>(ch) * plane;
                           for (size_t i = 0; i < plane; ++i) p[i] += gv;
                       }
                   });
}

Tensor gmp(const Tensor& x) {
    check_chw("gmp", x);
    const int c = x.dim(0);
    const size_t plane = static_cast<size_t>(x.dim(1)) * x.dim(2);
    std::vector<double> out(static_cast<size_t>(c));
    std::vector<size_t> argmax(static_cast<size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        const double* p = x.data().data() + static_cast<size_t>(ch) * plane;
        size_t best = 0;
        for (size_t i = 1; i < plane; ++i)
            if (p[i] > p[best]) best = i;
        out[static_cast<size_t>(ch)] = p[best];
        argmax[static_cast<size_t>(ch)] = best;
    }
    auto xi = x.impl();
    return make_op("gmp", {c}, std::move(out), {x},
                   [xi, c, plane, argmax = std::move(argmax)](const std::vector<double>& g) {
                       if (!wants_grad(*xi)) return;
                       auto& gx = grad_buf(*xi);
                       for (int ch = 0; ch < c; ++ch)
                           gx[static_cast<size_t>(ch) * plane + argmax[static_cast<size_t>(ch)]] +=
                               g[static_cast<size_t>(ch)];
                   });
}

Tensor avgpool2(const Tensor& x) {
    check_chw("avgpool2", x);
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h % 2 || w % 2)
        throw std::invalid_argument("avgpool2: dims must be even, got " + shape_str(x.shape()));
    const int oh = h / 2, ow = w / 2;
    std::vector<double> out(static_cast<size_t>(c) * oh * ow);
    const double* px = x.data().data();
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < oh; ++y)
            for (int xx = 0; xx < ow; ++xx) {
                const size_t b = (static_cast<size_t>(ch) * h + 2 * y) * w + 2 * xx;
                out[(static_cast<size_t>(ch) * oh + y) * ow + xx] =
                    0.25 * (px[b] + px[b + 1] + px[b + w] + px[b + w + 1]);
            }
    auto xi = x.impl();
    return make_op("avgpool2", {c, oh, ow}, std::move(out), {x},
                   [xi, c, h, w, oh, ow](const std::vector<double>& g) {
                       if (!wants_grad(*xi)) return;
                       auto& gx = grad_buf(*xi);
                       for (int ch = 0; ch < c; ++ch)
                           for (int y = 0; y < oh; ++y)
                               for (int xx = 0; xx < ow; ++xx) {
                                   const double gv =
                                       0.25 * g[(static_cast<size_t>(ch) * oh + y) * ow + xx];
                                   const size_t b = (static_cast<size_t>(ch) * h + 2 * y) * w + 2 * xx;
                                   gx[b] += gv;
                                   gx[b + 1] += gv;
                                   gx[b + w] += gv;
                                   gx[b + w + 1] += gv;
                               }
                   });
}

Tensor crop_mean(const Tensor& x, int y0, int y1, int x0, int x1) {
    check_chw("crop_mean", x);
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (y0 < 0 || x0 < 0 || y1 > h || x1 > w || y0 >= y1 || x0 >= x1)
        throw std::invalid_argument("crop_mean: window [" + std::to_string(y0) + "," +
                                    std::to_string(y1) + ")x[" + std::to_string(x0) + "," +
                                    std::to_string(x1) + ") invalid for " + shape_str(x.shape()));
    const double inv = 1.0 / (static_cast<double>(y1 - y0) * (x1 - x0));
    std::vector<double> out(static_cast<size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int y = y0; y < y1; ++y) {
            const double* row = x.data().data() + (static_cast<size_t>(ch) * h + y) * w;
            for (int xx = x0; xx < x1; ++xx) acc += row[xx];
        }
        out[static_cast<size_t>(ch)] = acc * inv;
    }
    auto xi = x.impl();
    return make_op("crop_mean", {c}, std::move(out), {x},
                   [xi, c, h, w, y0, y1, x0, x1, inv](const std::vector<double>& g) {
                       if (!wants_grad(*xi)) return;
                       auto& gx = grad_buf(*xi);
                       for (int ch = 0; ch < c; ++ch) {
                           const double gv = g[static_cast<size_t>(ch)] * inv;
                           for (int y = y0; y < y1; ++y) {
                               double* row = gx.data() + (static_cast<size_t>(ch) * h + y) * w;
                               for (int xx = x0; xx < x1; ++xx) row[xx] += gv;
                           }
                       }
                   });
}

// --- cosine map ---------------------------------------------------------------

Tensor cosine_map(const Tensor& v, const Tensor& x, double eps) {
    if (v.rank() != 1) throw std::invalid_argument("cosine_map: v must be [C], got " + shape_str(v.shape()));
    check_chw("cosine_map", x);
    if (v.dim(0) != x.dim(0))
        throw std::invalid_argument("cosine_map: channel mismatch " + shape_str(v.shape()) + " vs " +
                                    shape_str(x.shape()));
    if (eps <= 0) throw std::invalid_argument("cosine_map: eps must be positive");
    const int c = v.dim(0), h = x.dim(1), w = x.dim(2);
    const size_t plane = static_cast<size_t>(h) * w;
    const double* pv = v.data().data();
    const double* px = x.data().data();

    double vnorm2 = 0.0;
    for (int ch = 0; ch < c; ++ch) vnorm2 += pv[ch] * pv[ch];
    const double vnorm = std::sqrt(vnorm2);
    const double nv = std::max(vnorm, eps);

    std::vector<double> out(plane), dots(plane), nxs(plane);
    for (size_t i = 0; i < plane; ++i) {
        double dot = 0.0, xnorm2 = 0.0;
        for (int ch = 0; ch < c; ++ch) {
            const double xv = px[static_cast<size_t>(ch) * plane + i];
            dot += pv[ch] * xv;
            xnorm2 += xv * xv;
        }
        const double nx = std::max(std::sqrt(xnorm2), eps);
        dots[i] = dot;
        nxs[i] = nx;
        out[i] = dot / (nv * nx);
    }

    auto vi = v.impl(), xi = x.impl();
    return make_op(
        "cosine_map", {h, w}, std::move(out), {v, x},
        [vi, xi, c, plane, eps, nv, vnorm, dots = std::move(dots),
         nxs = std::move(nxs)](const std::vector<double>& g) {
            const double* pv2 = vi->data.data();
            const double* px2 = xi->data.data();
            const bool v_live = vnorm > eps;  // below eps the denominator is constant
            if (wants_grad(*vi)) {
                auto& gv = grad_buf(*vi);
                for (size_t i = 0; i < plane; ++i) {
                    const double gi = g[i];
                    if (gi == 0.0) continue;
                    const double invd = 1.0 / (nv * nxs[i]);
                    const double corr = v_live ? dots[i] / (nv * nv) : 0.0;
                    for (int ch = 0; ch < c; ++ch)
                        gv[ch] += gi * invd *
                                  (px2[static_cast<size_t>(ch) * plane + i] - corr * pv2[ch]);
                }
            }
            if (wants_grad(*xi)) {
                auto& gx = grad_buf(*xi);
                for (size_t i = 0; i < plane; ++i) {
                    const double gi = g[i];
                    if (gi == 0.0) continue;
                    const double nx = nxs[i];
                    const double invd = 1.0 / (nv * nx);
                    double xnorm2 = 0.0;
                    for (int ch = 0; ch < c; ++ch) {
                        const double xv = px2[static_cast<size_t>(ch) * plane + i];
                        xnorm2 += xv * xv;
                    }
                    const bool x_live = std::sqrt(xnorm2) > eps;
                    const double corr = x_live ? dots[i] / (nx * nx) : 0.0;
                    for (int ch = 0; ch < c; ++ch) {
                        const size_t idx = static_cast<size_t>(ch) * plane + i;
                        gx[idx] += gi * invd * (pv2[ch] - corr * px2[idx]);
                    }
                }
            }
        });
}

// --- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    const int kind = broadcast_kind("add", a, b);
    const Tensor& big = (kind == 2) ? b : a;
    std::vector<double> out(big.data().size());
    if (kind == 0) {
        for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    } else {
        const Tensor& mask = (kind == 1) ? b : a;
        const size_t plane = mask.data().size();
        const int c = big.dim(0);
        for (int ch = 0; ch < c; ++ch)
            for (size_t i = 0; i < plane; ++i)
                out[static_cast<size_t>(ch) * plane + i] =
                    big.data()[static_cast<size_t>(ch) * plane + i] + mask.data()[i];
    }
    auto ai = a.impl(), bi = b.impl();
    return make_op("add", big.shape(), std::move(out), {a, b},
                   [ai, bi, kind](const std::vector<double>& g) {
                       TensorImpl* bigi = (kind == 2) ? bi.get() : ai.get();
                       TensorImpl* maski = (kind == 2) ? ai.get() : bi.get();
                       if (kind == 0) {
                           if (wants_grad(*ai)) {
                               auto& ga = grad_buf(*ai);
                               for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           }
                           if (wants_grad(*bi)) {
                               auto& gb = grad_buf(*bi);
                               for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                           }
                           return;
                       }
                       const size_t plane = maski->data.size();
                       const size_t c = bigi->data.size() / plane;
                       if (wants_grad(*bigi)) {
                           auto& gb = grad_buf(*bigi);
                           for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                       }
                       if (wants_grad(*maski)) {
                           auto& gm = grad_buf(*maski);
                           for (size_t ch = 0; ch < c; ++ch)
                               for (size_t i = 0; i < plane; ++i) gm[i] += g[ch * plane + i];
                       }
                   });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
    const int kind = broadcast_kind("hadamard", a, b);
    const Tensor& big = (kind == 2) ? b : a;
    std::vector<double> out(big.data().size());
    if (kind == 0) {
        for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    } else {
        const Tensor& mask = (kind == 1) ? b : a;
        const size_t plane = mask.data().size();
        const int c = big.dim(0);
        for (int ch = 0; ch < c; ++ch)
            for (size_t i = 0; i < plane; ++i)
                out[static_cast<size_t>(ch) * plane + i] =
                    big.data()[static_cast<size_t>(ch) * plane + i] * mask.data()[i];
    }
    auto ai = a.impl(), bi = b.impl();
    return make_op(
        "hadamard", big.shape(), std::move(out), {a, b},
        [ai, bi, kind](const std::vector<double>& g) {
            if (kind == 0) {
                if (wants_grad(*ai)) {
                    auto& ga = grad_buf(*ai);
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i];
                }
                if (wants_grad(*bi)) {
                    auto& gb = grad_buf(*bi);
                    for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->data[i];
                }
                return;
            }
            TensorImpl* bigi = (kind == 2) ? bi.get() : ai.get();
            TensorImpl* maski = (kind == 2) ? ai.get() : bi.get();
            const size_t plane = maski->data.size();
            const size_t c = bigi->data.size() / plane;
            if (wants_grad(*bigi)) {
                auto& gb = grad_buf(*bigi);
                for (size_t ch = 0; ch < c; ++ch)
                    for (size_t i = 0; i < plane; ++i)
                        gb[ch * plane + i] += g[ch * plane + i] * maski->data[i];
            }
            if (wants_grad(*maski)) {
                auto& gm = grad_buf(*maski);
                for (size_t ch = 0; ch < c; ++ch)
                    for (size_t i = 0; i < plane; ++i)
                        gm[i] += g[ch * plane + i] * bigi->data[ch * plane + i];
            }
        });
}

Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * c;
    auto xi = x.impl();
    return make_op("scale", x.shape(), std::move(out), {x},
                   [xi, c](const std::vector<double>& g) {
                       if (!wants_grad(*xi)) return;
                       auto& gx = grad_buf(*xi);
                       for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
                   });
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1)
        throw std::invalid_argument("mul_scalar: scalar argument has shape " + shape_str(s.shape()));
    const double sv = s.data()[0];
    std::vector<double> out(x.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * sv;
    auto xi = x.impl(), si = s.impl();
    return make_op("mul_scalar", x.shape(), std::move(out), {x, s},
                   [xi, si, sv](const std::vector<double>& g) {
                       if (wants_grad(*xi)) {
                           auto& gx = grad_buf(*xi);
                           for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sv;
                       }
                       if (wants_grad(*si)) {
                           double acc = 0.0;
                           for (size_t i = 0; i < g.size(); ++i) acc += g[i] * xi->data[i];
                           grad_buf(*si)[0] += acc;
                       }
                   });
}

Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        const double v = x.data()[i];
        out[i] = (v >= 0) ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    auto xi = x.impl();
    auto saved = out;
    return make_op("sigmoid", x.shape(), std::move(out), {x},
                   [xi, saved = std::move(saved)](const std::vector<double>& g) {
                       if (!wants_grad(*xi)) return;
                       auto& gx = grad_buf(*xi);
                       for (size_t i = 0; i < g.size(); ++i)
                           gx[i] += g[i] * saved[i] * (1.0 - saved[i]);
                   });
}

Tensor reciprocal(const Tensor& x) {
    std::vector<double> out(x.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / x.data()[i];
    auto xi = x.impl();
    auto saved = out;
    return make_op("reciprocal", x.shape(), std::move(out), {x},
                   [xi, saved = std::move(saved)](const std::vector<double>& g) {
                       if (!wants_grad(*xi)) return;
                       auto& gx = grad_buf(*xi);
                       for (size_t i = 0; i < g.size(); ++i) gx[i] -= g[i] * saved[i] * saved[i];
                   });
}

Tensor l2_normalize(const Tensor& x, double eps) {
    double norm2 = 0;
    for (double v : x.data()) norm2 += v * v;
    const double norm = std::sqrt(norm2);
    const double denom = std::max(norm, eps);
    std::vector<double> out(x.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] / denom;
    auto xi = x.impl();
    const bool live = norm > eps;  // below eps the denominator is constant
    return make_op("l2_normalize", x.shape(), std::move(out), {x},
                   [xi, denom, live](const std::vector<double>& g) {
                       if (!wants_grad(*xi)) return;
                       auto& gx = grad_buf(*xi);
                       const double inv = 1.0 / denom;
                       if (!live) {
                           for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * inv;
                           return;
                       }
                       double dot = 0;
                       for (size_t i = 0; i < g.size(); ++i) dot += g[i] * xi->data[i];
                       const double inv3 = inv * inv * inv;
                       for (size_t i = 0; i < g.size(); ++i)
                           gx[i] += g[i] * inv - xi->data[i] * dot * inv3;
                   });
}

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, x.data()[i]);
    auto xi = x.impl();
    return make_op("relu", x.shape(), std::move(out), {x},
                   [xi](const std::vector<double>& g) {
                       if (!wants_grad(*xi)) return;
                       auto& gx = grad_buf(*xi);
                       for (size_t i = 0; i < g.size(); ++i)
                           if (xi->data[i] > 0.0) gx[i] += g[i];
                   });
}

// --- linear -------------------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.rank() != 1 || weight.rank() != 2 || bias.rank() != 1 || weight.dim(1) != x.dim(0) ||
        weight.dim(0) != bias.dim(0))
        throw std::invalid_argument("linear: incompatible shapes x" + shape_str(x.shape()) +
                                    " weight" + shape_str(weight.shape()) + " bias" +
                                    shape_str(bias.shape()));
    const int d = weight.dim(0), c = weight.dim(1);
    std::vector<double> out(static_cast<size_t>(d));
    for (int i = 0; i < d; ++i) {
        const double* wrow = weight.data().data() + static_cast<size_t>(i) * c;
        double acc = bias.data()[static_cast<size_t>(i)];
        for (int j = 0; j < c; ++j) acc += wrow[j] * x.data()[static_cast<size_t>(j)];
        out[static_cast<size_t>(i)] = acc;
    }
    auto xi = x.impl(), wi = weight.impl(), bi = bias.impl();
    return make_op("linear", {d}, std::move(out), {x, weight, bias},
                   [xi, wi, bi, d, c](const std::vector<double>& g) {
                       if (wants_grad(*xi)) {
                           auto& gx = grad_buf(*xi);
                           for (int i = 0; i < d; ++i) {
                               const double gv = g[static_cast<size_t>(i)];
                               const double* wrow = wi->data.data() + static_cast<size_t>(i) * c;
                               for (int j = 0; j < c; ++j) gx[static_cast<size_t>(j)] += gv * wrow[j];
                           }
                       }
                       if (wants_grad(*wi)) {
                           auto& gw = grad_buf(*wi);
                           for (int i = 0; i < d; ++i) {
                               const double gv = g[static_cast<size_t>(i)];
                               double* gwrow = gw.data() + static_cast<size_t>(i) * c;
                               for (int j = 0; j < c; ++j) gwrow[j] += gv * xi->data[static_cast<size_t>(j)];
                           }
                       }
                       if (wants_grad(*bi)) {
                           auto& gb = grad_buf(*bi);
                           for (int i = 0; i < d; ++i) gb[static_cast<size_t>(i)] += g[static_cast<size_t>(i)];
                       }
                   });
}

// --- losses ---------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2)
        throw std::invalid_argument("cross_entropy: logits must be [N,M], got " +
                                    shape_str(logits.shape()));
    const int n = logits.dim(0), m = logits.dim(1);
    if (static_cast<int>(labels.size()) != n)
        throw std::invalid_argument("cross_entropy: " + std::to_string(labels.size()) +
                                    " labels for " + std::to_string(n) + " rows");
    for (int y : labels)
        if (y < 0 || y >= m)
            throw std::invalid_argument("cross_entropy: label " + std::to_string(y) +
                                        " out of range [0," + std::to_string(m) + ")");
    // log-sum-exp with max subtraction; saves softmax rows for the backward pass
    std::vector<double> probs(logits.data().size());
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const double* row = logits.data().data() + static_cast<size_t>(i) * m;
        double mx = row[0];
        for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < m; ++j) sum += std::exp(row[j] - mx);
        const double lse = mx + std::log(sum);
        loss += lse - row[labels[static_cast<size_t>(i)]];
        for (int j = 0; j < m; ++j)
            probs[static_cast<size_t>(i) * m + j] = std::exp(row[j] - lse);
    }
    loss /= n;
    auto li = logits.impl();
    return make_op("cross_entropy", {1}, {loss}, {logits},
                   [li, labels, probs = std::move(probs), n, m](const std::vector<double>& g) {
                       if (!wants_grad(*li)) return;
                       auto& gl = grad_buf(*li);
                       const double gv = g[0] / n;
                       for (int i = 0; i < n; ++i)
                           for (int j = 0; j < m; ++j) {
                               const size_t idx = static_cast<size_t>(i) * m + j;
                               const double onehot = (j == labels[static_cast<size_t>(i)]) ? 1.0 : 0.0;
                               gl[idx] += gv * (probs[idx] - onehot);
                           }
                   });
}

Tensor l1_loss(const Tensor& pred, const Tensor& target) {
    check_same_shape("l1_loss", pred, target);
    const size_t n = pred.data().size();
    double loss = 0.0;
    for (size_t i = 0; i < n; ++i) loss += std::abs(pred.data()[i] - target.data()[i]);
    loss /= static_cast<double>(n);
    auto pi = pred.impl(), ti = target.impl();
    // target carries no gradient; subgradient at equality is 0
    return make_op("l1_loss", {1}, {loss}, {pred},
                   [pi, ti, n](const std::vector<double>& g) {
                       if (!wants_grad(*pi)) return;
                       auto& gp = grad_buf(*pi);
                       const double gv = g[0] / static_cast<double>(n);
                       for (size_t i = 0; i < n; ++i) {
                           const double d = pi->data[i] - ti->data[i];
                           if (d > 0)
                               gp[i] += gv;
                           else if (d < 0)
                               gp[i] -= gv;
                       }
                   });
}

// --- shape plumbing ---------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                    shape_str(shape));
    auto xi = x.impl();
    return make_op("reshape", std::move(shape), x.data(), {x},
                   [xi](const std::vector<double>& g) {
                       if (!wants_grad(*xi)) return;
                       auto& gx = grad_buf(*xi);
                       for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                   });
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw std::invalid_argument("stack_rows: empty input");
    const int c = rows[0].dim(0);
    for (const auto& r : rows)
        if (r.rank() != 1 || r.dim(0) != c)
            throw std::invalid_argument("stack_rows: row shape " + shape_str(r.shape()) +
                                        " does not match " + shape_str(rows[0].shape()));
    const int n = static_cast<int>(rows.size());
    std::vector<double> out(static_cast<size_t>(n) * c);
    for (int i = 0; i < n; ++i)
        std::copy(rows[static_cast<size_t>(i)].data().begin(), rows[static_cast<size_t>(i)].data().end(),
                  out.begin() + static_cast<size_t>(i) * c);
    std::vector<std::shared_ptr<TensorImpl>> impls;
    impls.reserve(rows.size());
    for (const auto& r : rows) impls.push_back(r.impl());
    return make_op("stack_rows", {n, c}, std::move(out), rows,
                   [impls = std::move(impls), c](const std::vector<double>& g) {
                       for (size_t i = 0; i < impls.size(); ++i) {
                           if (!wants_grad(*impls[i])) continue;
                           auto& gr = grad_buf(*impls[i]);
                           for (int j = 0; j < c; ++j)
                               gr[static_cast<size_t>(j)] += g[i * c + static_cast<size_t>(j)];
                       }
                   });
}

Tensor concat(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat: empty input");
    int total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 1)
            throw std::invalid_argument("concat: expected rank-1 parts, got " + shape_str(p.shape()));
        total += p.dim(0);
    }
    std::vector<double> out;
    out.reserve(static_cast<size_t>(total));
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    std::vector<std::shared_ptr<TensorImpl>> impls;
    impls.reserve(parts.size());
    for (const auto& p : parts) impls.push_back(p.impl());
    return make_op("concat", {total}, std::move(out), parts,
                   [impls = std::move(impls)](const std::vector<double>& g) {
                       size_t off = 0;
                       for (auto& impl : impls) {
                           const size_t n = impl->data.size();
                           if (wants_grad(*impl)) {
                               auto& gp = grad_buf(*impl);
                               for (size_t i = 0; i < n; ++i) gp[i] += g[off + i];
                           }
                           off += n;
                       }
                   });
}

}  // namespace protodet
