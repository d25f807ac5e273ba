#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hgpe/tensor.hpp"

// Primitive tensor operations. All kernels accumulate in double regardless
// of the storage dtype, and every op is a pure function of its inputs.

namespace hgpe {

enum class StripAxis { Height, Width };
enum class Act { Sigmoid, HSwish, Relu6, Silu };
enum class NormKind { Batch, Layer, Group };

[[noreturn]] inline void fail(const std::string& msg) { throw std::invalid_argument(msg); }

inline void require_4d(const std::vector<int64_t>& dims, const char* op) {
    if (dims.size() != 4)
        fail(std::string(op) + ": expected 4-D NCHW input, got " + dims_str(dims));
}

inline int64_t conv_out_size(int64_t in, int64_t k, int64_t stride, int64_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, no kernel flip).
// x: [N, Cin, H, W], weight: [Cout, Cin/groups, kh, kw], bias: [Cout] or null.
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* bias,
                  int stride_h, int stride_w, int pad_h, int pad_w, int groups) {
    require_4d(x.dims(), "conv2d");
    require_4d(w.dims(), "conv2d weight");
    if (stride_h < 1 || stride_w < 1) fail("conv2d: stride must be >= 1");
    if (pad_h < 0 || pad_w < 0) fail("conv2d: padding must be >= 0");
    const int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int64_t cout = w.dim(0), cinpg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    if (groups < 1) fail("conv2d: groups must be >= 1");
    if (cin % groups != 0)
        fail("conv2d: input channel axis (Cin=" + std::to_string(cin) + ") not divisible by groups=" +
             std::to_string(groups));
    if (cout % groups != 0)
        fail("conv2d: output channel axis (Cout=" + std::to_string(cout) + ") not divisible by groups=" +
             std::to_string(groups));
    if (cinpg != cin / groups)
        fail("conv2d: weight channel axis expects Cin/groups=" + std::to_string(cin / groups) +
             " but weight has " + std::to_string(cinpg));
    if (bias && (bias->rank() != 1 || bias->dim(0) != cout))
        fail("conv2d: bias axis must be [Cout=" + std::to_string(cout) + "], got " + bias->shape_str());
    const int64_t oh = conv_out_size(h, kh, stride_h, pad_h);
    const int64_t ow = conv_out_size(wd, kw, stride_w, pad_w);
    if (oh < 1 || ow < 1)
        fail("conv2d: spatial axes collapse, input " + dims_str({h, wd}) + " kernel " +
             dims_str({kh, kw}) + " stride " + std::to_string(stride_h));

    TensorT<T> out({n, cout, oh, ow});
    const int64_t copg = cout / groups;
    for (int64_t in = 0; in < n; ++in) {
        for (int64_t co = 0; co < cout; ++co) {
            const int64_t g = co / copg;
            const T* wrow = w.data() + co * cinpg * kh * kw;
            for (int64_t y = 0; y < oh; ++y) {
                for (int64_t xo = 0; xo < ow; ++xo) {
                    double acc = bias ? static_cast<double>((*bias)[co]) : 0.0;
                    for (int64_t ci = 0; ci < cinpg; ++ci) {
                        const T* xrow = x.data() + ((in * cin + g * cinpg + ci) * h) * wd;
                        const T* wk = wrow + ci * kh * kw;
                        for (int64_t ky = 0; ky < kh; ++ky) {
                            const int64_t iy = y * stride_h - pad_h + ky;
                            if (iy < 0 || iy >= h) continue;
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                const int64_t ix = xo * stride_w - pad_w + kx;
                                if (ix < 0 || ix >= wd) continue;
                                acc += static_cast<double>(xrow[iy * wd + ix]) *
                                       static_cast<double>(wk[ky * kw + kx]);
                            }
                        }
                    }
                    out.at4(in, co, y, xo) = static_cast<T>(acc);
                }
            }
        }
    }
    check_finite(out, "conv2d");
    return out;
}

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, int stride = 1, int padding = 0,
                  int groups = 1) {
    return conv2d(x, w, static_cast<const TensorT<T>*>(nullptr), stride, stride, padding, padding,
                  groups);
}

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias, int stride = 1,
                  int padding = 0, int groups = 1) {
    return conv2d(x, w, &bias, stride, stride, padding, padding, groups);
}

// ---------------------------------------------------------------------------
// Strip pooling: mean over one spatial axis.
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> strip_pool(const TensorT<T>& x, StripAxis axis) {
    require_4d(x.dims(), "strip_pool");
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (axis == StripAxis::Height) {
        TensorT<T> out({n, c, h, 1});
        for (int64_t in = 0; in < n; ++in)
            for (int64_t ic = 0; ic < c; ++ic)
                for (int64_t y = 0; y < h; ++y) {
                    double acc = 0.0;
                    for (int64_t xo = 0; xo < w; ++xo) acc += x.at4(in, ic, y, xo);
                    out.at4(in, ic, y, 0) = static_cast<T>(acc / static_cast<double>(w));
                }
        return out;
    }
    TensorT<T> out({n, c, 1, w});
    for (int64_t in = 0; in < n; ++in)
        for (int64_t ic = 0; ic < c; ++ic)
            for (int64_t xo = 0; xo < w; ++xo) {
                double acc = 0.0;
                for (int64_t y = 0; y < h; ++y) acc += x.at4(in, ic, y, xo);
                out.at4(in, ic, 0, xo) = static_cast<T>(acc / static_cast<double>(h));
            }
    return out;
}

template <typename T>
TensorT<T> pool_global_avg(const TensorT<T>& x) {
    require_4d(x.dims(), "pool_global_avg");
    const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    TensorT<T> out({n, c, 1, 1});
    for (int64_t in = 0; in < n; ++in)
        for (int64_t ic = 0; ic < c; ++ic) {
            const T* p = x.data() + (in * c + ic) * hw;
            double acc = 0.0;
            for (int64_t i = 0; i < hw; ++i) acc += p[i];
            out.at4(in, ic, 0, 0) = static_cast<T>(acc / static_cast<double>(hw));
        }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax over the last dim, with max subtraction.
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> softmax_lastdim(const TensorT<T>& x) {
    const int64_t last = x.dim(x.rank() - 1);
    const int64_t rows = x.numel() / last;
    TensorT<T> out(x.dims());
    for (int64_t r = 0; r < rows; ++r) {
        const T* in = x.data() + r * last;
        T* o = out.data() + r * last;
        double mx = in[0];
        for (int64_t i = 1; i < last; ++i) mx = std::max(mx, static_cast<double>(in[i]));
        double denom = 0.0;
        for (int64_t i = 0; i < last; ++i) denom += std::exp(static_cast<double>(in[i]) - mx);
        for (int64_t i = 0; i < last; ++i)
            o[i] = static_cast<T>(std::exp(static_cast<double>(in[i]) - mx) / denom);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise activations.
// ---------------------------------------------------------------------------

inline double act_eval(Act kind, double v) {
    switch (kind) {
        case Act::Sigmoid: return 1.0 / (1.0 + std::exp(-v));
        case Act::Relu6: return std::min(std::max(v, 0.0), 6.0);
        case Act::HSwish: return v * std::min(std::max(v + 3.0, 0.0), 6.0) / 6.0;
        case Act::Silu: return v / (1.0 + std::exp(-v));
    }
    return 0.0;
}

inline double act_grad(Act kind, double v) {
    switch (kind) {
        case Act::Sigmoid: {
            const double s = 1.0 / (1.0 + std::exp(-v));
            return s * (1.0 - s);
        }
        case Act::Relu6: return (v > 0.0 && v < 6.0) ? 1.0 : 0.0;
        case Act::HSwish:
            if (v <= -3.0) return 0.0;
            if (v >= 3.0) return 1.0;
            return (2.0 * v + 3.0) / 6.0;
        case Act::Silu: {
            const double s = 1.0 / (1.0 + std::exp(-v));
            return s + v * s * (1.0 - s);
        }
    }
    return 0.0;
}

template <typename T>
TensorT<T> activation(const TensorT<T>& x, Act kind) {
    TensorT<T> out(x.dims());
    for (int64_t i = 0; i < x.numel(); ++i)
        out[i] = static_cast<T>(act_eval(kind, static_cast<double>(x[i])));
    return out;
}

// ---------------------------------------------------------------------------
// Normalization. Batch norm mutates running statistics in training mode;
// layer norm normalizes the channel vector at each spatial position; group
// norm normalizes each (group x spatial) slice per sample. All apply an
// affine per-channel scale/shift afterwards.
// ---------------------------------------------------------------------------

template <typename T>
struct BnStateT {
    TensorT<T> running_mean, running_var;  // [C]
};

template <typename T>
TensorT<T> batch_norm(const TensorT<T>& x, const TensorT<T>& scale, const TensorT<T>& shift,
                      TensorT<T>& running_mean, TensorT<T>& running_var, bool training,
                      double momentum = 0.1, double eps = 1e-5) {
    require_4d(x.dims(), "batch_norm");
    const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (scale.numel() != c || shift.numel() != c)
        fail("batch_norm: affine params must match channel axis C=" + std::to_string(c));
    TensorT<T> out(x.dims());
    const int64_t cnt = n * hw;
    for (int64_t ic = 0; ic < c; ++ic) {
        double mean, var;
        if (training) {
            double s = 0.0;
            for (int64_t in = 0; in < n; ++in) {
                const T* p = x.data() + (in * c + ic) * hw;
                for (int64_t i = 0; i < hw; ++i) s += p[i];
            }
            mean = s / static_cast<double>(cnt);
            double v = 0.0;
            for (int64_t in = 0; in < n; ++in) {
                const T* p = x.data() + (in * c + ic) * hw;
                for (int64_t i = 0; i < hw; ++i) {
                    const double d = p[i] - mean;
                    v += d * d;
                }
            }
            var = v / static_cast<double>(cnt);
            running_mean[ic] =
                static_cast<T>((1.0 - momentum) * running_mean[ic] + momentum * mean);
            running_var[ic] =
                static_cast<T>((1.0 - momentum) * running_var[ic] + momentum * var);
        } else {
            mean = running_mean[ic];
            var = running_var[ic];
        }
        const double inv = 1.0 / std::sqrt(var + eps);
        const double a = scale[ic] * inv;
        const double b = shift[ic] - mean * a;
        for (int64_t in = 0; in < n; ++in) {
            const T* p = x.data() + (in * c + ic) * hw;
            T* o = out.data() + (in * c + ic) * hw;
            for (int64_t i = 0; i < hw; ++i) o[i] = static_cast<T>(a * p[i] + b);
        }
    }
    check_finite(out, "batch_norm");
    return out;
}

template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& scale, const TensorT<T>& shift,
                      double eps = 1e-5) {
    require_4d(x.dims(), "layer_norm");
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (scale.numel() != c || shift.numel() != c)
        fail("layer_norm: affine params must match channel axis C=" + std::to_string(c));
    TensorT<T> out(x.dims());
    const int64_t hw = h * w;
    for (int64_t in = 0; in < n; ++in)
        for (int64_t i = 0; i < hw; ++i) {
            double mean = 0.0;
            for (int64_t ic = 0; ic < c; ++ic) mean += x.data()[(in * c + ic) * hw + i];
            mean /= static_cast<double>(c);
            double var = 0.0;
            for (int64_t ic = 0; ic < c; ++ic) {
                const double d = x.data()[(in * c + ic) * hw + i] - mean;
                var += d * d;
            }
            var /= static_cast<double>(c);
            const double inv = 1.0 / std::sqrt(var + eps);
            for (int64_t ic = 0; ic < c; ++ic) {
                const double xh = (x.data()[(in * c + ic) * hw + i] - mean) * inv;
                out.data()[(in * c + ic) * hw + i] =
                    static_cast<T>(xh * static_cast<double>(scale[ic]) + static_cast<double>(shift[ic]));
            }
        }
    check_finite(out, "layer_norm");
    return out;
}

template <typename T>
TensorT<T> group_norm(const TensorT<T>& x, const TensorT<T>& scale, const TensorT<T>& shift,
                      int groups, double eps = 1e-5) {
    require_4d(x.dims(), "group_norm");
    const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (groups < 1 || c % groups != 0)
        fail("group_norm: channel axis C=" + std::to_string(c) + " not divisible by groups=" +
             std::to_string(groups));
    if (scale.numel() != c || shift.numel() != c)
        fail("group_norm: affine params must match channel axis C=" + std::to_string(c));
    const int64_t cpg = c / groups;
    TensorT<T> out(x.dims());
    for (int64_t in = 0; in < n; ++in)
        for (int64_t g = 0; g < groups; ++g) {
            double mean = 0.0;
            for (int64_t cc = 0; cc < cpg; ++cc) {
                const T* p = x.data() + (in * c + g * cpg + cc) * hw;
                for (int64_t i = 0; i < hw; ++i) mean += p[i];
            }
            const double cnt = static_cast<double>(cpg * hw);
            mean /= cnt;
            double var = 0.0;
            for (int64_t cc = 0; cc < cpg; ++cc) {
                const T* p = x.data() + (in * c + g * cpg + cc) * hw;
                for (int64_t i = 0; i < hw; ++i) {
                    const double d = p[i] - mean;
                    var += d * d;
                }
            }
            var /= cnt;
            const double inv = 1.0 / std::sqrt(var + eps);
            for (int64_t cc = 0; cc < cpg; ++cc) {
                const int64_t ic = g * cpg + cc;
                const T* p = x.data() + (in * c + ic) * hw;
                T* o = out.data() + (in * c + ic) * hw;
                const double a = scale[ic] * inv;
                const double b = shift[ic] - mean * a;
                for (int64_t i = 0; i < hw; ++i) o[i] = static_cast<T>(a * p[i] + b);
            }
        }
    check_finite(out, "group_norm");
    return out;
}

// One-call surface over the three normalizers.
template <typename T>
TensorT<T> normalize(const TensorT<T>& x, NormKind kind, const TensorT<T>& scale,
                     const TensorT<T>& shift, BnStateT<T>* state = nullptr, bool training = false,
                     int groups = 1, double eps = 1e-5) {
    switch (kind) {
        case NormKind::Batch:
            if (!state) fail("normalize: batch kind requires running statistics");
            return batch_norm(x, scale, shift, state->running_mean, state->running_var, training,
                              0.1, eps);
        case NormKind::Layer: return layer_norm(x, scale, shift, eps);
        case NormKind::Group: return group_norm(x, scale, shift, groups, eps);
    }
    fail("normalize: unknown kind");
}

// ---------------------------------------------------------------------------
// Window partition / merge. Pads bottom/right with zeros so H, W become
// multiples of the window; windows are ordered row-major.
// ---------------------------------------------------------------------------

struct PadRecord {
    int64_t n = 0, c = 0, h = 0, w = 0;  // original shape
    int win_h = 0, win_w = 0;
    int64_t pad_h = 0, pad_w = 0;

    int64_t rows() const { return (h + pad_h) / win_h; }
    int64_t cols() const { return (w + pad_w) / win_w; }
};

template <typename T>
std::pair<TensorT<T>, PadRecord> window_partition(const TensorT<T>& x, int win_h, int win_w) {
    require_4d(x.dims(), "window_partition");
    if (win_h < 1 || win_w < 1) fail("window_partition: window sizes must be >= 1");
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    PadRecord rec;
    rec.n = n; rec.c = c; rec.h = h; rec.w = w;
    rec.win_h = win_h; rec.win_w = win_w;
    rec.pad_h = (win_h - h % win_h) % win_h;
    rec.pad_w = (win_w - w % win_w) % win_w;
    const int64_t rows = rec.rows(), cols = rec.cols();
    TensorT<T> out({n * rows * cols, c, win_h, win_w});
    for (int64_t in = 0; in < n; ++in)
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t cl = 0; cl < cols; ++cl) {
                const int64_t b = (in * rows + r) * cols + cl;
                for (int64_t ic = 0; ic < c; ++ic)
                    for (int64_t y = 0; y < win_h; ++y)
                        for (int64_t xo = 0; xo < win_w; ++xo) {
                            const int64_t iy = r * win_h + y, ix = cl * win_w + xo;
                            out.at4(b, ic, y, xo) =
                                (iy < h && ix < w) ? x.at4(in, ic, iy, ix) : T(0);
                        }
            }
    return {out, rec};
}

template <typename T>
TensorT<T> window_merge(const TensorT<T>& windows, const PadRecord& rec) {
    require_4d(windows.dims(), "window_merge");
    if (rec.win_h < 1 || rec.win_w < 1 || rec.pad_h < 0 || rec.pad_w < 0 ||
        rec.pad_h >= rec.win_h || rec.pad_w >= rec.win_w ||
        (rec.h + rec.pad_h) % rec.win_h != 0 || (rec.w + rec.pad_w) % rec.win_w != 0)
        fail("window_merge: pad record inconsistent with its window geometry");
    const int64_t rows = rec.rows(), cols = rec.cols();
    if (windows.dim(0) != rec.n * rows * cols || windows.dim(1) != rec.c ||
        windows.dim(2) != rec.win_h || windows.dim(3) != rec.win_w)
        fail("window_merge: windows " + windows.shape_str() + " inconsistent with pad record (" +
             std::to_string(rec.n * rows * cols) + " windows of " +
             dims_str({rec.c, rec.win_h, rec.win_w}) + " expected)");
    TensorT<T> out({rec.n, rec.c, rec.h, rec.w});
    for (int64_t in = 0; in < rec.n; ++in)
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t cl = 0; cl < cols; ++cl) {
                const int64_t b = (in * rows + r) * cols + cl;
                for (int64_t ic = 0; ic < rec.c; ++ic)
                    for (int64_t y = 0; y < rec.win_h; ++y)
                        for (int64_t xo = 0; xo < rec.win_w; ++xo) {
                            const int64_t iy = r * rec.win_h + y, ix = cl * rec.win_w + xo;
                            if (iy < rec.h && ix < rec.w)
                                out.at4(in, ic, iy, ix) = windows.at4(b, ic, y, xo);
                        }
            }
    return out;
}

// ---------------------------------------------------------------------------
// Concat / split along an arbitrary axis (channel axis is the public case).
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> concat_axis(const std::vector<TensorT<T>>& parts, int axis) {
    if (parts.empty()) fail("concat_axis: no inputs");
    const auto& d0 = parts[0].dims();
    if (axis < 0 || axis >= static_cast<int>(d0.size())) fail("concat_axis: bad axis");
    int64_t axis_total = 0;
    for (const auto& p : parts) {
        if (p.rank() != static_cast<int>(d0.size())) fail("concat_axis: rank mismatch");
        for (int i = 0; i < p.rank(); ++i)
            if (i != axis && p.dim(i) != d0[static_cast<size_t>(i)])
                fail("concat_axis: axis " + std::to_string(i) + " mismatch, " + p.shape_str() +
                     " vs " + dims_str(d0));
        axis_total += p.dim(axis);
    }
    std::vector<int64_t> od = d0;
    od[static_cast<size_t>(axis)] = axis_total;
    TensorT<T> out(od);

    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= d0[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < d0.size(); ++i) inner *= d0[i];
    int64_t off = 0;
    for (const auto& p : parts) {
        const int64_t pa = p.dim(axis);
        for (int64_t o = 0; o < outer; ++o)
            std::copy(p.data() + o * pa * inner, p.data() + (o + 1) * pa * inner,
                      out.data() + (o * axis_total + off) * inner);
        off += pa;
    }
    return out;
}

template <typename T>
std::vector<TensorT<T>> split_axis(const TensorT<T>& x, const std::vector<int64_t>& sizes, int axis) {
    if (axis < 0 || axis >= x.rank()) fail("split_axis: bad axis");
    int64_t total = 0;
    for (int64_t s : sizes) total += s;
    if (total != x.dim(axis))
        fail("split_axis: sizes sum to " + std::to_string(total) + " but axis " +
             std::to_string(axis) + " has " + std::to_string(x.dim(axis)));
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    const int64_t axis_total = x.dim(axis);

    std::vector<TensorT<T>> parts;
    parts.reserve(sizes.size());
    int64_t off = 0;
    for (int64_t s : sizes) {
        std::vector<int64_t> pd = x.dims();
        pd[static_cast<size_t>(axis)] = s;
        TensorT<T> p(pd);
        for (int64_t o = 0; o < outer; ++o)
            std::copy(x.data() + (o * axis_total + off) * inner,
                      x.data() + (o * axis_total + off + s) * inner, p.data() + o * s * inner);
        parts.push_back(std::move(p));
        off += s;
    }
    return parts;
}

template <typename T>
std::vector<TensorT<T>> split_channels(const TensorT<T>& x, const std::vector<int64_t>& sizes) {
    require_4d(x.dims(), "split_channels");
    return split_axis(x, sizes, 1);
}

template <typename T>
TensorT<T> concat_channels(const std::vector<TensorT<T>>& parts) {
    return concat_axis(parts, 1);
}

// ---------------------------------------------------------------------------
// Batched matmul: a [..., m, k] x b [..., k, n] with leading dims equal.
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> matmul_batched(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() < 2 || b.rank() < 2) fail("matmul_batched: rank must be >= 2");
    if (a.rank() != b.rank()) fail("matmul_batched: rank mismatch");
    for (int i = 0; i < a.rank() - 2; ++i)
        if (a.dim(i) != b.dim(i))
            fail("matmul_batched: leading axis " + std::to_string(i) + " mismatch, " +
                 a.shape_str() + " vs " + b.shape_str());
    const int64_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
    const int64_t k2 = b.dim(b.rank() - 2), nn = b.dim(b.rank() - 1);
    if (k != k2)
        fail("matmul_batched: inner axis mismatch, " + a.shape_str() + " vs " + b.shape_str());
    int64_t batch = 1;
    for (int i = 0; i < a.rank() - 2; ++i) batch *= a.dim(i);

    std::vector<int64_t> od(a.dims().begin(), a.dims().end() - 2);
    od.push_back(m);
    od.push_back(nn);
    TensorT<T> out(od);
    for (int64_t bi = 0; bi < batch; ++bi) {
        const T* pa = a.data() + bi * m * k;
        const T* pb = b.data() + bi * k * nn;
        T* po = out.data() + bi * m * nn;
        for (int64_t i = 0; i < m; ++i) {
            for (int64_t j = 0; j < nn; ++j) {
                double acc = 0.0;
                for (int64_t kk = 0; kk < k; ++kk)
                    acc += static_cast<double>(pa[i * k + kk]) * static_cast<double>(pb[kk * nn + j]);
                po[i * nn + j] = static_cast<T>(acc);
            }
        }
    }
    check_finite(out, "matmul_batched");
    return out;
}

// ---------------------------------------------------------------------------
// Layout plumbing.
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, std::vector<int64_t> dims) {
    return x.reshaped(std::move(dims));
}

template <typename T>
TensorT<T> transpose_last2(const TensorT<T>& x) {
    if (x.rank() < 2) fail("transpose_last2: rank must be >= 2");
    const int64_t m = x.dim(x.rank() - 2), n = x.dim(x.rank() - 1);
    int64_t batch = x.numel() / (m * n);
    std::vector<int64_t> od = x.dims();
    std::swap(od[od.size() - 1], od[od.size() - 2]);
    TensorT<T> out(od);
    for (int64_t b = 0; b < batch; ++b) {
        const T* p = x.data() + b * m * n;
        T* o = out.data() + b * m * n;
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) o[j * m + i] = p[i * n + j];
    }
    return out;
}

// (B, C, H, W) -> (B, H*W, C): one token per spatial position.
template <typename T>
TensorT<T> nchw_to_tokens(const TensorT<T>& x) {
    require_4d(x.dims(), "nchw_to_tokens");
    const int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    TensorT<T> out({b, hw, c});
    for (int64_t ib = 0; ib < b; ++ib)
        for (int64_t ic = 0; ic < c; ++ic) {
            const T* p = x.data() + (ib * c + ic) * hw;
            T* o = out.data() + ib * hw * c + ic;
            for (int64_t i = 0; i < hw; ++i) o[i * c] = p[i];
        }
    return out;
}

template <typename T>
TensorT<T> tokens_to_nchw(const TensorT<T>& x, int64_t h, int64_t w) {
    if (x.rank() != 3) fail("tokens_to_nchw: expected (B, L, C)");
    const int64_t b = x.dim(0), l = x.dim(1), c = x.dim(2);
    if (l != h * w) fail("tokens_to_nchw: token axis " + std::to_string(l) + " != H*W");
    TensorT<T> out({b, c, h, w});
    for (int64_t ib = 0; ib < b; ++ib)
        for (int64_t ic = 0; ic < c; ++ic) {
            const T* p = x.data() + ib * l * c + ic;
            T* o = out.data() + (ib * c + ic) * l;
            for (int64_t i = 0; i < l; ++i) o[i] = p[i * c];
        }
    return out;
}

// (B, L, C) -> (B*heads, L, C/heads); heads indexed fastest in the batch axis.
template <typename T>
TensorT<T> split_heads(const TensorT<T>& x, int heads) {
    if (x.rank() != 3) fail("split_heads: expected (B, L, C)");
    const int64_t b = x.dim(0), l = x.dim(1), c = x.dim(2);
    if (heads < 1 || c % heads != 0)
        fail("split_heads: channel axis C=" + std::to_string(c) + " not divisible by heads=" +
             std::to_string(heads));
    const int64_t d = c / heads;
    TensorT<T> out({b * heads, l, d});
    for (int64_t ib = 0; ib < b; ++ib)
        for (int64_t hd = 0; hd < heads; ++hd)
            for (int64_t i = 0; i < l; ++i)
                std::copy(x.data() + (ib * l + i) * c + hd * d,
                          x.data() + (ib * l + i) * c + hd * d + d,
                          out.data() + ((ib * heads + hd) * l + i) * d);
    return out;
}

template <typename T>
TensorT<T> merge_heads(const TensorT<T>& x, int heads) {
    if (x.rank() != 3) fail("merge_heads: expected (B*heads, L, D)");
    const int64_t bh = x.dim(0), l = x.dim(1), d = x.dim(2);
    if (heads < 1 || bh % heads != 0) fail("merge_heads: batch axis not divisible by heads");
    const int64_t b = bh / heads;
    TensorT<T> out({b, l, d * heads});
    for (int64_t ib = 0; ib < b; ++ib)
        for (int64_t hd = 0; hd < heads; ++hd)
            for (int64_t i = 0; i < l; ++i)
                std::copy(x.data() + ((ib * heads + hd) * l + i) * d,
                          x.data() + ((ib * heads + hd) * l + i) * d + d,
                          out.data() + (ib * l + i) * d * heads + hd * d);
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise and small linear-algebra helpers.
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b)) fail("add: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    TensorT<T> out(a.dims());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b)) fail("mul: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    TensorT<T> out(a.dims());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    return out;
}

// x * g with g broadcast over axes where g has size 1 (gating multiply).
template <typename T>
TensorT<T> mul_bcast(const TensorT<T>& x, const TensorT<T>& g) {
    if (x.rank() != g.rank()) fail("mul_bcast: rank mismatch");
    for (int i = 0; i < x.rank(); ++i)
        if (g.dim(i) != x.dim(i) && g.dim(i) != 1)
            fail("mul_bcast: axis " + std::to_string(i) + " of gate " + g.shape_str() +
                 " incompatible with " + x.shape_str());
    TensorT<T> out(x.dims());
    std::vector<int64_t> gstride(static_cast<size_t>(x.rank()));
    int64_t s = 1;
    for (int i = x.rank() - 1; i >= 0; --i) {
        gstride[static_cast<size_t>(i)] = (g.dim(i) == 1) ? 0 : s;
        s *= g.dim(i);
    }
    std::vector<int64_t> idx(static_cast<size_t>(x.rank()), 0);
    for (int64_t flat = 0; flat < x.numel(); ++flat) {
        int64_t gi = 0;
        for (int i = 0; i < x.rank(); ++i) gi += idx[static_cast<size_t>(i)] * gstride[static_cast<size_t>(i)];
        out[flat] = x[flat] * g[gi];
        for (int i = x.rank() - 1; i >= 0; --i) {
            if (++idx[static_cast<size_t>(i)] < x.dim(i)) break;
            idx[static_cast<size_t>(i)] = 0;
        }
    }
    return out;
}

template <typename T>
TensorT<T> scale_by(const TensorT<T>& x, double s) {
    TensorT<T> out(x.dims());
    for (int64_t i = 0; i < x.numel(); ++i) out[i] = static_cast<T>(x[i] * s);
    return out;
}

// 1-D convolution across the channel axis of a pooled (N, C, 1, 1) tensor
// with a single shared kernel and zero padding (ECA-style channel mixing).
template <typename T>
TensorT<T> conv_channels1d(const TensorT<T>& x, const TensorT<T>& kernel) {
    require_4d(x.dims(), "conv_channels1d");
    if (x.dim(2) != 1 || x.dim(3) != 1) fail("conv_channels1d: expected pooled (N, C, 1, 1) input");
    if (kernel.rank() != 1 || kernel.dim(0) % 2 == 0)
        fail("conv_channels1d: kernel must be 1-D with odd length");
    const int64_t n = x.dim(0), c = x.dim(1), k = kernel.dim(0), half = k / 2;
    TensorT<T> out(x.dims());
    for (int64_t in = 0; in < n; ++in)
        for (int64_t ic = 0; ic < c; ++ic) {
            double acc = 0.0;
            for (int64_t j = 0; j < k; ++j) {
                const int64_t src = ic + j - half;
                if (src >= 0 && src < c) acc += static_cast<double>(kernel[j]) * x.at4(in, src, 0, 0);
            }
            out.at4(in, ic, 0, 0) = static_cast<T>(acc);
        }
    return out;
}

// x: [N, K], w: [M, K], b: [M] -> [N, M]
template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
    if (x.rank() != 2 || w.rank() != 2) fail("linear: expected 2-D input and weight");
    const int64_t n = x.dim(0), k = x.dim(1), m = w.dim(0);
    if (w.dim(1) != k)
        fail("linear: inner axis mismatch, input " + x.shape_str() + " weight " + w.shape_str());
    if (b.numel() != m) fail("linear: bias must be [M=" + std::to_string(m) + "]");
    TensorT<T> out({n, m});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j) {
            double acc = b[j];
            for (int64_t kk = 0; kk < k; ++kk)
                acc += static_cast<double>(x[i * k + kk]) * static_cast<double>(w[j * k + kk]);
            out[i * m + j] = static_cast<T>(acc);
        }
    check_finite(out, "linear");
    return out;
}

template <typename T>
TensorT<T> reduce_sum(const TensorT<T>& x) {
    double acc = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) acc += x[i];
    return TensorT<T>::scalar(static_cast<T>(acc));
}

template <typename T>
TensorT<T> reduce_mean(const TensorT<T>& x) {
    double acc = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) acc += x[i];
    return TensorT<T>::scalar(static_cast<T>(acc / static_cast<double>(x.numel())));
}

}  // namespace hgpe
