#include "hgpe/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace hgpe::ad {

const Tensor& Var::val() const { return tape->value(id); }
const std::vector<int64_t>& Var::dims() const { return tape->value(id).dims(); }

Var Tape::leaf(Tensor value, std::string name, bool learnable) {
    const int id = push(std::move(value), {}, nullptr);
    if (learnable && !name.empty()) {
        for (const auto& [n, _] : named_leaves_)
            if (n == name) throw std::invalid_argument("Tape: duplicate leaf name " + name);
        named_leaves_.emplace_back(std::move(name), id);
    }
    return Var{this, id};
}

int Tape::push(Tensor value, std::vector<int> inputs, BackwardFn bw) {
    nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(bw)});
    return static_cast<int>(nodes_.size()) - 1;
}

Tensor& Tape::gbuf(int id) {
    if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
    Tensor& g = grads_[static_cast<size_t>(id)];
    if (g.empty()) g = Tensor(nodes_[static_cast<size_t>(id)].value.dims());
    return g;
}

void Tape::backward(const Var& loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: loss from another tape");
    if (value(loss.id).numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " +
                                    value(loss.id).shape_str());
    grads_.clear();
    grads_.resize(nodes_.size());
    gbuf(loss.id)[0] = 1.0;
    for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
        if (!has_grad(id)) continue;
        auto& node = nodes_[static_cast<size_t>(id)];
        if (node.backward) node.backward(*this, id);
    }
}

Tensor Tape::grad_of(const Var& v) const {
    if (has_grad(v.id)) return grads_[static_cast<size_t>(v.id)];
    return Tensor(value(v.id).dims());
}

std::map<std::string, Tensor> Tape::named_grads() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : named_leaves_) out.emplace(name, grad_of(Var{const_cast<Tape*>(this), id}));
    return out;
}

void Tape::clear() {
    nodes_.clear();
    grads_.clear();
    named_leaves_.clear();
}

// ---------------------------------------------------------------------------
// Backward kernels.
// ---------------------------------------------------------------------------

namespace {

void conv2d_accumulate_backward(const Tensor& x, const Tensor& w, const Tensor& g, int sh, int sw,
                                int ph, int pw, int groups, Tensor* gx, Tensor* gw, Tensor* gb) {
    const int64_t n = x.dim(0), h = x.dim(2), wd = x.dim(3);
    const int64_t cout = w.dim(0), cinpg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const int64_t oh = g.dim(2), ow = g.dim(3);
    const int64_t copg = cout / groups;
    for (int64_t in = 0; in < n; ++in)
        for (int64_t co = 0; co < cout; ++co) {
            const int64_t grp = co / copg;
            for (int64_t y = 0; y < oh; ++y)
                for (int64_t xo = 0; xo < ow; ++xo) {
                    const double go = g.at4(in, co, y, xo);
                    if (gb) (*gb)[co] += go;
                    for (int64_t ci = 0; ci < cinpg; ++ci) {
                        const int64_t xc = grp * cinpg + ci;
                        for (int64_t ky = 0; ky < kh; ++ky) {
                            const int64_t iy = y * sh - ph + ky;
                            if (iy < 0 || iy >= h) continue;
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                const int64_t ix = xo * sw - pw + kx;
                                if (ix < 0 || ix >= wd) continue;
                                if (gx) gx->at4(in, xc, iy, ix) += go * w.at4(co, ci, ky, kx);
                                if (gw) gw->at4(co, ci, ky, kx) += go * x.at4(in, xc, iy, ix);
                            }
                        }
                    }
                }
        }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var* bias, int stride_h, int stride_w, int pad_h,
           int pad_w, int groups) {
    Tape* t = x.tape;
    Tensor out = hgpe::conv2d(x.val(), w.val(), bias ? &bias->val() : nullptr, stride_h, stride_w,
                              pad_h, pad_w, groups);
    const int xid = x.id, wid = w.id, bid = bias ? bias->id : -1;
    std::vector<int> inputs = {xid, wid};
    if (bias) inputs.push_back(bid);
    const int id = t->push(std::move(out), std::move(inputs),
                           [=](Tape& tp, int self) {
                               const Tensor g = tp.gbuf(self);
                               Tensor* gb = bid >= 0 ? &tp.gbuf(bid) : nullptr;
                               conv2d_accumulate_backward(tp.value(xid), tp.value(wid), g, stride_h,
                                                          stride_w, pad_h, pad_w, groups,
                                                          &tp.gbuf(xid), &tp.gbuf(wid), gb);
                           });
    return Var{t, id};
}

Var conv2d(const Var& x, const Var& w, int stride, int padding, int groups) {
    return conv2d(x, w, nullptr, stride, stride, padding, padding, groups);
}

Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int padding, int groups) {
    return conv2d(x, w, &bias, stride, stride, padding, padding, groups);
}

Var strip_pool(const Var& x, StripAxis axis) {
    Tape* t = x.tape;
    Tensor out = hgpe::strip_pool(x.val(), axis);
    const int xid = x.id;
    const int id = t->push(std::move(out), {xid}, [=](Tape& tp, int self) {
        const Tensor g = tp.gbuf(self);
        Tensor& gx = tp.gbuf(xid);
        const int64_t n = gx.dim(0), c = gx.dim(1), h = gx.dim(2), w = gx.dim(3);
        if (axis == StripAxis::Height) {
            for (int64_t in = 0; in < n; ++in)
                for (int64_t ic = 0; ic < c; ++ic)
                    for (int64_t y = 0; y < h; ++y) {
                        const double share = g.at4(in, ic, y, 0) / static_cast<double>(w);
                        for (int64_t xo = 0; xo < w; ++xo) gx.at4(in, ic, y, xo) += share;
                    }
        } else {
            for (int64_t in = 0; in < n; ++in)
                for (int64_t ic = 0; ic < c; ++ic)
                    for (int64_t xo = 0; xo < w; ++xo) {
                        const double share = g.at4(in, ic, 0, xo) / static_cast<double>(h);
                        for (int64_t y = 0; y < h; ++y) gx.at4(in, ic, y, xo) += share;
                    }
        }
    });
    return Var{t, id};
}

Var pool_global_avg(const Var& x) {
    Tape* t = x.tape;
    Tensor out = hgpe::pool_global_avg(x.val());
    const int xid = x.id;
    const int id = t->push(std::move(out), {xid}, [=](Tape& tp, int self) {
        const Tensor g = tp.gbuf(self);
        Tensor& gx = tp.gbuf(xid);
        const int64_t n = gx.dim(0), c = gx.dim(1), hw = gx.dim(2) * gx.dim(3);
        for (int64_t in = 0; in < n; ++in)
            for (int64_t ic = 0; ic < c; ++ic) {
                const double share = g.at4(in, ic, 0, 0) / static_cast<double>(hw);
                double* p = gx.data() + (in * c + ic) * hw;
                for (int64_t i = 0; i < hw; ++i) p[i] += share;
            }
    });
    return Var{t, id};
}

Var softmax_lastdim(const Var& x) {
    Tape* t = x.tape;
    Tensor out = hgpe::softmax_lastdim(x.val());
    const int xid = x.id;
    const int id = t->push(std::move(out), {xid}, [=](Tape& tp, int self) {
        const Tensor g = tp.gbuf(self);
        const Tensor& y = tp.value(self);
        Tensor& gx = tp.gbuf(xid);
        const int64_t last = y.dim(y.rank() - 1);
        const int64_t rows = y.numel() / last;
        for (int64_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (int64_t i = 0; i < last; ++i) dot += g[r * last + i] * y[r * last + i];
            for (int64_t i = 0; i < last; ++i)
                gx[r * last + i] += y[r * last + i] * (g[r * last + i] - dot);
        }
    });
    return Var{t, id};
}

Var activation(const Var& x, Act kind) {
    Tape* t = x.tape;
    Tensor out = hgpe::activation(x.val(), kind);
    const int xid = x.id;
    const int id = t->push(std::move(out), {xid}, [=](Tape& tp, int self) {
        const Tensor g = tp.gbuf(self);
        const Tensor& xv = tp.value(xid);
        Tensor& gx = tp.gbuf(xid);
        for (int64_t i = 0; i < xv.numel(); ++i) gx[i] += g[i] * act_grad(kind, xv[i]);
    });
    return Var{t, id};
}

namespace {

// Shared slice-normalization backward:
//   dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)).
// `slice` enumerates flat indices of one normalization slice.
struct NormSliceStats {
    double mean, inv;
};

}  // namespace

Var batch_norm(const Var& x, const Var& scale, const Var& shift, Tensor& running_mean,
               Tensor& running_var, bool training, double momentum, double eps) {
    Tape* t = x.tape;
    const Tensor& xv = x.val();
    require_4d(xv.dims(), "batch_norm");
    const int64_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);

    // Moments used for normalization (batch stats when training, running
    // stats otherwise). Running statistics are buffers: updated in place,
    // no gradient flows through them.
    Tensor mean({c}), var({c});
    if (training) {
        const double cnt = static_cast<double>(n * hw);
        for (int64_t ic = 0; ic < c; ++ic) {
            double s = 0.0;
            for (int64_t in = 0; in < n; ++in) {
                const double* p = xv.data() + (in * c + ic) * hw;
                for (int64_t i = 0; i < hw; ++i) s += p[i];
            }
            mean[ic] = s / cnt;
            double v = 0.0;
            for (int64_t in = 0; in < n; ++in) {
                const double* p = xv.data() + (in * c + ic) * hw;
                for (int64_t i = 0; i < hw; ++i) {
                    const double d = p[i] - mean[ic];
                    v += d * d;
                }
            }
            var[ic] = v / cnt;
            running_mean[ic] = (1.0 - momentum) * running_mean[ic] + momentum * mean[ic];
            running_var[ic] = (1.0 - momentum) * running_var[ic] + momentum * var[ic];
        }
    } else {
        mean = running_mean;
        var = running_var;
    }

    Tensor out(xv.dims());
    for (int64_t ic = 0; ic < c; ++ic) {
        const double inv = 1.0 / std::sqrt(var[ic] + eps);
        const double a = scale.val()[ic] * inv;
        const double b = shift.val()[ic] - mean[ic] * a;
        for (int64_t in = 0; in < n; ++in) {
            const double* p = xv.data() + (in * c + ic) * hw;
            double* o = out.data() + (in * c + ic) * hw;
            for (int64_t i = 0; i < hw; ++i) o[i] = a * p[i] + b;
        }
    }

    const int xid = x.id, sid = scale.id, bid = shift.id;
    const int id = t->push(std::move(out), {xid, sid, bid}, [=](Tape& tp, int self) {
        const Tensor g = tp.gbuf(self);
        const Tensor& xin = tp.value(xid);
        const Tensor& gamma = tp.value(sid);
        Tensor& gx = tp.gbuf(xid);
        Tensor& gs = tp.gbuf(sid);
        Tensor& gb = tp.gbuf(bid);
        const double cnt = static_cast<double>(n * hw);
        for (int64_t ic = 0; ic < c; ++ic) {
            const double inv = 1.0 / std::sqrt(var[ic] + eps);
            double sum_g = 0.0, sum_gx = 0.0;
            for (int64_t in = 0; in < n; ++in) {
                const double* gp = g.data() + (in * c + ic) * hw;
                const double* xp = xin.data() + (in * c + ic) * hw;
                for (int64_t i = 0; i < hw; ++i) {
                    sum_g += gp[i];
                    sum_gx += gp[i] * (xp[i] - mean[ic]) * inv;
                }
            }
            gs[ic] += sum_gx;
            gb[ic] += sum_g;
            if (training) {
                const double m_dxhat = gamma[ic] * sum_g / cnt;
                const double m_dxhat_xhat = gamma[ic] * sum_gx / cnt;
                for (int64_t in = 0; in < n; ++in) {
                    const double* gp = g.data() + (in * c + ic) * hw;
                    const double* xp = xin.data() + (in * c + ic) * hw;
                    double* gxp = gx.data() + (in * c + ic) * hw;
                    for (int64_t i = 0; i < hw; ++i) {
                        const double xhat = (xp[i] - mean[ic]) * inv;
                        gxp[i] += inv * (gamma[ic] * gp[i] - m_dxhat - xhat * m_dxhat_xhat);
                    }
                }
            } else {
                const double a = gamma[ic] * inv;
                for (int64_t in = 0; in < n; ++in) {
                    const double* gp = g.data() + (in * c + ic) * hw;
                    double* gxp = gx.data() + (in * c + ic) * hw;
                    for (int64_t i = 0; i < hw; ++i) gxp[i] += a * gp[i];
                }
            }
        }
    });
    return Var{t, id};
}

Var layer_norm(const Var& x, const Var& scale, const Var& shift, double eps) {
    Tape* t = x.tape;
    Tensor out = hgpe::layer_norm(x.val(), scale.val(), shift.val(), eps);
    const int xid = x.id, sid = scale.id, bid = shift.id;
    const int id = t->push(std::move(out), {xid, sid, bid}, [=](Tape& tp, int self) {
        const Tensor g = tp.gbuf(self);
        const Tensor& xv = tp.value(xid);
        const Tensor& gamma = tp.value(sid);
        Tensor& gx = tp.gbuf(xid);
        Tensor& gs = tp.gbuf(sid);
        Tensor& gb = tp.gbuf(bid);
        const int64_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
        for (int64_t in = 0; in < n; ++in)
            for (int64_t i = 0; i < hw; ++i) {
                double mean = 0.0;
                for (int64_t ic = 0; ic < c; ++ic) mean += xv.data()[(in * c + ic) * hw + i];
                mean /= static_cast<double>(c);
                double var = 0.0;
                for (int64_t ic = 0; ic < c; ++ic) {
                    const double d = xv.data()[(in * c + ic) * hw + i] - mean;
                    var += d * d;
                }
                var /= static_cast<double>(c);
                const double inv = 1.0 / std::sqrt(var + eps);
                double m_dxhat = 0.0, m_dxhat_xhat = 0.0;
                for (int64_t ic = 0; ic < c; ++ic) {
                    const int64_t at = (in * c + ic) * hw + i;
                    const double xhat = (xv[at] - mean) * inv;
                    const double dxhat = g[at] * gamma[ic];
                    gs[ic] += g[at] * xhat;
                    gb[ic] += g[at];
                    m_dxhat += dxhat;
                    m_dxhat_xhat += dxhat * xhat;
                }
                m_dxhat /= static_cast<double>(c);
                m_dxhat_xhat /= static_cast<double>(c);
                for (int64_t ic = 0; ic < c; ++ic) {
                    const int64_t at = (in * c + ic) * hw + i;
                    const double xhat = (xv[at] - mean) * inv;
                    gx[at] += inv * (g[at] * gamma[ic] - m_dxhat - xhat * m_dxhat_xhat);
                }
            }
    });
    return Var{t, id};
}

Var group_norm(const Var& x, const Var& scale, const Var& shift, int groups, double eps) {
    Tape* t = x.tape;
    Tensor out = hgpe::group_norm(x.val(), scale.val(), shift.val(), groups, eps);
    const int xid = x.id, sid = scale.id, bid = shift.id;
    const int id = t->push(std::move(out), {xid, sid, bid}, [=](Tape& tp, int self) {
        const Tensor g = tp.gbuf(self);
        const Tensor& xv = tp.value(xid);
        const Tensor& gamma = tp.value(sid);
        Tensor& gx = tp.gbuf(xid);
        Tensor& gs = tp.gbuf(sid);
        Tensor& gb = tp.gbuf(bid);
        const int64_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
        const int64_t cpg = c / groups;
        const double cnt = static_cast<double>(cpg * hw);
        for (int64_t in = 0; in < n; ++in)
            for (int64_t grp = 0; grp < groups; ++grp) {
                double mean = 0.0, var = 0.0;
                for (int64_t cc = 0; cc < cpg; ++cc) {
                    const double* p = xv.data() + (in * c + grp * cpg + cc) * hw;
                    for (int64_t i = 0; i < hw; ++i) mean += p[i];
                }
                mean /= cnt;
                for (int64_t cc = 0; cc < cpg; ++cc) {
                    const double* p = xv.data() + (in * c + grp * cpg + cc) * hw;
                    for (int64_t i = 0; i < hw; ++i) {
                        const double d = p[i] - mean;
                        var += d * d;
                    }
                }
                var /= cnt;
                const double inv = 1.0 / std::sqrt(var + eps);
                double m_dxhat = 0.0, m_dxhat_xhat = 0.0;
                for (int64_t cc = 0; cc < cpg; ++cc) {
                    const int64_t ic = grp * cpg + cc;
                    const double* p = xv.data() + (in * c + ic) * hw;
                    const double* gp = g.data() + (in * c + ic) * hw;
                    for (int64_t i = 0; i < hw; ++i) {
                        const double xhat = (p[i] - mean) * inv;
                        const double dxhat = gp[i] * gamma[ic];
                        gs[ic] += gp[i] * xhat;
                        gb[ic] += gp[i];
                        m_dxhat += dxhat;
                        m_dxhat_xhat += dxhat * xhat;
                    }
                }
                m_dxhat /= cnt;
                m_dxhat_xhat /= cnt;
                for (int64_t cc = 0; cc < cpg; ++cc) {
                    const int64_t ic = grp * cpg + cc;
                    const double* p = xv.data() + (in * c + ic) * hw;
                    const double* gp = g.data() + (in * c + ic) * hw;
                    double* gxp = gx.data() + (in * c + ic) * hw;
                    for (int64_t i = 0; i < hw; ++i) {
                        const double xhat = (p[i] - mean) * inv;
                        gxp[i] += inv * (gp[i] * gamma[ic] - m_dxhat - xhat * m_dxhat_xhat);
                    }
                }
            }
    });
    return Var{t, id};
}

std::pair<Var, PadRecord> window_partition(const Var& x, int win_h, int win_w) {
    Tape* t = x.tape;
    auto [out, rec] = hgpe::window_partition(x.val(), win_h, win_w);
    const int xid = x.id;
    const PadRecord r = rec;
    const int id = t->push(std::move(out), {xid}, [=](Tape& tp, int self) {
        const Tensor g = tp.gbuf(self);
        Tensor& gx = tp.gbuf(xid);
        const int64_t rows = r.rows(), cols = r.cols();
        for (int64_t in = 0; in < r.n; ++in)
            for (int64_t rr = 0; rr < rows; ++rr)
                for (int64_t cl = 0; cl < cols; ++cl) {
                    const int64_t b = (in * rows + rr) * cols + cl;
                    for (int64_t ic = 0; ic < r.c; ++ic)
                        for (int64_t y = 0; y < r.win_h; ++y)
                            for (int64_t xo = 0; xo < r.win_w; ++xo) {
                                const int64_t iy = rr * r.win_h + y, ix = cl * r.win_w + xo;
                                if (iy < r.h && ix < r.w)
                                    gx.at4(in, ic, iy, ix) += g.at4(b, ic, y, xo);
                            }
                }
    });
    return {Var{t, id}, rec};
}

Var window_merge(const Var& windows, const PadRecord& rec) {
    Tape* t = windows.tape;
    Tensor out = hgpe::window_merge(windows.val(), rec);
    const int wid = windows.id;
    const PadRecord r = rec;
    const int id = t->push(std::move(out), {wid}, [=](Tape& tp, int self) {
        const Tensor g = tp.gbuf(self);
        Tensor& gw = tp.gbuf(wid);
        const int64_t rows = r.rows(), cols = r.cols();
        for (int64_t in = 0; in < r.n; ++in)
            for (int64_t rr = 0; rr < rows; ++rr)
                for (int64_t cl = 0; cl < cols; ++cl) {
                    const int64_t b = (in * rows + rr) * cols + cl;
                    for (int64_t ic = 0; ic < r.c; ++ic)
                        for (int64_t y = 0; y < r.win_h; ++y)
                            for (int64_t xo = 0; xo < r.win_w; ++xo) {
                                const int64_t iy = rr * r.win_h + y, ix = cl * r.win_w + xo;
                                if (iy < r.h && ix < r.w)
                                    gw.at4(b, ic, y, xo) += g.at4(in, ic, iy, ix);
                            }
                }
    });
    return Var{t, id};
}

std::vector<Var> split_axis(const Var& x, const std::vector<int64_t>& sizes, int axis) {
    Tape* t = x.tape;
    auto parts = hgpe::split_axis(x.val(), sizes, axis);
    const int xid = x.id;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.val().dim(i);
    for (int i = axis + 1; i < x.val().rank(); ++i) inner *= x.val().dim(i);
    const int64_t axis_total = x.val().dim(axis);

    std::vector<Var> out;
    int64_t off = 0;
    for (size_t pi = 0; pi < parts.size(); ++pi) {
        const int64_t o = off, s = sizes[pi];
        const int id = t->push(std::move(parts[pi]), {xid}, [=](Tape& tp, int self) {
            const Tensor g = tp.gbuf(self);
            Tensor& gx = tp.gbuf(xid);
            for (int64_t ou = 0; ou < outer; ++ou) {
                const double* src = g.data() + ou * s * inner;
                double* dst = gx.data() + (ou * axis_total + o) * inner;
                for (int64_t i = 0; i < s * inner; ++i) dst[i] += src[i];
            }
        });
        out.push_back(Var{t, id});
        off += s;
    }
    return out;
}

Var concat_axis(const std::vector<Var>& parts, int axis) {
    if (parts.empty()) fail("concat_axis: no inputs");
    Tape* t = parts[0].tape;
    std::vector<Tensor> vals;
    std::vector<int> ids;
    std::vector<int64_t> sizes;
    for (const auto& p : parts) {
        vals.push_back(p.val());
        ids.push_back(p.id);
        sizes.push_back(p.val().dim(axis));
    }
    Tensor out = hgpe::concat_axis(vals, axis);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= out.dim(i);
    for (int i = axis + 1; i < out.rank(); ++i) inner *= out.dim(i);
    const int64_t axis_total = out.dim(axis);
    const int id = t->push(std::move(out), ids, [=](Tape& tp, int self) {
        const Tensor g = tp.gbuf(self);
        int64_t off = 0;
        for (size_t pi = 0; pi < ids.size(); ++pi) {
            Tensor& gp = tp.gbuf(ids[pi]);
            const int64_t s = sizes[pi];
            for (int64_t ou = 0; ou < outer; ++ou) {
                const double* src = g.data() + (ou * axis_total + off) * inner;
                double* dst = gp.data() + ou * s * inner;
                for (int64_t i = 0; i < s * inner; ++i) dst[i] += src[i];
            }
            off += s;
        }
    });
    return Var{t, id};
}

std::vector<Var> split_channels(const Var& x, const std::vector<int64_t>& sizes) {
    require_4d(x.val().dims(), "split_channels");
    return split_axis(x, sizes, 1);
}

Var concat_channels(const std::vector<Var>& parts) { return concat_axis(parts, 1); }

Var matmul_batched(const Var& a, const Var& b) {
    Tape* t = a.tape;
    Tensor out = hgpe::matmul_batched(a.val(), b.val());
    const int aid = a.id, bid = b.id;
    const int id = t->push(std::move(out), {aid, bid}, [=](Tape& tp, int self) {
        const Tensor g = tp.gbuf(self);
        const Tensor& av = tp.value(aid);
        const Tensor& bv = tp.value(bid);
        Tensor& ga = tp.gbuf(aid);
        Tensor& gb = tp.gbuf(bid);
        const int64_t m = av.dim(av.rank() - 2), k = av.dim(av.rank() - 1);
        const int64_t nn = bv.dim(bv.rank() - 1);
        const int64_t batch = av.numel() / (m * k);
        for (int64_t bi = 0; bi < batch; ++bi) {
            const double* pa = av.data() + bi * m * k;
            const double* pb = bv.data() + bi * k * nn;
            const double* pg = g.data() + bi * m * nn;
            double* pga = ga.data() + bi * m * k;
            double* pgb = gb.data() + bi * k * nn;
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < nn; ++j) {
                    const double go = pg[i * nn + j];
                    for (int64_t kk = 0; kk < k; ++kk) {
                        pga[i * k + kk] += go * pb[kk * nn + j];
                        pgb[kk * nn + j] += go * pa[i * k + kk];
                    }
                }
        }
    });
    return Var{t, id};
}

Var transpose_last2(const Var& x) {
    Tape* t = x.tape;
    Tensor out = hgpe::transpose_last2(x.val());
    const int xid = x.id;
    const int id = t->push(std::move(out), {xid}, [=](Tape& tp, int self) {
        const Tensor gt = hgpe::transpose_last2(tp.gbuf(self));
        Tensor& gx = tp.gbuf(xid);
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += gt[i];
    });
    return Var{t, id};
}

Var reshape(const Var& x, std::vector<int64_t> dims) {
    Tape* t = x.tape;
    Tensor out = x.val().reshaped(std::move(dims));
    const int xid = x.id;
    const int id = t->push(std::move(out), {xid}, [=](Tape& tp, int self) {
        const Tensor& g = tp.gbuf(self);
        Tensor& gx = tp.gbuf(xid);
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += g[i];
    });
    return Var{t, id};
}

namespace {

// Permutation ops share one pattern: backward applies the inverse map.
Var permute_node(Tape* t, Tensor out, int xid, std::function<Tensor(const Tensor&)> inverse) {
    const int id = t->push(std::move(out), {xid}, [xid, inv = std::move(inverse)](Tape& tp, int self) {
        const Tensor gi = inv(tp.gbuf(self));
        Tensor& gx = tp.gbuf(xid);
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += gi[i];
    });
    return Var{t, id};
}

}  // namespace

Var nchw_to_tokens(const Var& x) {
    const int64_t h = x.dim(2), w = x.dim(3);
    return permute_node(x.tape, hgpe::nchw_to_tokens(x.val()), x.id,
                        [h, w](const Tensor& g) { return hgpe::tokens_to_nchw(g, h, w); });
}

Var tokens_to_nchw(const Var& x, int64_t h, int64_t w) {
    return permute_node(x.tape, hgpe::tokens_to_nchw(x.val(), h, w), x.id,
                        [](const Tensor& g) { return hgpe::nchw_to_tokens(g); });
}

Var split_heads(const Var& x, int heads) {
    return permute_node(x.tape, hgpe::split_heads(x.val(), heads), x.id,
                        [heads](const Tensor& g) { return hgpe::merge_heads(g, heads); });
}

Var merge_heads(const Var& x, int heads) {
    return permute_node(x.tape, hgpe::merge_heads(x.val(), heads), x.id,
                        [heads](const Tensor& g) { return hgpe::split_heads(g, heads); });
}

Var add(const Var& a, const Var& b) {
    Tape* t = a.tape;
    Tensor out = hgpe::add(a.val(), b.val());
    const int aid = a.id, bid = b.id;
    const int id = t->push(std::move(out), {aid, bid}, [=](Tape& tp, int self) {
        const Tensor g = tp.gbuf(self);
        Tensor& ga = tp.gbuf(aid);
        Tensor& gb = tp.gbuf(bid);
        for (int64_t i = 0; i < g.numel(); ++i) {
            ga[i] += g[i];
            gb[i] += g[i];
        }
    });
    return Var{t, id};
}

Var mul(const Var& a, const Var& b) {
    Tape* t = a.tape;
    Tensor out = hgpe::mul(a.val(), b.val());
    const int aid = a.id, bid = b.id;
    const int id = t->push(std::move(out), {aid, bid}, [=](Tape& tp, int self) {
        const Tensor g = tp.gbuf(self);
        const Tensor& av = tp.value(aid);
        const Tensor& bv = tp.value(bid);
        Tensor& ga = tp.gbuf(aid);
        Tensor& gb = tp.gbuf(bid);
        for (int64_t i = 0; i < g.numel(); ++i) {
            ga[i] += g[i] * bv[i];
            gb[i] += g[i] * av[i];
        }
    });
    return Var{t, id};
}

Var mul_bcast(const Var& x, const Var& gate) {
    Tape* t = x.tape;
    Tensor out = hgpe::mul_bcast(x.val(), gate.val());
    const int xid = x.id, gid = gate.id;
    const int id = t->push(std::move(out), {xid, gid}, [=](Tape& tp, int self) {
        const Tensor g = tp.gbuf(self);
        const Tensor& xv = tp.value(xid);
        const Tensor& gv = tp.value(gid);
        Tensor& gx = tp.gbuf(xid);
        Tensor& gg = tp.gbuf(gid);
        const int rank = xv.rank();
        std::vector<int64_t> gstride(static_cast<size_t>(rank));
        int64_t s = 1;
        for (int i = rank - 1; i >= 0; --i) {
            gstride[static_cast<size_t>(i)] = (gv.dim(i) == 1) ? 0 : s;
            s *= gv.dim(i);
        }
        std::vector<int64_t> idx(static_cast<size_t>(rank), 0);
        for (int64_t flat = 0; flat < xv.numel(); ++flat) {
            int64_t gi = 0;
            for (int i = 0; i < rank; ++i) gi += idx[static_cast<size_t>(i)] * gstride[static_cast<size_t>(i)];
            gx[flat] += g[flat] * gv[gi];
            gg[gi] += g[flat] * xv[flat];
            for (int i = rank - 1; i >= 0; --i) {
                if (++idx[static_cast<size_t>(i)] < xv.dim(i)) break;
                idx[static_cast<size_t>(i)] = 0;
            }
        }
    });
    return Var{t, id};
}

Var scale_by(const Var& x, double s) {
    Tape* t = x.tape;
    Tensor out = hgpe::scale_by(x.val(), s);
    const int xid = x.id;
    const int id = t->push(std::move(out), {xid}, [=](Tape& tp, int self) {
        const Tensor g = tp.gbuf(self);
        Tensor& gx = tp.gbuf(xid);
        for (int64_t i = 0; i < g.numel(); ++i) gx[i] += s * g[i];
    });
    return Var{t, id};
}

Var conv_channels1d(const Var& x, const Var& kernel) {
    Tape* t = x.tape;
    Tensor out = hgpe::conv_channels1d(x.val(), kernel.val());
    const int xid = x.id, kid = kernel.id;
    const int id = t->push(std::move(out), {xid, kid}, [=](Tape& tp, int self) {
        const Tensor g = tp.gbuf(self);
        const Tensor& xv = tp.value(xid);
        const Tensor& kv = tp.value(kid);
        Tensor& gx = tp.gbuf(xid);
        Tensor& gk = tp.gbuf(kid);
        const int64_t n = xv.dim(0), c = xv.dim(1), k = kv.dim(0), half = k / 2;
        for (int64_t in = 0; in < n; ++in)
            for (int64_t ic = 0; ic < c; ++ic) {
                const double go = g.at4(in, ic, 0, 0);
                for (int64_t j = 0; j < k; ++j) {
                    const int64_t src = ic + j - half;
                    if (src >= 0 && src < c) {
                        gk[j] += go * xv.at4(in, src, 0, 0);
                        gx.at4(in, src, 0, 0) += go * kv[j];
                    }
                }
            }
    });
    return Var{t, id};
}

Var linear(const Var& x, const Var& w, const Var& b) {
    Tape* t = x.tape;
    Tensor out = hgpe::linear(x.val(), w.val(), b.val());
    const int xid = x.id, wid = w.id, bid = b.id;
    const int id = t->push(std::move(out), {xid, wid, bid}, [=](Tape& tp, int self) {
        const Tensor g = tp.gbuf(self);
        const Tensor& xv = tp.value(xid);
        const Tensor& wv = tp.value(wid);
        Tensor& gx = tp.gbuf(xid);
        Tensor& gw = tp.gbuf(wid);
        Tensor& gb = tp.gbuf(bid);
        const int64_t n = xv.dim(0), k = xv.dim(1), m = wv.dim(0);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < m; ++j) {
                const double go = g[i * m + j];
                gb[j] += go;
                for (int64_t kk = 0; kk < k; ++kk) {
                    gx[i * k + kk] += go * wv[j * k + kk];
                    gw[j * k + kk] += go * xv[i * k + kk];
                }
            }
    });
    return Var{t, id};
}

Var reduce_sum(const Var& x) {
    Tape* t = x.tape;
    Tensor out = hgpe::reduce_sum(x.val());
    const int xid = x.id;
    const int id = t->push(std::move(out), {xid}, [=](Tape& tp, int self) {
        const double g = tp.gbuf(self)[0];
        Tensor& gx = tp.gbuf(xid);
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += g;
    });
    return Var{t, id};
}

Var reduce_mean(const Var& x) {
    Tape* t = x.tape;
    Tensor out = hgpe::reduce_mean(x.val());
    const int xid = x.id;
    const int id = t->push(std::move(out), {xid}, [=](Tape& tp, int self) {
        const double g = tp.gbuf(self)[0] / static_cast<double>(tp.value(xid).numel());
        Tensor& gx = tp.gbuf(xid);
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += g;
    });
    return Var{t, id};
}

Var cross_entropy(const Var& logits, const std::vector<int>& labels, double smoothing) {
    Tape* t = logits.tape;
    const Tensor& z = logits.val();
    if (z.rank() != 2) fail("cross_entropy: logits must be [N, K]");
    const int64_t n = z.dim(0), k = z.dim(1);
    if (static_cast<int64_t>(labels.size()) != n) fail("cross_entropy: label count mismatch");
    for (int lab : labels)
        if (lab < 0 || lab >= k)
            fail("cross_entropy: label " + std::to_string(lab) + " out of range [0, " +
                 std::to_string(k) + ")");

    Tensor probs = hgpe::softmax_lastdim(z);
    const double off = smoothing / static_cast<double>(k);
    const double on = 1.0 - smoothing + off;
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double mx = z[i * k];
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, z[i * k + j]);
        double lse = 0.0;
        for (int64_t j = 0; j < k; ++j) lse += std::exp(z[i * k + j] - mx);
        lse = std::log(lse) + mx;
        for (int64_t j = 0; j < k; ++j) {
            const double tgt = (j == labels[i]) ? on : off;
            loss -= tgt * (z[i * k + j] - lse);
        }
    }
    loss /= static_cast<double>(n);

    const int zid = logits.id;
    const std::vector<int> labs = labels;
    const int id = t->push(Tensor::scalar(loss), {zid},
                           [=, probs = std::move(probs)](Tape& tp, int self) {
                               const double g = tp.gbuf(self)[0] / static_cast<double>(n);
                               Tensor& gz = tp.gbuf(zid);
                               for (int64_t i = 0; i < n; ++i)
                                   for (int64_t j = 0; j < k; ++j) {
                                       const double tgt = (j == labs[i]) ? on : off;
                                       gz[i * k + j] += g * (probs[i * k + j] - tgt);
                                   }
                           });
    return Var{t, id};
}

}  // namespace hgpe::ad
