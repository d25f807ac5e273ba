#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "hgpe/autodiff.hpp"
#include "hgpe/blocks.hpp"
#include "hgpe/config.hpp"
#include "hgpe/rng.hpp"

namespace hgpe {

template <typename V>
struct StemT {
    ConvBnT<V> conv;  // 3x3 stride 2
    IrbT<V> irb;      // stride 1, shape preserving
};

template <typename V>
struct BasicBlockT {
    std::optional<GpeBlockT<V>> gpe;  // absent in stage 1 and when window size is 0
    IrbT<V> irb;
};

template <typename V>
struct StageT {
    std::optional<IrbT<V>> down;  // stride-2 IRB, absent for stage 1
    std::vector<BasicBlockT<V>> blocks;
};

template <typename V>
struct HeadT {
    V weight;  // [num_classes, C4]
    V bias;    // [num_classes]
};

template <typename V>
struct HGpeModelT {
    ModelConfig cfg;
    StemT<V> stem;
    std::array<StageT<V>, 4> stages;
    HeadT<V> head;
};

using HGpeModel = HGpeModelT<Tensor>;
using HGpeModelF = HGpeModelT<TensorF>;

// ---------------------------------------------------------------------------
// Construction. All weights come from one seeded stream in traversal order:
// conv/linear weights are fan-in-scaled truncated normals, biases zero,
// norm affines identity, batch-norm running stats (0, 1).
// ---------------------------------------------------------------------------

namespace detail {

inline BatchNormT<Tensor> make_bn(int64_t c) {
    return {Tensor::full({c}, 1.0), Tensor({c}), Tensor({c}), Tensor::full({c}, 1.0)};
}

inline LayerNormT<Tensor> make_ln(int64_t c) { return {Tensor::full({c}, 1.0), Tensor({c})}; }

inline Tensor conv_weight(Rng& rng, int64_t cout, int64_t cin_per_group, int64_t kh, int64_t kw) {
    Tensor w({cout, cin_per_group, kh, kw});
    const double std = std::sqrt(2.0 / static_cast<double>(cin_per_group * kh * kw));
    rng.fill_truncated_normal(w, 0.0, std);
    return w;
}

inline ConvBnT<Tensor> make_conv_bn(Rng& rng, int64_t cin, int64_t cout, int64_t kh, int64_t kw,
                                    int groups) {
    return {conv_weight(rng, cout, cin / groups, kh, kw), make_bn(cout)};
}

inline IrbT<Tensor> make_irb(Rng& rng, int64_t cin, int64_t cout, int t, int stride) {
    const int64_t hidden = cin * t;
    IrbT<Tensor> irb;
    irb.stride = stride;
    irb.residual = (stride == 1 && cin == cout);
    irb.expand = make_conv_bn(rng, cin, hidden, 1, 1, 1);
    irb.dw = make_conv_bn(rng, hidden, hidden, 3, 3, static_cast<int>(hidden));
    irb.project = make_conv_bn(rng, hidden, cout, 1, 1, 1);
    return irb;
}

inline GigT<Tensor> make_gig(Rng& rng, int64_t c, int kernel) {
    GigT<Tensor> g;
    g.kernel = kernel;
    g.strip_weight = conv_weight(rng, c, 1, kernel, 1);
    g.strip_bn = make_bn(c);
    g.gate_h_weight = conv_weight(rng, c, 1, 3, 1);
    g.gate_h_bias = Tensor({c});
    g.gate_w_weight = conv_weight(rng, c, 1, 1, 3);
    g.gate_w_bias = Tensor({c});
    return g;
}

inline LsaeT<Tensor> make_lsae(Rng& rng, int64_t c, int win, int head_dim) {
    LsaeT<Tensor> l;
    l.win_h = l.win_w = win;
    l.head_dim = head_dim;
    l.spatial_attention = true;
    l.norm = make_ln(c);
    l.qk = make_conv_bn(rng, c, 2 * c, 1, 1, 1);
    l.v = make_conv_bn(rng, c, c, 1, 1, 1);
    return l;
}

// Group count for the ASA group norms: at most 16, and it must divide C.
inline int asa_gn_groups(int64_t c) {
    int g = static_cast<int>(std::min<int64_t>(16, c));
    while (c % g != 0) --g;
    return g;
}

inline AsaT<Tensor> make_asa(Rng& rng, int64_t c) {
    AsaT<Tensor> a;
    a.gn_groups = asa_gn_groups(c);
    a.conv_h_weight = conv_weight(rng, c, 1, 3, 1);
    a.conv_h_bias = Tensor({c});
    a.conv_w_weight = conv_weight(rng, c, 1, 1, 3);
    a.conv_w_bias = Tensor({c});
    a.gn_h_scale = Tensor::full({c}, 1.0);
    a.gn_h_shift = Tensor({c});
    a.gn_w_scale = Tensor::full({c}, 1.0);
    a.gn_w_shift = Tensor({c});
    return a;
}

inline CraT<Tensor> make_cra(Rng& rng, int64_t c) {
    const int k = cra_kernel_size(static_cast<int>(c));
    Tensor kernel({k});
    rng.fill_truncated_normal(kernel, 0.0, std::sqrt(1.0 / k));
    return {std::move(kernel)};
}

inline GpeBlockT<Tensor> make_gpe(Rng& rng, const ModelConfig& cfg, int64_t c, int win) {
    GpeBlockT<Tensor> b;
    b.ln1 = make_ln(c);
    b.gpm.use_gig = cfg.use_gig;
    b.gpm.use_lsae = cfg.use_lsae;
    b.gpm.use_asa_cra = cfg.use_asa_cra;
    const int64_t half = c / 2;
    if (cfg.use_gig) b.gpm.gig = make_gig(rng, c, cfg.gig_kernel);
    if (cfg.use_lsae) b.gpm.lsae = make_lsae(rng, half, win, cfg.lsae_head_dim);
    if (cfg.use_lsae && cfg.use_asa_cra) b.gpm.asa = make_asa(rng, half);
    b.gpm.irb = make_irb(rng, half, half, cfg.irb_expansion, 1);
    if (cfg.use_asa_cra) b.gpm.cra = make_cra(rng, half);
    b.ln2 = make_ln(c);
    b.irb2 = make_irb(rng, c, c, cfg.irb_expansion, 1);
    return b;
}

}  // namespace detail

inline HGpeModel build_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    HGpeModel m;
    m.cfg = cfg;

    const int64_t c0 = cfg.out_channels[0];
    m.stem.conv = detail::make_conv_bn(rng, 3, c0, 3, 3, 1);
    m.stem.irb = detail::make_irb(rng, c0, c0, cfg.irb_expansion, 1);

    int64_t prev = c0;
    for (int s = 0; s < 4; ++s) {
        StageT<Tensor>& stage = m.stages[static_cast<size_t>(s)];
        const int64_t c = cfg.out_channels[static_cast<size_t>(s)];
        if (s > 0) {
            stage.down = detail::make_irb(rng, prev, c, cfg.irb_expansion, 2);
        }
        const int win = (s == 0) ? 0 : stage_window_size(s + 1, cfg);
        for (int b = 0; b < cfg.stack_count[static_cast<size_t>(s)]; ++b) {
            BasicBlockT<Tensor> blk;
            if (win > 0) blk.gpe = detail::make_gpe(rng, cfg, c, win);
            blk.irb = detail::make_irb(rng, c, c, cfg.irb_expansion, 1);
            stage.blocks.push_back(std::move(blk));
        }
        prev = c;
    }

    const int64_t c4 = cfg.out_channels[3];
    m.head.weight = Tensor({cfg.num_classes, c4});
    rng.fill_truncated_normal(m.head.weight, 0.0, std::sqrt(1.0 / static_cast<double>(c4)));
    m.head.bias = Tensor({cfg.num_classes});
    return m;
}

// ---------------------------------------------------------------------------
// Forward.
// ---------------------------------------------------------------------------

// Features before the classifier head: [N, C4, H/16, W/16] for inputs
// divisible by 16. Optionally records the output shape of each stage.
template <typename V>
V backbone_forward(HGpeModelT<V>& m, const V& x, Mode mode,
                   std::vector<std::vector<int64_t>>* stage_shapes = nullptr) {
    if (x.dims().size() != 4 || x.dims()[1] != 3)
        fail("stem/conv: expected input [N,3,H,W], got " + dims_str(x.dims()));
    if (x.dims()[2] < 32 || x.dims()[3] < 32)
        fail("stem/conv: input spatial size must be >= 32, got " + dims_str(x.dims()));
    V y = activation(conv_bn(x, m.stem.conv, mode, 2, 1, 1), Act::HSwish);
    y = irb_forward(y, m.stem.irb, mode);
    if (stage_shapes) stage_shapes->push_back(y.dims());
    for (auto& stage : m.stages) {
        if (stage.down) y = irb_forward(y, *stage.down, mode);
        for (auto& blk : stage.blocks) {
            if (blk.gpe) y = gpe_block_forward(y, *blk.gpe, mode);
            y = irb_forward(y, blk.irb, mode);
        }
        if (stage_shapes) stage_shapes->push_back(y.dims());
    }
    return y;
}

template <typename V>
V model_forward(HGpeModelT<V>& m, const V& x, Mode mode,
                std::vector<std::vector<int64_t>>* stage_shapes = nullptr) {
    V y = backbone_forward(m, x, mode, stage_shapes);
    const int64_t n = y.dims()[0], c = y.dims()[1];
    y = reshape(pool_global_avg(y), {n, c});
    return linear(y, m.head.weight, m.head.bias);
}

// ---------------------------------------------------------------------------
// Traversal. visit_model defines the canonical parameter order; the
// ParamStore, serialization, lifting and casting all derive from it.
//   param_fn(name, V&)                      - learnable leaves
//   buffer_fn(name, tensor_of_t<V>&)        - batch-norm running statistics
// ---------------------------------------------------------------------------

namespace detail {

template <typename V, typename PF, typename BF>
void visit_conv_bn(ConvBnT<V>& p, const std::string& path, PF&& pf, BF&& bf) {
    pf(path + "/weight", p.weight);
    pf(path + "/bn/scale", p.bn.scale);
    pf(path + "/bn/shift", p.bn.shift);
    bf(path + "/bn/running_mean", p.bn.running_mean);
    bf(path + "/bn/running_var", p.bn.running_var);
}

template <typename V, typename PF>
void visit_ln(LayerNormT<V>& p, const std::string& path, PF&& pf) {
    pf(path + "/scale", p.scale);
    pf(path + "/shift", p.shift);
}

template <typename V, typename PF, typename BF>
void visit_irb(IrbT<V>& p, const std::string& path, PF&& pf, BF&& bf) {
    visit_conv_bn(p.expand, path + "/expand", pf, bf);
    visit_conv_bn(p.dw, path + "/dw", pf, bf);
    visit_conv_bn(p.project, path + "/project", pf, bf);
}

template <typename V, typename PF, typename BF>
void visit_gpe(GpeBlockT<V>& p, const std::string& path, PF&& pf, BF&& bf) {
    visit_ln(p.ln1, path + "/ln1", pf);
    if (p.gpm.gig) {
        GigT<V>& g = *p.gpm.gig;
        pf(path + "/gpm/gig/strip/weight", g.strip_weight);
        pf(path + "/gpm/gig/strip/bn/scale", g.strip_bn.scale);
        pf(path + "/gpm/gig/strip/bn/shift", g.strip_bn.shift);
        bf(path + "/gpm/gig/strip/bn/running_mean", g.strip_bn.running_mean);
        bf(path + "/gpm/gig/strip/bn/running_var", g.strip_bn.running_var);
        pf(path + "/gpm/gig/gate_h/weight", g.gate_h_weight);
        pf(path + "/gpm/gig/gate_h/bias", g.gate_h_bias);
        pf(path + "/gpm/gig/gate_w/weight", g.gate_w_weight);
        pf(path + "/gpm/gig/gate_w/bias", g.gate_w_bias);
    }
    if (p.gpm.lsae) {
        LsaeT<V>& l = *p.gpm.lsae;
        visit_ln(l.norm, path + "/gpm/lsae/norm", pf);
        if (l.qk) visit_conv_bn(*l.qk, path + "/gpm/lsae/qk", pf, bf);
        visit_conv_bn(l.v, path + "/gpm/lsae/v", pf, bf);
    }
    if (p.gpm.asa) {
        AsaT<V>& a = *p.gpm.asa;
        pf(path + "/gpm/asa/conv_h/weight", a.conv_h_weight);
        pf(path + "/gpm/asa/conv_h/bias", a.conv_h_bias);
        pf(path + "/gpm/asa/gn_h/scale", a.gn_h_scale);
        pf(path + "/gpm/asa/gn_h/shift", a.gn_h_shift);
        pf(path + "/gpm/asa/conv_w/weight", a.conv_w_weight);
        pf(path + "/gpm/asa/conv_w/bias", a.conv_w_bias);
        pf(path + "/gpm/asa/gn_w/scale", a.gn_w_scale);
        pf(path + "/gpm/asa/gn_w/shift", a.gn_w_shift);
    }
    visit_irb(p.gpm.irb, path + "/gpm/irb", pf, bf);
    if (p.gpm.cra) pf(path + "/gpm/cra/kernel", p.gpm.cra->kernel);
    visit_ln(p.ln2, path + "/ln2", pf);
    visit_irb(p.irb2, path + "/irb2", pf, bf);
}

}  // namespace detail

template <typename V, typename PF, typename BF>
void visit_model(HGpeModelT<V>& m, PF&& pf, BF&& bf) {
    detail::visit_conv_bn(m.stem.conv, "stem/conv", pf, bf);
    detail::visit_irb(m.stem.irb, "stem/irb", pf, bf);
    for (int s = 0; s < 4; ++s) {
        StageT<V>& stage = m.stages[static_cast<size_t>(s)];
        const std::string sp = "stage" + std::to_string(s + 1);
        if (stage.down) detail::visit_irb(*stage.down, sp + "/down", pf, bf);
        for (size_t b = 0; b < stage.blocks.size(); ++b) {
            const std::string bp = sp + "/block" + std::to_string(b);
            if (stage.blocks[b].gpe) detail::visit_gpe(*stage.blocks[b].gpe, bp + "/gpe", pf, bf);
            detail::visit_irb(stage.blocks[b].irb, bp + "/irb", pf, bf);
        }
    }
    pf("head/weight", m.head.weight);
    pf("head/bias", m.head.bias);
}

template <typename V, typename PF>
void visit_params(HGpeModelT<V>& m, PF&& pf) {
    visit_model(m, pf, [](const std::string&, auto&) {});
}

template <typename V, typename BF>
void visit_buffers(HGpeModelT<V>& m, BF&& bf) {
    visit_model(m, [](const std::string&, auto&) {}, bf);
}

// Named, ordered view over a model's tensors. Entries point into the model.
struct ParamStore {
    struct Entry {
        std::string name;
        Tensor* tensor;
        bool learnable;
    };
    std::vector<Entry> entries;

    int64_t learnable_count() const {
        int64_t n = 0;
        for (const auto& e : entries)
            if (e.learnable) n += e.tensor->numel();
        return n;
    }
};

inline ParamStore build_param_store(HGpeModel& m) {
    ParamStore store;
    visit_model(
        m, [&](const std::string& name, Tensor& t) { store.entries.push_back({name, &t, true}); },
        [&](const std::string& name, Tensor& t) { store.entries.push_back({name, &t, false}); });
    return store;
}

// ---------------------------------------------------------------------------
// Structural transforms: the same traversal, producing a parallel model.
// Used to lift a model onto a tape and to cast between storage dtypes.
// ---------------------------------------------------------------------------

namespace detail {

template <typename VTo, typename VFrom, typename LF, typename BF>
BatchNormT<VTo> tf_bn(BatchNormT<VFrom>& p, const std::string& path, LF&& lf, BF&& bf) {
    return {lf(path + "/scale", p.scale), lf(path + "/shift", p.shift),
            bf(path + "/running_mean", p.running_mean), bf(path + "/running_var", p.running_var)};
}

template <typename VTo, typename VFrom, typename LF, typename BF>
ConvBnT<VTo> tf_conv_bn(ConvBnT<VFrom>& p, const std::string& path, LF&& lf, BF&& bf) {
    return {lf(path + "/weight", p.weight), tf_bn<VTo>(p.bn, path + "/bn", lf, bf)};
}

template <typename VTo, typename VFrom, typename LF>
LayerNormT<VTo> tf_ln(LayerNormT<VFrom>& p, const std::string& path, LF&& lf) {
    return {lf(path + "/scale", p.scale), lf(path + "/shift", p.shift)};
}

template <typename VTo, typename VFrom, typename LF, typename BF>
IrbT<VTo> tf_irb(IrbT<VFrom>& p, const std::string& path, LF&& lf, BF&& bf) {
    IrbT<VTo> out;
    out.stride = p.stride;
    out.residual = p.residual;
    out.expand = tf_conv_bn<VTo>(p.expand, path + "/expand", lf, bf);
    out.dw = tf_conv_bn<VTo>(p.dw, path + "/dw", lf, bf);
    out.project = tf_conv_bn<VTo>(p.project, path + "/project", lf, bf);
    return out;
}

template <typename VTo, typename VFrom, typename LF, typename BF>
GigT<VTo> tf_gig(GigT<VFrom>& g, const std::string& path, LF&& lf, BF&& bf) {
    GigT<VTo> go;
    go.kernel = g.kernel;
    go.ratio = g.ratio;
    go.strip_weight = lf(path + "/strip/weight", g.strip_weight);
    go.strip_bn = tf_bn<VTo>(g.strip_bn, path + "/strip/bn", lf, bf);
    go.gate_h_weight = lf(path + "/gate_h/weight", g.gate_h_weight);
    go.gate_h_bias = lf(path + "/gate_h/bias", g.gate_h_bias);
    go.gate_w_weight = lf(path + "/gate_w/weight", g.gate_w_weight);
    go.gate_w_bias = lf(path + "/gate_w/bias", g.gate_w_bias);
    return go;
}

template <typename VTo, typename VFrom, typename LF, typename BF>
LsaeT<VTo> tf_lsae(LsaeT<VFrom>& l, const std::string& path, LF&& lf, BF&& bf) {
    LsaeT<VTo> lo;
    lo.win_h = l.win_h;
    lo.win_w = l.win_w;
    lo.head_dim = l.head_dim;
    lo.spatial_attention = l.spatial_attention;
    lo.norm = tf_ln<VTo>(l.norm, path + "/norm", lf);
    if (l.qk) lo.qk = tf_conv_bn<VTo>(*l.qk, path + "/qk", lf, bf);
    lo.v = tf_conv_bn<VTo>(l.v, path + "/v", lf, bf);
    return lo;
}

template <typename VTo, typename VFrom, typename LF>
AsaT<VTo> tf_asa(AsaT<VFrom>& a, const std::string& path, LF&& lf) {
    AsaT<VTo> ao;
    ao.gn_groups = a.gn_groups;
    ao.conv_h_weight = lf(path + "/conv_h/weight", a.conv_h_weight);
    ao.conv_h_bias = lf(path + "/conv_h/bias", a.conv_h_bias);
    ao.gn_h_scale = lf(path + "/gn_h/scale", a.gn_h_scale);
    ao.gn_h_shift = lf(path + "/gn_h/shift", a.gn_h_shift);
    ao.conv_w_weight = lf(path + "/conv_w/weight", a.conv_w_weight);
    ao.conv_w_bias = lf(path + "/conv_w/bias", a.conv_w_bias);
    ao.gn_w_scale = lf(path + "/gn_w/scale", a.gn_w_scale);
    ao.gn_w_shift = lf(path + "/gn_w/shift", a.gn_w_shift);
    return ao;
}

template <typename VTo, typename VFrom, typename LF, typename BF>
GpeBlockT<VTo> tf_gpe(GpeBlockT<VFrom>& p, const std::string& path, LF&& lf, BF&& bf) {
    GpeBlockT<VTo> out;
    out.ln1 = tf_ln<VTo>(p.ln1, path + "/ln1", lf);
    out.gpm.use_gig = p.gpm.use_gig;
    out.gpm.use_lsae = p.gpm.use_lsae;
    out.gpm.use_asa_cra = p.gpm.use_asa_cra;
    if (p.gpm.gig) out.gpm.gig = tf_gig<VTo>(*p.gpm.gig, path + "/gpm/gig", lf, bf);
    if (p.gpm.lsae) out.gpm.lsae = tf_lsae<VTo>(*p.gpm.lsae, path + "/gpm/lsae", lf, bf);
    if (p.gpm.asa) out.gpm.asa = tf_asa<VTo>(*p.gpm.asa, path + "/gpm/asa", lf);
    out.gpm.irb = tf_irb<VTo>(p.gpm.irb, path + "/gpm/irb", lf, bf);
    if (p.gpm.cra) out.gpm.cra = CraT<VTo>{lf(path + "/gpm/cra/kernel", p.gpm.cra->kernel)};
    out.ln2 = tf_ln<VTo>(p.ln2, path + "/ln2", lf);
    out.irb2 = tf_irb<VTo>(p.irb2, path + "/irb2", lf, bf);
    return out;
}

}  // namespace detail

template <typename VTo, typename VFrom, typename LF, typename BF>
HGpeModelT<VTo> transform_model(HGpeModelT<VFrom>& m, LF&& lf, BF&& bf) {
    HGpeModelT<VTo> out;
    out.cfg = m.cfg;
    out.stem.conv = detail::tf_conv_bn<VTo>(m.stem.conv, "stem/conv", lf, bf);
    out.stem.irb = detail::tf_irb<VTo>(m.stem.irb, "stem/irb", lf, bf);
    for (int s = 0; s < 4; ++s) {
        StageT<VFrom>& stage = m.stages[static_cast<size_t>(s)];
        StageT<VTo>& os = out.stages[static_cast<size_t>(s)];
        const std::string sp = "stage" + std::to_string(s + 1);
        if (stage.down) os.down = detail::tf_irb<VTo>(*stage.down, sp + "/down", lf, bf);
        for (size_t b = 0; b < stage.blocks.size(); ++b) {
            const std::string bp = sp + "/block" + std::to_string(b);
            BasicBlockT<VTo> blk;
            if (stage.blocks[b].gpe)
                blk.gpe = detail::tf_gpe<VTo>(*stage.blocks[b].gpe, bp + "/gpe", lf, bf);
            blk.irb = detail::tf_irb<VTo>(stage.blocks[b].irb, bp + "/irb", lf, bf);
            os.blocks.push_back(std::move(blk));
        }
    }
    out.head.weight = lf("head/weight", m.head.weight);
    out.head.bias = lf("head/bias", m.head.bias);
    return out;
}

// Lift onto a tape: parameters become named learnable leaves, batch-norm
// buffers are copied (and can be synced back after a training step).
inline HGpeModelT<ad::Var> lift_model(ad::Tape& tape, HGpeModel& m) {
    return transform_model<ad::Var>(
        m, [&](const std::string& name, Tensor& t) { return tape.leaf(t, name, true); },
        [](const std::string&, Tensor& t) { return t; });
}

// Copy batch-norm running statistics between structurally equal models.
template <typename VA, typename VB>
void copy_buffers(HGpeModelT<VA>& from, HGpeModelT<VB>& to) {
    std::vector<Tensor*> src, dst;
    visit_buffers(from, [&](const std::string&, auto& t) { src.push_back(&t); });
    visit_buffers(to, [&](const std::string&, auto& t) { dst.push_back(&t); });
    if (src.size() != dst.size()) fail("copy_buffers: structure mismatch");
    for (size_t i = 0; i < src.size(); ++i) *dst[i] = *src[i];
}

// Cast a model to the f32 inference dtype (or back).
template <typename To>
HGpeModelT<TensorT<To>> cast_model(HGpeModel& m) {
    return transform_model<TensorT<To>>(
        m, [](const std::string&, Tensor& t) { return cast<To>(t); },
        [](const std::string&, Tensor& t) { return cast<To>(t); });
}

}  // namespace hgpe
