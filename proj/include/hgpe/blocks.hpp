#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "hgpe/autodiff.hpp"
#include "hgpe/ops.hpp"
#include "hgpe/tensor.hpp"

// The network's atomic blocks. Every forward here is written once as a
// template over the value type V and runs unchanged on plain tensors
// (f64 or f32) or on tape variables for differentiation.

namespace hgpe {

enum class Mode { Train, Infer };

inline constexpr double kNormEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;

// Adaptive 1-D kernel size for channel attention: ceil(log2 C) + 1,
// rounded up to odd, never below 3.
inline int cra_kernel_size(int channels) {
    int k = channels > 1
                ? static_cast<int>(std::ceil(std::log2(static_cast<double>(channels)))) + 1
                : 1;
    if (k % 2 == 0) ++k;
    return std::max(k, 3);
}

template <typename V>
struct BatchNormT {
    V scale, shift;                               // [C]
    tensor_of_t<V> running_mean, running_var;     // [C] buffers
};

template <typename V>
struct LayerNormT {
    V scale, shift;  // [C]
};

// Convolution followed by batch norm (convs ahead of a BN carry no bias).
template <typename V>
struct ConvBnT {
    V weight;
    BatchNormT<V> bn;
};

template <typename V>
V conv_bn(const V& x, ConvBnT<V>& p, Mode mode, int stride, int pad, int groups) {
    V y = conv2d(x, p.weight, stride, pad, groups);
    return batch_norm(y, p.bn.scale, p.bn.shift, p.bn.running_mean, p.bn.running_var,
                      mode == Mode::Train, kBnMomentum, kNormEps);
}

// ---------------------------------------------------------------------------
// GIG: strip-pool both axes, fuse the two strips with a single depthwise
// conv of kernel K along the concatenated strip, then gate the input with
// per-axis sigmoid gates from depthwise kernel-3 convs.
// ---------------------------------------------------------------------------

template <typename V>
struct GigT {
    int kernel = 7;   // K of the fused-strip conv
    int ratio = 8;    // recorded reduction ratio; the strip stage stays at C channels
    V strip_weight;   // [C,1,K,1]
    BatchNormT<V> strip_bn;
    V gate_h_weight, gate_h_bias;  // [C,1,3,1], [C]
    V gate_w_weight, gate_w_bias;  // [C,1,1,3], [C]
};

template <typename V>
V gig_forward(const V& x, GigT<V>& p, Mode mode) {
    const int64_t c = x.dims()[1], h = x.dims()[2], w = x.dims()[3];
    V sh = strip_pool(x, StripAxis::Height);                       // [N,C,H,1]
    V sw = strip_pool(x, StripAxis::Width);                        // [N,C,1,W]
    V swt = reshape(sw, {x.dims()[0], c, w, 1});                   // transpose the width strip
    std::vector<V> strips = {sh, swt};
    V y = concat_axis(strips, 2);                                  // [N,C,H+W,1]
    y = conv2d(y, p.strip_weight, static_cast<const V*>(nullptr), 1, 1, p.kernel / 2, 0,
               static_cast<int>(c));
    y = batch_norm(y, p.strip_bn.scale, p.strip_bn.shift, p.strip_bn.running_mean,
                   p.strip_bn.running_var, mode == Mode::Train, kBnMomentum, kNormEps);
    y = activation(y, Act::HSwish);
    auto gates = split_axis(y, {h, w}, 2);
    V gh = conv2d(gates[0], p.gate_h_weight, &p.gate_h_bias, 1, 1, 1, 0, static_cast<int>(c));
    gh = activation(gh, Act::Sigmoid);                             // [N,C,H,1]
    V gw = reshape(gates[1], {x.dims()[0], c, 1, w});
    gw = conv2d(gw, p.gate_w_weight, &p.gate_w_bias, 1, 1, 0, 1, static_cast<int>(c));
    gw = activation(gw, Act::Sigmoid);                             // [N,C,1,W]
    return mul_bcast(mul_bcast(x, gh), gw);
}

// ---------------------------------------------------------------------------
// LSAE: layer norm, window partition, 1x1+BN projections to q/k (2C) and
// v (C), scaled dot-product attention over the tokens of each window, merge.
// With spatial attention disabled the block reduces to the projection conv.
// ---------------------------------------------------------------------------

template <typename V>
struct LsaeT {
    int win_h = 7, win_w = 7;
    int head_dim = 0;  // 0 = full width (single head); otherwise must divide C
    bool spatial_attention = true;
    LayerNormT<V> norm;
    std::optional<ConvBnT<V>> qk;  // absent when spatial attention is disabled
    ConvBnT<V> v;
};

template <typename V>
V lsae_forward(const V& x, LsaeT<V>& p, Mode mode) {
    const int64_t c = x.dims()[1];
    V y = layer_norm(x, p.norm.scale, p.norm.shift, kNormEps);
    if (!p.spatial_attention) return conv_bn(y, p.v, mode, 1, 0, 1);

    auto [win, rec] = window_partition(y, p.win_h, p.win_w);
    V qk = conv_bn(win, *p.qk, mode, 1, 0, 1);  // [B', 2C, wh, ww]
    auto qk_parts = split_channels(qk, {c, c});
    V v = conv_bn(win, p.v, mode, 1, 0, 1);

    const int64_t d = p.head_dim > 0 ? p.head_dim : c;
    const int heads = static_cast<int>(c / d);
    V qt = split_heads(nchw_to_tokens(qk_parts[0]), heads);  // [B'*h, l, d]
    V kt = split_heads(nchw_to_tokens(qk_parts[1]), heads);
    V vt = split_heads(nchw_to_tokens(v), heads);

    V attn = matmul_batched(qt, transpose_last2(kt));
    attn = softmax_lastdim(scale_by(attn, 1.0 / std::sqrt(static_cast<double>(d))));
    V out = merge_heads(matmul_batched(attn, vt), heads);     // [B', l, C]
    out = tokens_to_nchw(out, p.win_h, p.win_w);
    return window_merge(out, rec);
}

// ---------------------------------------------------------------------------
// ASA: per-axis means, depthwise kernel-3 1-D convs, group norm, sigmoid;
// the two axial gates modulate the input map.
// ---------------------------------------------------------------------------

template <typename V>
struct AsaT {
    int gn_groups = 16;            // largest divisor of C, at most 16
    V conv_h_weight, conv_h_bias;  // [C,1,3,1], [C]
    V conv_w_weight, conv_w_bias;  // [C,1,1,3], [C]
    V gn_h_scale, gn_h_shift;      // [C]
    V gn_w_scale, gn_w_shift;
};

template <typename V>
V asa_forward(const V& x, AsaT<V>& p) {
    const int64_t c = x.dims()[1];
    V mh = strip_pool(x, StripAxis::Height);  // [N,C,H,1]
    V gh = conv2d(mh, p.conv_h_weight, &p.conv_h_bias, 1, 1, 1, 0, static_cast<int>(c));
    gh = group_norm(gh, p.gn_h_scale, p.gn_h_shift, p.gn_groups, kNormEps);
    gh = activation(gh, Act::Sigmoid);
    V mw = strip_pool(x, StripAxis::Width);   // [N,C,1,W]
    V gw = conv2d(mw, p.conv_w_weight, &p.conv_w_bias, 1, 1, 0, 1, static_cast<int>(c));
    gw = group_norm(gw, p.gn_w_scale, p.gn_w_shift, p.gn_groups, kNormEps);
    gw = activation(gw, Act::Sigmoid);
    return mul_bcast(mul_bcast(x, gh), gw);
}

// ---------------------------------------------------------------------------
// CRA: ECA-lineage channel gate with the enlarged adaptive kernel.
// ---------------------------------------------------------------------------

template <typename V>
struct CraT {
    V kernel;  // [k_cra(C)]
};

template <typename V>
V cra_forward(const V& x, const CraT<V>& p) {
    V gate = activation(conv_channels1d(pool_global_avg(x), p.kernel), Act::Sigmoid);
    return mul_bcast(x, gate);
}

// ---------------------------------------------------------------------------
// IRB: 1x1 expand + BN + h-swish, 3x3 depthwise + BN + h-swish, 1x1 project
// + BN; skip connection when shape-preserving.
// ---------------------------------------------------------------------------

template <typename V>
struct IrbT {
    int stride = 1;
    bool residual = true;  // stride == 1 && in == out
    ConvBnT<V> expand;     // 1x1, Cin -> Cin*t
    ConvBnT<V> dw;         // 3x3 depthwise, pad 1
    ConvBnT<V> project;    // 1x1, -> Cout
};

template <typename V>
V irb_forward(const V& x, IrbT<V>& p, Mode mode) {
    const int hidden = static_cast<int>(p.dw.weight.dims()[0]);
    V y = activation(conv_bn(x, p.expand, mode, 1, 0, 1), Act::HSwish);
    y = activation(conv_bn(y, p.dw, mode, p.stride, 1, hidden), Act::HSwish);
    y = conv_bn(y, p.project, mode, 1, 0, 1);
    return p.residual ? add(x, y) : y;
}

// ---------------------------------------------------------------------------
// GPM: global prior, channel split, parallel LSAE(+ASA) and IRB(+CRA)
// branches, concat. Ablation flags drop blocks to identity.
// ---------------------------------------------------------------------------

template <typename V>
struct GpmT {
    bool use_gig = true, use_lsae = true, use_asa_cra = true;
    std::optional<GigT<V>> gig;
    std::optional<LsaeT<V>> lsae;
    std::optional<AsaT<V>> asa;
    IrbT<V> irb;
    std::optional<CraT<V>> cra;
};

template <typename V>
V gpm_forward(const V& x, GpmT<V>& p, Mode mode) {
    const int64_t c = x.dims()[1];
    V y = p.use_gig ? gig_forward(x, *p.gig, mode) : x;
    auto halves = split_channels(y, {c / 2, c / 2});
    V b0 = halves[0];
    if (p.use_lsae) {
        b0 = lsae_forward(b0, *p.lsae, mode);
        if (p.use_asa_cra) b0 = asa_forward(b0, *p.asa);
    }
    V b1 = irb_forward(halves[1], p.irb, mode);
    if (p.use_asa_cra) b1 = cra_forward(b1, *p.cra);
    std::vector<V> branches = {b0, b1};
    return concat_channels(branches);
}

// ---------------------------------------------------------------------------
// GPE-Block: pre-norm dual residual, GPM then IRB.
// ---------------------------------------------------------------------------

template <typename V>
struct GpeBlockT {
    LayerNormT<V> ln1, ln2;
    GpmT<V> gpm;
    IrbT<V> irb2;
};

template <typename V>
V gpe_block_forward(const V& x, GpeBlockT<V>& p, Mode mode) {
    V y = add(x, gpm_forward(layer_norm(x, p.ln1.scale, p.ln1.shift, kNormEps), p.gpm, mode));
    return add(y, irb_forward(layer_norm(y, p.ln2.scale, p.ln2.shift, kNormEps), p.irb2, mode));
}

}  // namespace hgpe
