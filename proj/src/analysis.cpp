#include "hgpe/analysis.hpp"

#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace hgpe {

namespace {

struct Counter {
    ComplexityReport report;

    void row(const std::string& path, int64_t params, int64_t macs, int64_t elem) {
        report.rows.push_back({path, params, macs, elem});
    }

    // ConvBn: conv MACs at the output size plus the BN affine; `act` adds
    // one activation pass over the output.
    void conv_bn(const std::string& path, const ConvBnT<Tensor>& p, int64_t oh, int64_t ow,
                 bool act, int64_t extra_elem = 0) {
        const auto& w = p.weight.dims();  // [cout, cinpg, kh, kw]
        const int64_t cout = w[0];
        const int64_t macs = cout * oh * ow * w[1] * w[2] * w[3];
        const int64_t params = p.weight.numel() + 2 * cout;
        int64_t elem = 2 * cout * oh * ow;            // BN
        if (act) elem += 2 * cout * oh * ow;          // activation
        row(path, params, macs, elem + extra_elem);
    }

    void ln(const std::string& path, int64_t c, int64_t h, int64_t w) {
        row(path, 2 * c, 0, 2 * c * h * w);
    }
};

struct Spatial {
    int64_t h, w;
};

Spatial irb_count(Counter& ct, const std::string& path, const IrbT<Tensor>& p, int64_t h, int64_t w) {
    const int64_t hidden = p.dw.weight.dims()[0];
    ct.conv_bn(path + "/expand", p.expand, h, w, true);
    const int64_t oh = conv_out_size(h, 3, p.stride, 1);
    const int64_t ow = conv_out_size(w, 3, p.stride, 1);
    ct.conv_bn(path + "/dw", p.dw, oh, ow, true);
    const int64_t cout = p.project.weight.dims()[0];
    const int64_t res_elem = p.residual ? 2 * cout * oh * ow : 0;
    ct.conv_bn(path + "/project", p.project, oh, ow, false, res_elem);
    (void)hidden;
    return {oh, ow};
}

void gig_count(Counter& ct, const std::string& path, const GigT<Tensor>& p, int64_t c, int64_t h,
               int64_t w) {
    // strip pools over the input + fused-strip conv + BN + h-swish
    const int64_t strip_len = h + w;
    ct.row(path + "/strip", p.strip_weight.numel() + 2 * c, c * p.kernel * strip_len,
           2 * c * h * w * 2 /* two pools */ + 4 * c * strip_len /* BN + act */);
    ct.row(path + "/gate_h", p.gate_h_weight.numel() + c, c * 3 * h, 2 * c * h);
    ct.row(path + "/gate_w", p.gate_w_weight.numel() + c, c * 3 * w, 2 * c * w);
    ct.row(path + "/apply", 0, 0, 2 * 2 * c * h * w);  // two broadcast gates
}

void lsae_count(Counter& ct, const std::string& path, const LsaeT<Tensor>& p, int64_t c, int64_t h,
                int64_t w) {
    ct.ln(path + "/norm", c, h, w);
    if (!p.spatial_attention) {
        ct.conv_bn(path + "/v", p.v, h, w, false);
        return;
    }
    const int64_t hp = (h + p.win_h - 1) / p.win_h * p.win_h;
    const int64_t wp = (w + p.win_w - 1) / p.win_w * p.win_w;
    ct.conv_bn(path + "/qk", *p.qk, hp, wp, false);
    ct.conv_bn(path + "/v", p.v, hp, wp, false);
    const int64_t windows = (hp / p.win_h) * (wp / p.win_w);
    const int64_t l = static_cast<int64_t>(p.win_h) * p.win_w;
    const int64_t d = p.head_dim > 0 ? p.head_dim : c;
    const int64_t heads = c / d;
    // q k^T and attn v, plus the softmax over each attention matrix
    ct.row(path + "/attention", 0, windows * heads * 2 * l * l * d, 2 * windows * heads * l * l);
}

void asa_count(Counter& ct, const std::string& path, const AsaT<Tensor>& p, int64_t c, int64_t h,
               int64_t w) {
    ct.row(path + "/gate_h", p.conv_h_weight.numel() + c + 2 * c, c * 3 * h,
           2 * c * h * w /* pool */ + 4 * c * h /* GN + sigmoid */);
    ct.row(path + "/gate_w", p.conv_w_weight.numel() + c + 2 * c, c * 3 * w,
           2 * c * h * w + 4 * c * w);
    ct.row(path + "/apply", 0, 0, 2 * 2 * c * h * w);
}

void cra_count(Counter& ct, const std::string& path, const CraT<Tensor>& p, int64_t c, int64_t h,
               int64_t w) {
    ct.row(path, p.kernel.numel(), c * p.kernel.numel(),
           2 * c * h * w /* pool */ + 2 * c /* sigmoid */ + 2 * c * h * w /* gate */);
}

void gpe_count(Counter& ct, const std::string& path, const GpeBlockT<Tensor>& p, int64_t c,
               int64_t h, int64_t w) {
    const int64_t half = c / 2;
    ct.ln(path + "/ln1", c, h, w);
    if (p.gpm.gig) gig_count(ct, path + "/gpm/gig", *p.gpm.gig, c, h, w);
    if (p.gpm.lsae) lsae_count(ct, path + "/gpm/lsae", *p.gpm.lsae, half, h, w);
    if (p.gpm.asa) asa_count(ct, path + "/gpm/asa", *p.gpm.asa, half, h, w);
    irb_count(ct, path + "/gpm/irb", p.gpm.irb, h, w);
    if (p.gpm.cra) cra_count(ct, path + "/gpm/cra", *p.gpm.cra, half, h, w);
    ct.row(path + "/residual1", 0, 0, 2 * c * h * w);
    ct.ln(path + "/ln2", c, h, w);
    irb_count(ct, path + "/irb2", p.irb2, h, w);
    ct.row(path + "/residual2", 0, 0, 2 * c * h * w);
}

}  // namespace

ComplexityReport analyze(const HGpeModel& m, int input_h, int input_w) {
    Counter ct;
    ct.report.input_h = input_h;
    ct.report.input_w = input_w;

    int64_t h = conv_out_size(input_h, 3, 2, 1);
    int64_t w = conv_out_size(input_w, 3, 2, 1);
    ct.conv_bn("stem/conv", m.stem.conv, h, w, true);
    Spatial sp = irb_count(ct, "stem/irb", m.stem.irb, h, w);

    for (int s = 0; s < 4; ++s) {
        const auto& stage = m.stages[static_cast<size_t>(s)];
        const std::string spfx = "stage" + std::to_string(s + 1);
        if (stage.down) sp = irb_count(ct, spfx + "/down", *stage.down, sp.h, sp.w);
        const int64_t c = m.cfg.out_channels[static_cast<size_t>(s)];
        for (size_t b = 0; b < stage.blocks.size(); ++b) {
            const std::string bp = spfx + "/block" + std::to_string(b);
            if (stage.blocks[b].gpe) gpe_count(ct, bp + "/gpe", *stage.blocks[b].gpe, c, sp.h, sp.w);
            sp = irb_count(ct, bp + "/irb", stage.blocks[b].irb, sp.h, sp.w);
        }
    }

    const int64_t c4 = m.cfg.out_channels[3];
    ct.row("head/pool", 0, 0, 2 * c4 * sp.h * sp.w);
    ct.row("head/linear", m.head.weight.numel() + m.head.bias.numel(),
           m.head.weight.numel(), 2 * m.cfg.num_classes);

    ComplexityReport& r = ct.report;
    for (const auto& row : r.rows) {
        if (row.path.rfind("head/", 0) == 0) r.head_params += row.params;
        else r.backbone_params += row.params;
        r.total_macs += row.macs;
        r.total_elem_ops += row.elem_ops;
    }
    return r;
}

ComplexityReport count_params(const HGpeModel& m) { return analyze(m, m.cfg.input_h, m.cfg.input_w); }

ComplexityReport count_macs(const HGpeModel& m, int input_h, int input_w) {
    return analyze(m, input_h, input_w);
}

int64_t gpm_counted_macs(const ComplexityReport& report, int stage_index) {
    const std::string prefix = "stage" + std::to_string(stage_index) + "/block0/gpe/gpm/";
    int64_t macs = 0;
    for (const auto& row : report.rows)
        if (row.path.rfind(prefix, 0) == 0) macs += row.macs;
    return macs;
}

ClosedForm gpm_closed_form(int C, int K, int H, int W, int win, int d) {
    (void)win;  // the printed expression does not reference the window size
    ClosedForm cf;
    const int64_t c = C, k = K;
    cf.params = 2 * c * c + c * (3 * k * k + 4 * k) + k;
    const double L = static_cast<double>(H) * static_cast<double>(W);
    cf.flops = static_cast<double>(c) * c * (2.0 + 1.5 * L) +
               static_cast<double>(c) * (7.0 * k * k * L + 16.0 * k * H + 4.5 * L) +
               static_cast<double>(k) * d;
    return cf;
}

ClosedForm wmhsa_closed_form(int C, int64_t L, int64_t l) {
    ClosedForm cf;
    cf.params = 4 * (static_cast<int64_t>(C) + 1) * C;
    cf.flops = 8.0 * static_cast<double>(C) * C * static_cast<double>(L) +
               4.0 * static_cast<double>(C) * static_cast<double>(L) * static_cast<double>(l) +
               3.0 * static_cast<double>(L) * static_cast<double>(l);
    return cf;
}

ShapeTrace shape_trace(const HGpeModel& m, int input_h, int input_w) {
    ShapeTrace trace;
    std::vector<int64_t> cur = {1, 3, input_h, input_w};
    auto step = [&](const std::string& path, std::vector<int64_t> out) {
        if (!trace.rows.empty() && trace.rows.back().out != cur)
            throw std::runtime_error("shape_trace: chain break at " + path + ": previous " +
                                     dims_str(trace.rows.back().out) + " vs " + dims_str(cur));
        trace.rows.push_back({path, cur, out});
        cur = std::move(out);
    };

    const auto& cfg = m.cfg;
    int64_t h = conv_out_size(input_h, 3, 2, 1), w = conv_out_size(input_w, 3, 2, 1);
    step("stem/conv", {1, cfg.out_channels[0], h, w});
    step("stem/irb", {1, cfg.out_channels[0], h, w});
    for (int s = 0; s < 4; ++s) {
        const auto& stage = m.stages[static_cast<size_t>(s)];
        const std::string sp = "stage" + std::to_string(s + 1);
        const int64_t c = cfg.out_channels[static_cast<size_t>(s)];
        if (stage.down) {
            h = conv_out_size(h, 3, 2, 1);
            w = conv_out_size(w, 3, 2, 1);
            step(sp + "/down", {1, c, h, w});
        }
        for (size_t b = 0; b < stage.blocks.size(); ++b) {
            const std::string bp = sp + "/block" + std::to_string(b);
            if (stage.blocks[b].gpe) step(bp + "/gpe", {1, c, h, w});
            step(bp + "/irb", {1, c, h, w});
        }
    }
    step("head/pool", {1, cfg.out_channels[3]});
    step("head/linear", {1, cfg.num_classes});
    return trace;
}

namespace {

std::string format_m(int64_t v) {
    std::ostringstream ss;
    ss << std::fixed << std::setprecision(3) << static_cast<double>(v) / 1e6;
    return ss.str();
}

std::string format_g(double v) {
    std::ostringstream ss;
    ss << std::fixed << std::setprecision(3) << v / 1e9;
    return ss.str();
}

}  // namespace

std::string render_report(const ComplexityReport& report, bool include_head, bool per_layer) {
    std::ostringstream ss;
    if (per_layer) {
        size_t width = 24;
        for (const auto& row : report.rows) width = std::max(width, row.path.size() + 2);
        ss << std::left << std::setw(static_cast<int>(width)) << "layer" << std::right
           << std::setw(14) << "params" << std::setw(16) << "macs" << "\n";
        for (const auto& row : report.rows)
            ss << std::left << std::setw(static_cast<int>(width)) << row.path << std::right
               << std::setw(14) << row.params << std::setw(16) << row.macs << "\n";
        ss << "\n";
    }
    // per-stage totals
    const char* groups[6] = {"stem/", "stage1/", "stage2/", "stage3/", "stage4/", "head/"};
    ss << std::left << std::setw(10) << "section" << std::right << std::setw(14) << "params"
       << std::setw(16) << "macs" << "\n";
    for (const char* g : groups) {
        int64_t params = 0, macs = 0;
        for (const auto& row : report.rows)
            if (row.path.rfind(g, 0) == 0) {
                params += row.params;
                macs += row.macs;
            }
        ss << std::left << std::setw(10) << std::string(g, strlen(g) - 1) << std::right
           << std::setw(14) << params << std::setw(16) << macs << "\n";
    }
    ss << "\n";
    ss << "input size          : " << report.input_h << "x" << report.input_w << "\n";
    ss << "params (backbone)   : " << report.backbone_params << "  (" << format_m(report.backbone_params)
       << " M)\n";
    ss << "params (with head)  : " << report.total_params(true) << "  ("
       << format_m(report.total_params(true)) << " M)\n";
    ss << "macs                : " << report.total_macs << "  (" << format_g(report.flops_macs())
       << " G, convention MACS)\n";
    ss << "flops (2x + elem)   : " << format_g(report.flops_2x()) << " G  (convention 2X_MACS)\n";
    if (!include_head) ss << "head excluded from the backbone total above\n";
    return ss.str();
}

std::string render_trace(const ShapeTrace& trace) {
    std::ostringstream ss;
    size_t width = 24;
    for (const auto& row : trace.rows) width = std::max(width, row.path.size() + 2);
    for (const auto& row : trace.rows)
        ss << std::left << std::setw(static_cast<int>(width)) << row.path << dims_str(row.in)
           << " -> " << dims_str(row.out) << "\n";
    return ss.str();
}

void dump_report(const ComplexityReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("dump_report: cannot write " + path);
    for (const auto& row : report.rows)
        out << row.path << " " << row.params << " " << row.macs << "\n";
}

}  // namespace hgpe
