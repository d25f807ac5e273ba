#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hgpe/model.hpp"

namespace hgpe {

// One counted layer. `macs` covers multiply-accumulates (convs, linears,
// attention matmuls); `elem_ops` counts 2 ops per element written by
// normalization / activation / pooling / elementwise stages and feeds the
// 2x FLOP convention only.
struct LayerRow {
    std::string path;
    int64_t params = 0;
    int64_t macs = 0;
    int64_t elem_ops = 0;
};

struct ComplexityReport {
    std::vector<LayerRow> rows;
    int input_h = 0, input_w = 0;  // analysis input size (single image)
    int64_t backbone_params = 0;
    int64_t head_params = 0;
    int64_t total_macs = 0;
    int64_t total_elem_ops = 0;

    int64_t total_params(bool include_head) const {
        return backbone_params + (include_head ? head_params : 0);
    }
    // FLOPs under the two reporting conventions.
    double flops_macs() const { return static_cast<double>(total_macs); }
    double flops_2x() const { return 2.0 * static_cast<double>(total_macs) + static_cast<double>(total_elem_ops); }
};

// Exact per-layer parameter and MAC accounting at the given input size.
ComplexityReport analyze(const HGpeModel& m, int input_h, int input_w);

// Spec surfaces over analyze().
ComplexityReport count_params(const HGpeModel& m);
ComplexityReport count_macs(const HGpeModel& m, int input_h, int input_w);

// Counted MACs of the GPM inside the first block of a stage (1-based index).
int64_t gpm_counted_macs(const ComplexityReport& report, int stage_index);

struct ClosedForm {
    int64_t params = 0;
    double flops = 0.0;
};

// Closed-form GPM estimate: params 2C^2 + C(3K^2 + 4K) + K and
// flops C^2(2 + 3L/2) + C(7K^2 L + 16KH + 9L/2) + Kd with L = H*W.
ClosedForm gpm_closed_form(int C, int K, int H, int W, int win, int d);

// Window MHSA reference: params 4(C+1)C, flops 8C^2 L + 4CLl + 3Ll.
ClosedForm wmhsa_closed_form(int C, int64_t L, int64_t l);

struct ShapeTraceRow {
    std::string path;
    std::vector<int64_t> in, out;
};

struct ShapeTrace {
    std::vector<ShapeTraceRow> rows;
};

// Block-level shape chain for a single image; throws on any inconsistency.
ShapeTrace shape_trace(const HGpeModel& m, int input_h, int input_w);

// Rendering.
std::string render_report(const ComplexityReport& report, bool include_head, bool per_layer);
std::string render_trace(const ShapeTrace& trace);
// Machine-readable dump: one "path params macs" line per layer.
void dump_report(const ComplexityReport& report, const std::string& path);

}  // namespace hgpe
