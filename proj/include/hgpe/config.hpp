#pragma once

#include <array>
#include <string>

namespace hgpe {

enum class Variant { S, T, N, Custom };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

// Hyperparameters of one backbone instance. Stage 1 stacks plain IRBs; in
// stages 2-4 each stacked basic block is a GPE-Block followed by an IRB.
// window_sizes[i] == 0 drops the GPE-Block from that stage entirely.
struct ModelConfig {
    Variant variant = Variant::Custom;
    std::array<int, 4> stack_count{3, 2, 4, 3};
    std::array<int, 4> out_channels{64, 128, 192, 256};
    int irb_expansion = 2;
    std::array<int, 4> window_sizes{0, 14, 14, 7};
    int gig_kernel = 7;
    int num_classes = 1000;
    int input_h = 224, input_w = 224;
    bool use_gig = true, use_lsae = true, use_asa_cra = true;
    int lsae_head_dim = 0;  // 0 = full branch width (single head)

    static ModelConfig preset(Variant v);
    static ModelConfig micro();  // desk-scale config used by the toy trainer

    // Throws std::invalid_argument describing the first violated constraint.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

// Window size used by a given stage (stage_index in 1..4); presets assign
// 14 to stages 2-3 and 7 to stage 4, configs may override.
int stage_window_size(int stage_index, const ModelConfig& cfg);

// Human-readable nested key/value serialization. Parsing rejects unknown
// keys, naming the offending key.
std::string serialize_config(const ModelConfig& cfg);
ModelConfig parse_config(const std::string& text);
ModelConfig load_config(const std::string& path);
void save_config(const std::string& path, const ModelConfig& cfg);

}  // namespace hgpe
