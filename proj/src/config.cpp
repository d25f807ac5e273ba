#include "hgpe/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace hgpe {

using nlohmann::ordered_json;

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::S: return "S";
        case Variant::T: return "T";
        case Variant::N: return "N";
        case Variant::Custom: return "custom";
    }
    return "custom";
}

Variant variant_from_name(const std::string& name) {
    if (name == "S") return Variant::S;
    if (name == "T") return Variant::T;
    if (name == "N") return Variant::N;
    if (name == "custom") return Variant::Custom;
    throw std::invalid_argument("unknown variant '" + name + "' (expected S, T, N or custom)");
}

ModelConfig ModelConfig::preset(Variant v) {
    ModelConfig cfg;
    cfg.variant = v;
    cfg.stack_count = {3, 2, 4, 3};
    cfg.window_sizes = {0, 14, 14, 7};
    cfg.gig_kernel = 7;
    cfg.num_classes = 1000;
    cfg.input_h = cfg.input_w = 224;
    switch (v) {
        case Variant::S:
            cfg.out_channels = {64, 128, 192, 256};
            cfg.irb_expansion = 6;
            break;
        case Variant::T:
            cfg.out_channels = {64, 96, 128, 160};
            cfg.irb_expansion = 2;
            break;
        case Variant::N:
            cfg.out_channels = {48, 64, 80, 112};
            cfg.irb_expansion = 2;
            break;
        case Variant::Custom: break;
    }
    return cfg;
}

ModelConfig ModelConfig::micro() {
    ModelConfig cfg;
    cfg.variant = Variant::Custom;
    cfg.stack_count = {1, 1, 1, 1};
    cfg.out_channels = {8, 12, 16, 20};
    cfg.irb_expansion = 2;
    cfg.window_sizes = {0, 4, 4, 2};
    cfg.gig_kernel = 7;
    cfg.num_classes = 2;
    cfg.input_h = cfg.input_w = 32;
    return cfg;
}

void ModelConfig::validate() const {
    for (int i = 0; i < 4; ++i) {
        if (stack_count[i] < 1)
            throw std::invalid_argument("config: stack_count[" + std::to_string(i) +
                                        "] must be >= 1");
        if (out_channels[i] < 1)
            throw std::invalid_argument("config: out_channels[" + std::to_string(i) +
                                        "] must be >= 1");
        if (window_sizes[i] < 0)
            throw std::invalid_argument("config: window_sizes[" + std::to_string(i) +
                                        "] must be >= 0");
        if (window_sizes[i] > 0 && out_channels[i] % 2 != 0)
            throw std::invalid_argument("config: out_channels[" + std::to_string(i) +
                                        "] must be even in stages with GPE-Blocks");
    }
    if (irb_expansion < 1) throw std::invalid_argument("config: irb_expansion must be >= 1");
    if (gig_kernel < 1 || gig_kernel % 2 == 0)
        throw std::invalid_argument("config: gig_kernel must be odd and >= 1");
    if (num_classes < 2) throw std::invalid_argument("config: num_classes must be >= 2");
    if (input_h < 32 || input_w < 32)
        throw std::invalid_argument("config: input size must be >= 32");
    if (lsae_head_dim < 0) throw std::invalid_argument("config: lsae_head_dim must be >= 0");
    if (lsae_head_dim > 0) {
        for (int i = 0; i < 4; ++i) {
            if (window_sizes[i] > 0 && (out_channels[i] / 2) % lsae_head_dim != 0)
                throw std::invalid_argument(
                    "config: lsae_head_dim must divide the branch width of stage " +
                    std::to_string(i + 1));
        }
    }
}

int stage_window_size(int stage_index, const ModelConfig& cfg) {
    if (stage_index < 2 || stage_index > 4)
        throw std::invalid_argument(
            "stage_window_size: only stages 2..4 carry GPE-Blocks, got stage " +
            std::to_string(stage_index));
    return cfg.window_sizes[static_cast<size_t>(stage_index - 1)];
}

std::string serialize_config(const ModelConfig& cfg) {
    ordered_json j;
    j["variant"] = variant_name(cfg.variant);
    j["stack_count"] = cfg.stack_count;
    j["out_channels"] = cfg.out_channels;
    j["irb_expansion"] = cfg.irb_expansion;
    j["window_sizes"] = cfg.window_sizes;
    j["gig_kernel"] = cfg.gig_kernel;
    j["num_classes"] = cfg.num_classes;
    j["input_size"] = std::array<int, 2>{cfg.input_h, cfg.input_w};
    j["use_gig"] = cfg.use_gig;
    j["use_lsae"] = cfg.use_lsae;
    j["use_asa_cra"] = cfg.use_asa_cra;
    j["lsae_head_dim"] = cfg.lsae_head_dim;
    return j.dump(2) + "\n";
}

namespace {

template <typename T>
void read_key(const ordered_json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

ModelConfig parse_config(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const std::exception& e) {
        throw std::invalid_argument(std::string("config: parse error: ") + e.what());
    }
    if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");

    static const std::set<std::string> known = {
        "variant",     "stack_count", "out_channels", "irb_expansion", "window_sizes",
        "gig_kernel",  "num_classes", "input_size",   "use_gig",       "use_lsae",
        "use_asa_cra", "lsae_head_dim"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key()))
            throw std::invalid_argument("config: unknown key '" + it.key() + "'");

    ModelConfig cfg;
    if (j.contains("variant")) cfg = ModelConfig::preset(variant_from_name(j.at("variant").get<std::string>()));
    read_key(j, "stack_count", cfg.stack_count);
    read_key(j, "out_channels", cfg.out_channels);
    read_key(j, "irb_expansion", cfg.irb_expansion);
    read_key(j, "window_sizes", cfg.window_sizes);
    read_key(j, "gig_kernel", cfg.gig_kernel);
    read_key(j, "num_classes", cfg.num_classes);
    if (j.contains("input_size")) {
        auto v = j.at("input_size").get<std::array<int, 2>>();
        cfg.input_h = v[0];
        cfg.input_w = v[1];
    }
    read_key(j, "use_gig", cfg.use_gig);
    read_key(j, "use_lsae", cfg.use_lsae);
    read_key(j, "use_asa_cra", cfg.use_asa_cra);
    read_key(j, "lsae_head_dim", cfg.lsae_head_dim);
    cfg.validate();
    return cfg;
}

ModelConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

void save_config(const std::string& path, const ModelConfig& cfg) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("config: cannot write " + path);
    out << serialize_config(cfg);
}

}  // namespace hgpe
