#include <chrono>
#include <cmath>
#include <iostream>

#include <CLI11.hpp>

#include "hgpe/analysis.hpp"
#include "hgpe/gradcheck.hpp"
#include "hgpe/image.hpp"
#include "hgpe/model.hpp"
#include "hgpe/serialize.hpp"
#include "hgpe/train.hpp"

namespace {

using namespace hgpe;

// Published reference totals (params M / flops G) for the preset variants.
struct Reference {
    double params_m, flops_g;
};

bool reference_for(Variant v, Reference& out) {
    switch (v) {
        case Variant::S: out = {5.6, 1.4}; return true;
        case Variant::T: out = {2.3, 0.5}; return true;
        case Variant::N: out = {1.2, 0.3}; return true;
        default: return false;
    }
}

ModelConfig resolve_config(const std::string& variant, const std::string& config_path) {
    if (!config_path.empty()) return load_config(config_path);
    if (variant.empty())
        throw std::runtime_error("pass --variant S|T|N|micro or --config <path>");
    if (variant == "micro") return ModelConfig::micro();
    return ModelConfig::preset(variant_from_name(variant));
}

int cmd_summarize(const std::string& variant, const std::string& config_path, int input_size,
                  bool include_head, bool per_layer, const std::string& dump_path) {
    ModelConfig cfg = resolve_config(variant, config_path);
    const int size = input_size > 0 ? input_size : cfg.input_h;
    HGpeModel model = build_model(cfg, 1);
    ComplexityReport report = analyze(model, size, size);
    std::cout << "H-GPE-" << variant_name(cfg.variant) << " summary\n";
    std::cout << render_report(report, include_head, per_layer);
    Reference ref;
    if (reference_for(cfg.variant, ref)) {
        std::cout << "reference (published): " << ref.params_m << " M params / " << ref.flops_g
                  << " G flops\n";
        const double params_m = static_cast<double>(report.backbone_params) / 1e6;
        const double macs_g = report.flops_macs() / 1e9;
        const double twox_g = report.flops_2x() / 1e9;
        const bool macs_closer = std::fabs(macs_g - ref.flops_g) <= std::fabs(twox_g - ref.flops_g);
        std::cout << "delta vs reference   : params " << std::showpos
                  << (params_m / ref.params_m - 1.0) * 100.0 << "%" << std::noshowpos
                  << ", flops (closer convention " << (macs_closer ? "MACS" : "2X_MACS") << ") "
                  << std::showpos
                  << ((macs_closer ? macs_g : twox_g) / ref.flops_g - 1.0) * 100.0 << "%"
                  << std::noshowpos << "\n";
    }
    if (!dump_path.empty()) {
        dump_report(report, dump_path);
        std::cout << "per-layer dump written to " << dump_path << "\n";
    }
    return 0;
}

int cmd_trace(const std::string& variant, const std::string& config_path, int input_size) {
    ModelConfig cfg = resolve_config(variant, config_path);
    const int size = input_size > 0 ? input_size : cfg.input_h;
    HGpeModel model = build_model(cfg, 1);
    std::cout << render_trace(shape_trace(model, size, size));
    return 0;
}

int cmd_gradcheck(uint64_t seed, double eps, double tolerance, const std::string& ops_csv,
                  bool negative_control, bool with_model) {
    GradCheckOptions opt;
    opt.seed = seed;
    opt.eps = eps;
    opt.tol_override = tolerance;
    opt.include_negative_control = negative_control;
    if (!ops_csv.empty()) {
        std::string item;
        for (char ch : ops_csv) {
            if (ch == ',') {
                if (!item.empty()) opt.only.push_back(item);
                item.clear();
            } else {
                item.push_back(ch);
            }
        }
        if (!item.empty()) opt.only.push_back(item);
    }

    std::vector<GradCheckResult> results = run_gradcheck(opt);
    if (with_model && opt.only.empty())
        results.push_back(grad_check_model(seed, eps, tolerance > 0 ? tolerance : 1e-5));

    bool all_pass = true;
    std::vector<std::string> failing;
    for (const auto& r : results) {
        std::printf("%-28s max_rel_err %.3e  tol %.0e  %s\n", r.op.c_str(), r.max_rel_err, r.tol,
                    r.pass ? "pass" : "FAIL");
        if (!r.pass) {
            all_pass = false;
            failing.push_back(r.op);
        }
    }
    if (!all_pass) {
        std::cerr << "gradcheck failed for:";
        for (const auto& f : failing) std::cerr << " " << f;
        std::cerr << "\n";
        return 1;
    }
    return 0;
}

int cmd_train_toy(int steps, double lr, uint64_t seed, int batch, const std::string& metrics_path,
                  const std::string& weights_path) {
    TrainToyOptions opt;
    opt.steps = steps;
    opt.lr = lr;
    opt.seed = seed;
    opt.batch = batch;
    HGpeModel model;
    TrainLog log;
    try {
        log = train_toy(ModelConfig::micro(), opt, &model);
    } catch (const std::exception& e) {
        std::cerr << "train-toy: " << e.what() << "\n";
        return 1;
    }
    if (!metrics_path.empty()) {
        write_metrics(log, metrics_path);
    } else {
        for (const auto& s : log.steps)
            std::cout << s.step << " " << s.loss << " " << s.accuracy << "\n";
    }
    if (!weights_path.empty()) {
        ParamStore store = build_param_store(model);
        save_weights(weights_path, store);
        std::cout << "weights written to " << weights_path << "\n";
    }
    std::printf("final train accuracy: %.4f\n", log.final_train_accuracy);
    return 0;
}

template <typename T>
std::vector<std::pair<int, double>> top_k(const TensorT<T>& logits, int k) {
    std::vector<std::pair<int, double>> scored;
    for (int64_t i = 0; i < logits.numel(); ++i)
        scored.emplace_back(static_cast<int>(i), static_cast<double>(logits[i]));
    std::sort(scored.begin(), scored.end(),
              [](const auto& a, const auto& b) { return a.second > b.second; });
    if (static_cast<int>(scored.size()) > k) scored.resize(static_cast<size_t>(k));
    return scored;
}

int cmd_infer(const std::string& weights_path, const std::string& image_path,
              const std::string& variant, const std::string& config_path, bool f64) {
    ModelConfig cfg = resolve_config(variant, config_path);
    HGpeModel model = build_model(cfg, 1);
    ParamStore store = build_param_store(model);
    load_weights(weights_path, store);

    Tensor img = load_ppm(image_path);
    img = resize_nearest(img, cfg.input_h, cfg.input_w);
    Tensor input = normalize_image(img);

    std::vector<std::pair<int, double>> top;
    if (f64) {
        Tensor logits = model_forward(model, input, Mode::Infer);
        top = top_k(logits, 5);
    } else {
        HGpeModelF fmodel = cast_model<float>(model);
        TensorF finput = cast<float>(input);
        TensorF logits = model_forward(fmodel, finput, Mode::Infer);
        top = top_k(logits, 5);
    }
    std::cout << "top-" << top.size() << " (" << (f64 ? "f64" : "f32") << "):\n";
    for (const auto& [idx, score] : top)
        std::printf("  class %-6d score %.6f\n", idx, score);
    return 0;
}

int cmd_bench(const std::string& variant, const std::string& config_path, int input_size,
              int repeats) {
    ModelConfig cfg = resolve_config(variant, config_path);
    const int size = input_size > 0 ? input_size : cfg.input_h;
    HGpeModel model = build_model(cfg, 1);
    ComplexityReport report = analyze(model, size, size);
    std::printf("bench %s @ %dx%d: %lld macs (%.3f G)\n", variant_name(cfg.variant).c_str(), size,
                size, static_cast<long long>(report.total_macs), report.flops_macs() / 1e9);

    HGpeModelF fmodel = cast_model<float>(model);
    Rng rng(7);
    Tensor img({1, 3, size, size});
    rng.fill_uniform(img, -1.0, 1.0);
    TensorF input = cast<float>(img);

    runtime_checks() = false;  // timing runs skip the per-op finite scans
    std::vector<double> times;
    for (int i = 0; i < repeats; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        TensorF logits = model_forward(fmodel, input, Mode::Infer);
        const auto t1 = std::chrono::steady_clock::now();
        (void)logits;
        times.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    runtime_checks() = true;
    double mean = 0.0;
    for (double t : times) mean += t;
    mean /= static_cast<double>(times.size());
    double var = 0.0;
    for (double t : times) var += (t - mean) * (t - mean);
    const double stddev = times.size() > 1 ? std::sqrt(var / static_cast<double>(times.size())) : 0.0;
    std::printf("%d run(s): mean %.3f s, stddev %.3f s\n", repeats, mean, stddev);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"H-GPE lightweight vision backbone toolkit"};
    app.require_subcommand(1);

    std::string variant, config_path, dump_path, metrics_path, weights_path, image_path, ops_csv;
    int input_size = 0, steps = 300, batch = 32, repeats = 10;
    double lr = 1e-3, eps = 1e-4, tolerance = 0.0;
    uint64_t seed = 1;
    bool include_head = false, per_layer = false, negative_control = false, f64 = false,
         no_model = false;

    auto* summarize = app.add_subcommand("summarize", "parameter and FLOP accounting");
    summarize->add_option("--variant", variant, "S, T, N or micro");
    summarize->add_option("--config", config_path, "config file path");
    summarize->add_option("--input-size", input_size, "square input size");
    summarize->add_flag("--include-head", include_head, "include the classifier head");
    summarize->add_flag("--per-layer", per_layer, "print per-layer rows");
    summarize->add_option("--dump", dump_path, "write machine-readable rows to this path");

    auto* trace = app.add_subcommand("trace", "layer-by-layer shape trace");
    trace->add_option("--variant", variant, "S, T, N or micro");
    trace->add_option("--config", config_path, "config file path");
    trace->add_option("--input-size", input_size, "square input size");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    gradcheck->add_option("--seed", seed, "seed");
    gradcheck->add_option("--eps", eps, "central-difference step");
    gradcheck->add_option("--tolerance", tolerance, "override tolerance for all ops");
    gradcheck->add_option("--ops", ops_csv, "comma-separated op subset");
    gradcheck->add_flag("--negative-control", negative_control,
                        "include the deliberately wrong backward fixture");
    gradcheck->add_flag("--no-model", no_model, "skip the end-to-end micro model check");

    auto* train = app.add_subcommand("train-toy", "train the micro model on the synthetic task");
    train->add_option("--steps", steps, "optimizer steps");
    train->add_option("--lr", lr, "learning rate");
    train->add_option("--seed", seed, "seed");
    train->add_option("--batch", batch, "batch size");
    train->add_option("--metrics", metrics_path, "metrics log path (step loss accuracy)");
    train->add_option("--save-weights", weights_path, "write trained weights here");

    auto* infer = app.add_subcommand("infer", "classify one PPM image");
    infer->add_option("--weights", weights_path, "weight file")->required();
    infer->add_option("--image", image_path, "binary PPM (P6) image")->required();
    infer->add_option("--variant", variant, "S, T, N or micro");
    infer->add_option("--config", config_path, "config file path");
    infer->add_flag("--f64", f64, "run inference in f64 instead of f32");

    auto* bench = app.add_subcommand("bench", "time repeated single-image inference");
    bench->add_option("--variant", variant, "S, T, N or micro");
    bench->add_option("--config", config_path, "config file path");
    bench->add_option("--input-size", input_size, "square input size");
    bench->add_option("--repeats", repeats, "timed runs");

    CLI11_PARSE(app, argc, argv);

    try {
        if (summarize->parsed())
            return cmd_summarize(variant, config_path, input_size, include_head, per_layer, dump_path);
        if (trace->parsed()) return cmd_trace(variant, config_path, input_size);
        if (gradcheck->parsed())
            return cmd_gradcheck(seed, eps, tolerance, ops_csv, negative_control, !no_model);
        if (train->parsed())
            return cmd_train_toy(steps, lr, seed, batch, metrics_path, weights_path);
        if (infer->parsed()) return cmd_infer(weights_path, image_path, variant, config_path, f64);
        if (bench->parsed()) return cmd_bench(variant, config_path, input_size, repeats);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
