#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hgpe/model.hpp"

namespace hgpe {

// Label-smoothing cross entropy (mean over the batch), pure-tensor path.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels, double smoothing);

enum class OptKind { Sgd, AdamW };

struct OptimHyper {
    double lr = 1e-3;
    double weight_decay = 0.0;
    double beta1 = 0.9, beta2 = 0.999;
    double eps = 1e-8;
};

// Per-parameter slots live beside the step counter; slot shapes always
// match their parameter.
struct OptimState {
    int64_t step = 0;
    std::map<std::string, Tensor> m, v;
};

// In-place update of every learnable entry with a matching gradient.
void optimizer_step(ParamStore& params, const std::map<std::string, Tensor>& grads,
                    OptimState& state, OptKind kind, const OptimHyper& hp);

// Synthetic 2-class dataset: bright disk (class 0) vs bright square
// (class 1) on a dark field, 3x32x32, deterministic per seed.
struct ToyDataset {
    Tensor images;            // [count, 3, 32, 32]
    std::vector<int> labels;  // balanced
};

ToyDataset make_toy_dataset(uint64_t seed, int count = 512);

// Per-step metrics are evaluated on a fixed, balanced subset of the
// training set in inference mode, so the logged curve is a deterministic
// function of the parameter trajectory rather than of batch sampling noise.
struct StepMetrics {
    int step;
    double loss;
    double accuracy;
};

struct TrainLog {
    std::vector<StepMetrics> steps;
    double final_train_accuracy = 0.0;  // full train-set accuracy, infer mode
};

struct TrainToyOptions {
    int steps = 300;
    double lr = 1e-3;
    uint64_t seed = 1;
    int batch = 128;
    double weight_decay = 0.0;
    double label_smoothing = 0.0;
    OptKind optimizer = OptKind::AdamW;
};

// Trains the micro config on the synthetic task. Throws std::runtime_error
// naming the step index if the loss diverges to a non-finite value.
TrainLog train_toy(const ModelConfig& cfg, const TrainToyOptions& opt, HGpeModel* out_model = nullptr);

void write_metrics(const TrainLog& log, const std::string& path);

}  // namespace hgpe
