#include "hgpe/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "hgpe/rng.hpp"

namespace hgpe {

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels, double smoothing) {
    if (logits.rank() != 2) fail("cross_entropy: logits must be [N, K]");
    const int64_t n = logits.dim(0), k = logits.dim(1);
    if (static_cast<int64_t>(labels.size()) != n) fail("cross_entropy: label count mismatch");
    const double off = smoothing / static_cast<double>(k);
    const double on = 1.0 - smoothing + off;
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || labels[i] >= k)
            fail("cross_entropy: label " + std::to_string(labels[i]) + " out of range [0, " +
                 std::to_string(k) + ")");
        double mx = logits[i * k];
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, logits[i * k + j]);
        double lse = 0.0;
        for (int64_t j = 0; j < k; ++j) lse += std::exp(logits[i * k + j] - mx);
        lse = std::log(lse) + mx;
        for (int64_t j = 0; j < k; ++j) {
            const double tgt = (j == labels[i]) ? on : off;
            loss -= tgt * (logits[i * k + j] - lse);
        }
    }
    return Tensor::scalar(loss / static_cast<double>(n));
}

void optimizer_step(ParamStore& params, const std::map<std::string, Tensor>& grads,
                    OptimState& state, OptKind kind, const OptimHyper& hp) {
    state.step += 1;
    for (auto& e : params.entries) {
        if (!e.learnable) continue;
        auto it = grads.find(e.name);
        if (it == grads.end()) continue;
        const Tensor& g = it->second;
        Tensor& p = *e.tensor;
        if (!g.same_shape(p))
            fail("optimizer_step: gradient shape " + g.shape_str() + " does not match " + e.name);
        if (kind == OptKind::Sgd) {
            for (int64_t i = 0; i < p.numel(); ++i)
                p[i] -= hp.lr * (g[i] + hp.weight_decay * p[i]);
            continue;
        }
        Tensor& m = state.m.try_emplace(e.name, Tensor(p.dims())).first->second;
        Tensor& v = state.v.try_emplace(e.name, Tensor(p.dims())).first->second;
        const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
        const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
        for (int64_t i = 0; i < p.numel(); ++i) {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            // decoupled weight decay
            p[i] -= hp.lr * (mhat / (std::sqrt(vhat) + hp.eps) + hp.weight_decay * p[i]);
        }
    }
}

ToyDataset make_toy_dataset(uint64_t seed, int count) {
    Rng rng(seed);
    ToyDataset ds;
    ds.images = Tensor({count, 3, 32, 32});
    ds.labels.resize(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        const int label = i % 2;  // balanced, alternating
        ds.labels[static_cast<size_t>(i)] = label;
        const double bg = rng.uniform(0.0, 0.2);
        const double fg = rng.uniform(0.8, 1.0);
        const double cx = rng.uniform(10.0, 22.0);
        const double cy = rng.uniform(10.0, 22.0);
        const double r = rng.uniform(4.0, 8.0);
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                bool inside;
                if (label == 0) {
                    const double dx = x - cx, dy = y - cy;
                    inside = dx * dx + dy * dy <= r * r;
                } else {
                    inside = std::fabs(x - cx) <= r && std::fabs(y - cy) <= r;
                }
                const double v = (inside ? fg : bg) + rng.uniform(-0.05, 0.05);
                for (int c = 0; c < 3; ++c) ds.images.at4(i, c, y, x) = v;
            }
    }
    return ds;
}

namespace {

Tensor gather_batch(const ToyDataset& ds, const std::vector<int64_t>& idx, std::vector<int>& labels) {
    const int64_t b = static_cast<int64_t>(idx.size());
    const int64_t sample = ds.images.numel() / ds.images.dim(0);
    Tensor batch({b, 3, 32, 32});
    labels.clear();
    for (int64_t i = 0; i < b; ++i) {
        std::copy(ds.images.data() + idx[static_cast<size_t>(i)] * sample,
                  ds.images.data() + (idx[static_cast<size_t>(i)] + 1) * sample,
                  batch.data() + i * sample);
        labels.push_back(ds.labels[static_cast<size_t>(idx[static_cast<size_t>(i)])]);
    }
    return batch;
}

double batch_accuracy(const Tensor& logits, const std::vector<int>& labels) {
    const int64_t n = logits.dim(0), k = logits.dim(1);
    int64_t hits = 0;
    for (int64_t i = 0; i < n; ++i) {
        int64_t best = 0;
        for (int64_t j = 1; j < k; ++j)
            if (logits[i * k + j] > logits[i * k + best]) best = j;
        if (best == labels[static_cast<size_t>(i)]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace

TrainLog train_toy(const ModelConfig& cfg, const TrainToyOptions& opt, HGpeModel* out_model) {
    HGpeModel model = build_model(cfg, opt.seed);
    ParamStore store = build_param_store(model);
    ToyDataset ds = make_toy_dataset(opt.seed + 1);
    Rng order_rng(opt.seed + 2);

    OptimState state;
    OptimHyper hp;
    hp.lr = opt.lr;
    hp.weight_decay = opt.weight_decay;
    // A large Adam epsilon damps the update magnitude once gradients fall
    // below it, so the run settles instead of jittering at the optimum
    // (the fixed-LR stand-in for a decay schedule).
    hp.eps = 1e-2;

    // Fixed evaluation subset for the metrics log (balanced by the
    // alternating label layout).
    const int64_t eval_n = std::min<int64_t>(64, ds.images.dim(0));
    std::vector<int64_t> eval_idx(static_cast<size_t>(eval_n));
    for (int64_t i = 0; i < eval_n; ++i) eval_idx[static_cast<size_t>(i)] = i;
    std::vector<int> eval_labels;
    Tensor eval_batch = gather_batch(ds, eval_idx, eval_labels);

    // Epoch-cyclic batching: a fresh shuffle per epoch, batches taken
    // without replacement.
    std::vector<int64_t> order(static_cast<size_t>(ds.images.dim(0)));
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
    size_t cursor = order.size();

    TrainLog log;
    for (int step = 0; step < opt.steps; ++step) {
        std::vector<int64_t> idx;
        while (idx.size() < static_cast<size_t>(opt.batch)) {
            if (cursor == order.size()) {
                for (size_t i = order.size(); i > 1; --i)
                    std::swap(order[i - 1], order[static_cast<size_t>(order_rng.uniform_int(
                                  0, static_cast<int64_t>(i) - 1))]);
                cursor = 0;
            }
            idx.push_back(order[cursor++]);
        }
        std::vector<int> labels;
        Tensor batch = gather_batch(ds, idx, labels);

        ad::Tape tape;
        auto lifted = lift_model(tape, model);
        ad::Var x = tape.constant(batch);
        ad::Var logits = model_forward(lifted, x, Mode::Train);
        ad::Var loss = ad::cross_entropy(logits, labels, opt.label_smoothing);

        const double loss_v = loss.val()[0];
        if (!std::isfinite(loss_v))
            throw std::runtime_error("train_toy: loss diverged at step " + std::to_string(step));

        tape.backward(loss);
        optimizer_step(store, tape.named_grads(), state, opt.optimizer, hp);
        copy_buffers(lifted, model);  // batch-norm running statistics

        // Metrics use batch statistics on a scratch copy: the logged curve
        // then tracks the optimized objective directly instead of lagging
        // behind the running-statistic warm-up.
        HGpeModel scratch = model;
        Tensor eval_logits = model_forward(scratch, eval_batch, Mode::Train);
        const double eval_loss = cross_entropy(eval_logits, eval_labels, opt.label_smoothing)[0];
        log.steps.push_back({step, eval_loss, batch_accuracy(eval_logits, eval_labels)});
    }

    // Full train-set accuracy in inference mode.
    int64_t hits = 0;
    const int64_t count = ds.images.dim(0);
    const int eval_chunk = 64;
    for (int64_t at = 0; at < count; at += eval_chunk) {
        std::vector<int64_t> idx;
        for (int64_t i = at; i < std::min(count, at + eval_chunk); ++i) idx.push_back(i);
        std::vector<int> labels;
        Tensor batch = gather_batch(ds, idx, labels);
        Tensor logits = model_forward(model, batch, Mode::Infer);
        hits += static_cast<int64_t>(batch_accuracy(logits, labels) *
                                     static_cast<double>(labels.size()) + 0.5);
    }
    log.final_train_accuracy = static_cast<double>(hits) / static_cast<double>(count);
    if (out_model) *out_model = std::move(model);
    return log;
}

void write_metrics(const TrainLog& log, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_metrics: cannot write " + path);
    for (const auto& s : log.steps) out << s.step << " " << s.loss << " " << s.accuracy << "\n";
}

}  // namespace hgpe
