#include "hgpe/gradcheck.hpp"

#include <algorithm>
#include <functional>
#include <memory>

#include "hgpe/model.hpp"
#include "hgpe/rng.hpp"
#include "hgpe/train.hpp"

namespace hgpe {

namespace {

// Sample away from the relu6 / h-swish kinks so central differences stay
// valid (rejection bands of 10*eps around -3, 0, 3, 6).
void fill_kink_avoiding(Rng& rng, Tensor& t, double eps) {
    const double band = 10.0 * eps;
    for (int64_t i = 0; i < t.numel(); ++i) {
        double v;
        do {
            v = rng.uniform(-2.5, 2.5);
        } while (std::fabs(v + 3.0) < band || std::fabs(v) < band || std::fabs(v - 3.0) < band ||
                 std::fabs(v - 6.0) < band);
        t[i] = v;
    }
}

struct BuiltGraph {
    ad::Var output;               // scalar loss
    std::vector<ad::Var> leaves;  // aligned with Harness::ptrs
};

// One runnable check: plain tensors live in the closure state, `build`
// lifts them onto a fresh tape and returns the scalar loss.
struct Harness {
    std::string name;
    double tol = 1e-5;
    std::function<BuiltGraph(ad::Tape&)> build;
    std::vector<Tensor*> ptrs;
};

double eval_loss(const Harness& h) {
    ad::Tape tape;
    return h.build(tape).output.val()[0];
}

// Random-projection loss over an op output: sum(out * R) with a fixed R.
struct ProjState {
    std::vector<Tensor> inputs;
    Tensor proj;
};

Harness make_projected(std::string name, double tol, std::vector<Tensor> inputs,
                       std::function<ad::Var(ad::Tape&, std::vector<ad::Var>&)> op, Rng& rng) {
    auto st = std::make_shared<ProjState>();
    st->inputs = std::move(inputs);
    Harness h;
    h.name = std::move(name);
    h.tol = tol;
    for (auto& t : st->inputs) h.ptrs.push_back(&t);
    const uint64_t proj_seed = rng.next_u64();
    h.build = [st, op, proj_seed](ad::Tape& tape) {
        BuiltGraph g;
        for (auto& t : st->inputs) g.leaves.push_back(tape.leaf(t));
        ad::Var out = op(tape, g.leaves);
        if (st->proj.empty()) {
            st->proj = Tensor(out.dims());
            Rng prng(proj_seed);
            prng.fill_uniform(st->proj, -1.0, 1.0);
        }
        ad::Var flat_out = ad::reshape(out, {out.val().numel()});
        ad::Var r = tape.constant(st->proj.reshaped({st->proj.numel()}));
        g.output = ad::reduce_sum(ad::mul(flat_out, r));
        return g;
    };
    return h;
}

Tensor rand_tensor(Rng& rng, std::vector<int64_t> dims, double eps, double scale = 1.0) {
    Tensor t(std::move(dims));
    fill_kink_avoiding(rng, t, eps);
    if (scale != 1.0)
        for (int64_t i = 0; i < t.numel(); ++i) t[i] *= scale;
    return t;
}

// --- block checks: lift a seeded param struct plus input --------------------

template <typename Block>
struct BlockState {
    Block block;
    Tensor input;
    Tensor proj;
    std::vector<Tensor*> ptrs;  // filled on the first build (lift order is stable)
};

template <typename Block, typename LiftFn, typename FwdFn>
Harness make_block_check(std::string name, double tol, Block block, Tensor input, LiftFn lift,
                         FwdFn fwd, Rng& rng) {
    auto st = std::make_shared<BlockState<Block>>();
    st->block = std::move(block);
    st->input = std::move(input);
    Harness h;
    h.name = std::move(name);
    h.tol = tol;
    const uint64_t proj_seed = rng.next_u64();

    h.build = [st, lift, fwd, proj_seed](ad::Tape& tape) {
        BuiltGraph g;
        const bool first = st->ptrs.empty();
        auto lf = [&](const std::string&, Tensor& t) {
            if (first) st->ptrs.push_back(&t);
            g.leaves.push_back(tape.leaf(t));
            return g.leaves.back();
        };
        auto bf = [](const std::string&, Tensor& t) { return t; };
        auto lifted = lift(st->block, lf, bf);
        ad::Var x = tape.leaf(st->input);
        g.leaves.push_back(x);
        if (first) st->ptrs.push_back(&st->input);
        ad::Var out = fwd(lifted, x);
        if (st->proj.empty()) {
            st->proj = Tensor(out.dims());
            Rng prng(proj_seed);
            prng.fill_uniform(st->proj, -1.0, 1.0);
        }
        ad::Var flat_out = ad::reshape(out, {out.val().numel()});
        ad::Var r = tape.constant(st->proj.reshaped({st->proj.numel()}));
        g.output = ad::reduce_sum(ad::mul(flat_out, r));
        return g;
    };
    // Populate the pointer list ahead of finite differencing.
    ad::Tape warmup;
    h.build(warmup);
    h.ptrs = st->ptrs;
    return h;
}

// --- registry ---------------------------------------------------------------

std::vector<Harness> make_checks(uint64_t seed, double eps, bool with_negative_control) {
    std::vector<Harness> checks;
    Rng rng(seed);

    checks.push_back(make_projected(
        "conv2d", 1e-6,
        {rand_tensor(rng, {1, 2, 4, 4}, eps), rand_tensor(rng, {3, 2, 3, 3}, eps, 0.5),
         rand_tensor(rng, {3}, eps, 0.2)},
        [](ad::Tape&, std::vector<ad::Var>& v) { return ad::conv2d(v[0], v[1], v[2], 1, 1, 1); },
        rng));
    checks.push_back(make_projected(
        "conv2d_strided_grouped", 1e-6,
        {rand_tensor(rng, {2, 4, 5, 5}, eps), rand_tensor(rng, {6, 2, 3, 3}, eps, 0.5)},
        [](ad::Tape&, std::vector<ad::Var>& v) { return ad::conv2d(v[0], v[1], 2, 1, 2); }, rng));
    checks.push_back(make_projected(
        "conv2d_depthwise", 1e-6,
        {rand_tensor(rng, {1, 3, 6, 6}, eps), rand_tensor(rng, {3, 1, 3, 3}, eps, 0.5)},
        [](ad::Tape&, std::vector<ad::Var>& v) { return ad::conv2d(v[0], v[1], 1, 1, 3); }, rng));
    checks.push_back(make_projected(
        "strip_pool_h", 1e-6, {rand_tensor(rng, {2, 3, 4, 5}, eps)},
        [](ad::Tape&, std::vector<ad::Var>& v) { return ad::strip_pool(v[0], StripAxis::Height); },
        rng));
    checks.push_back(make_projected(
        "strip_pool_w", 1e-6, {rand_tensor(rng, {2, 3, 4, 5}, eps)},
        [](ad::Tape&, std::vector<ad::Var>& v) { return ad::strip_pool(v[0], StripAxis::Width); },
        rng));
    checks.push_back(make_projected(
        "pool_global_avg", 1e-6, {rand_tensor(rng, {2, 3, 4, 4}, eps)},
        [](ad::Tape&, std::vector<ad::Var>& v) { return ad::pool_global_avg(v[0]); }, rng));
    checks.push_back(make_projected(
        "softmax_lastdim", 1e-6, {rand_tensor(rng, {2, 3, 5}, eps)},
        [](ad::Tape&, std::vector<ad::Var>& v) { return ad::softmax_lastdim(v[0]); }, rng));
    for (auto [kind, kname] :
         {std::pair{Act::Sigmoid, "sigmoid"}, std::pair{Act::HSwish, "h_swish"},
          std::pair{Act::Relu6, "relu6"}, std::pair{Act::Silu, "silu"}}) {
        checks.push_back(make_projected(
            kname, 1e-6, {rand_tensor(rng, {2, 3, 4, 4}, eps)},
            [kind = kind](ad::Tape&, std::vector<ad::Var>& v) { return ad::activation(v[0], kind); },
            rng));
    }
    for (bool training : {true, false}) {
        auto st = std::make_shared<BnStateT<double>>();
        st->running_mean = rand_tensor(rng, {4}, eps, 0.1);
        st->running_var = Tensor::full({4}, 1.3);
        checks.push_back(make_projected(
            std::string("batch_norm_") + (training ? "train" : "infer"), 1e-6,
            {rand_tensor(rng, {3, 4, 2, 2}, eps), rand_tensor(rng, {4}, eps, 0.5),
             rand_tensor(rng, {4}, eps, 0.5)},
            [st, training](ad::Tape&, std::vector<ad::Var>& v) {
                BnStateT<double> state = *st;  // keep FD probes side-effect free
                return ad::batch_norm(v[0], v[1], v[2], state.running_mean, state.running_var,
                                      training);
            },
            rng));
    }
    checks.push_back(make_projected(
        "layer_norm", 1e-6,
        {rand_tensor(rng, {2, 6, 3, 3}, eps), rand_tensor(rng, {6}, eps, 0.5),
         rand_tensor(rng, {6}, eps, 0.5)},
        [](ad::Tape&, std::vector<ad::Var>& v) { return ad::layer_norm(v[0], v[1], v[2]); }, rng));
    checks.push_back(make_projected(
        "group_norm", 1e-6,
        {rand_tensor(rng, {2, 6, 3, 3}, eps), rand_tensor(rng, {6}, eps, 0.5),
         rand_tensor(rng, {6}, eps, 0.5)},
        [](ad::Tape&, std::vector<ad::Var>& v) { return ad::group_norm(v[0], v[1], v[2], 3); },
        rng));
    checks.push_back(make_projected(
        "window_partition", 1e-6, {rand_tensor(rng, {2, 3, 7, 9}, eps)},
        [](ad::Tape&, std::vector<ad::Var>& v) { return ad::window_partition(v[0], 4, 4).first; },
        rng));
    checks.push_back(make_projected(
        "window_merge", 1e-6, {rand_tensor(rng, {2, 3, 7, 9}, eps)},
        [](ad::Tape&, std::vector<ad::Var>& v) {
            auto [win, rec] = ad::window_partition(v[0], 4, 4);
            return ad::window_merge(win, rec);
        },
        rng));
    checks.push_back(make_projected(
        "split_concat_channels", 1e-6, {rand_tensor(rng, {2, 7, 3, 3}, eps)},
        [](ad::Tape&, std::vector<ad::Var>& v) {
            auto parts = ad::split_channels(v[0], {2, 5});
            return ad::concat_channels({parts[1], parts[0]});
        },
        rng));
    checks.push_back(make_projected(
        "matmul_batched", 1e-6,
        {rand_tensor(rng, {2, 3, 4}, eps), rand_tensor(rng, {2, 4, 5}, eps)},
        [](ad::Tape&, std::vector<ad::Var>& v) { return ad::matmul_batched(v[0], v[1]); }, rng));
    checks.push_back(make_projected(
        "tokens_heads_roundtrip", 1e-6, {rand_tensor(rng, {2, 4, 6, 2}, eps)},
        [](ad::Tape&, std::vector<ad::Var>& v) {
            ad::Var t = ad::split_heads(ad::nchw_to_tokens(v[0]), 2);
            return ad::tokens_to_nchw(ad::merge_heads(t, 2), 6, 2);
        },
        rng));
    checks.push_back(make_projected(
        "transpose_last2", 1e-6, {rand_tensor(rng, {3, 4, 5}, eps)},
        [](ad::Tape&, std::vector<ad::Var>& v) { return ad::transpose_last2(v[0]); }, rng));
    checks.push_back(make_projected(
        "mul_bcast", 1e-6,
        {rand_tensor(rng, {2, 3, 4, 5}, eps), rand_tensor(rng, {2, 3, 4, 1}, eps)},
        [](ad::Tape&, std::vector<ad::Var>& v) { return ad::mul_bcast(v[0], v[1]); }, rng));
    checks.push_back(make_projected(
        "conv_channels1d", 1e-6,
        {rand_tensor(rng, {2, 8, 1, 1}, eps), rand_tensor(rng, {5}, eps, 0.5)},
        [](ad::Tape&, std::vector<ad::Var>& v) { return ad::conv_channels1d(v[0], v[1]); }, rng));
    checks.push_back(make_projected(
        "linear", 1e-6,
        {rand_tensor(rng, {3, 5}, eps), rand_tensor(rng, {4, 5}, eps, 0.5),
         rand_tensor(rng, {4}, eps, 0.2)},
        [](ad::Tape&, std::vector<ad::Var>& v) { return ad::linear(v[0], v[1], v[2]); }, rng));
    {
        std::vector<int> labels = {1, 0, 2};
        checks.push_back(make_projected(
            "cross_entropy", 1e-6, {rand_tensor(rng, {3, 4}, eps)},
            [labels](ad::Tape&, std::vector<ad::Var>& v) {
                return ad::cross_entropy(v[0], labels, 0.1);
            },
            rng));
    }

    // Blocks, exercised in training mode on seeded parameters.
    {
        Rng init(seed + 11);
        checks.push_back(make_block_check(
            "gig_forward", 1e-5, detail::make_gig(init, 4, 7), rand_tensor(rng, {1, 4, 5, 6}, eps),
            [](GigT<Tensor>& b, auto lf, auto bf) { return detail::tf_gig<ad::Var>(b, "g", lf, bf); },
            [](GigT<ad::Var>& b, ad::Var x) { return gig_forward(x, b, Mode::Train); }, rng));
    }
    {
        Rng init(seed + 12);
        checks.push_back(make_block_check(
            "lsae_forward", 1e-5, detail::make_lsae(init, 4, 4, 0),
            rand_tensor(rng, {1, 4, 8, 8}, eps),
            [](LsaeT<Tensor>& b, auto lf, auto bf) { return detail::tf_lsae<ad::Var>(b, "l", lf, bf); },
            [](LsaeT<ad::Var>& b, ad::Var x) { return lsae_forward(x, b, Mode::Train); }, rng));
    }
    {
        Rng init(seed + 13);
        checks.push_back(make_block_check(
            "asa_forward", 1e-5, detail::make_asa(init, 4), rand_tensor(rng, {1, 4, 5, 7}, eps),
            [](AsaT<Tensor>& b, auto lf, auto) { return detail::tf_asa<ad::Var>(b, "a", lf); },
            [](AsaT<ad::Var>& b, ad::Var x) { return asa_forward(x, b); }, rng));
    }
    {
        Rng init(seed + 14);
        checks.push_back(make_block_check(
            "cra_forward", 1e-5, detail::make_cra(init, 8), rand_tensor(rng, {2, 8, 3, 3}, eps),
            [](CraT<Tensor>& b, auto lf, auto) { return CraT<ad::Var>{lf("cra/kernel", b.kernel)}; },
            [](CraT<ad::Var>& b, ad::Var x) { return cra_forward(x, b); }, rng));
    }
    {
        Rng init(seed + 15);
        checks.push_back(make_block_check(
            "irb_forward", 1e-5, detail::make_irb(init, 4, 4, 2, 1),
            rand_tensor(rng, {1, 4, 6, 6}, eps),
            [](IrbT<Tensor>& b, auto lf, auto bf) { return detail::tf_irb<ad::Var>(b, "i", lf, bf); },
            [](IrbT<ad::Var>& b, ad::Var x) { return irb_forward(x, b, Mode::Train); }, rng));
    }
    {
        Rng init(seed + 16);
        ModelConfig mc = ModelConfig::micro();
        GpeBlockT<Tensor> gpe = detail::make_gpe(init, mc, 8, 4);
        checks.push_back(make_block_check(
            "gpe_block_forward", 1e-5, std::move(gpe), rand_tensor(rng, {1, 8, 6, 6}, eps),
            [](GpeBlockT<Tensor>& b, auto lf, auto bf) {
                return detail::tf_gpe<ad::Var>(b, "b", lf, bf);
            },
            [](GpeBlockT<ad::Var>& b, ad::Var x) { return gpe_block_forward(x, b, Mode::Train); },
            rng));
    }

    if (with_negative_control) {
        // Deliberately wrong backward (sigmoid grad scaled by 1.01); the
        // harness must flag it.
        checks.push_back(make_projected(
            "negative-control", 1e-5, {rand_tensor(rng, {2, 3}, eps)},
            [](ad::Tape& tape, std::vector<ad::Var>& v) {
                const int xid = v[0].id;
                Tensor out = hgpe::activation(v[0].val(), Act::Sigmoid);
                const int id = tape.push(std::move(out), {xid}, [xid](ad::Tape& tp, int self) {
                    const Tensor g = tp.gbuf(self);
                    const Tensor& xv = tp.value(xid);
                    Tensor& gx = tp.gbuf(xid);
                    for (int64_t i = 0; i < xv.numel(); ++i)
                        gx[i] += 1.01 * g[i] * act_grad(Act::Sigmoid, xv[i]);
                });
                return ad::Var{&tape, id};
            },
            rng));
    }
    return checks;
}

double fd_probe(const Harness& h, Tensor* ptr, int64_t ci, double eps) {
    const double orig = (*ptr)[ci];
    (*ptr)[ci] = orig + eps;
    const double fp = eval_loss(h);
    (*ptr)[ci] = orig - eps;
    const double fm = eval_loss(h);
    (*ptr)[ci] = orig;
    return (fp - fm) / (2.0 * eps);
}

GradCheckResult run_one(Harness& h, double eps, double tol, int max_coords, uint64_t pick_seed) {
    ad::Tape tape;
    BuiltGraph g = h.build(tape);
    tape.backward(g.output);
    std::vector<Tensor> analytic;
    analytic.reserve(g.leaves.size());
    for (const auto& v : g.leaves) analytic.push_back(tape.grad_of(v));

    Rng pick(pick_seed);
    GradCheckResult res{h.name, 0.0, tol, true};
    for (size_t li = 0; li < h.ptrs.size(); ++li) {
        Tensor* ptr = h.ptrs[li];
        std::vector<int64_t> coords;
        if (max_coords <= 0 || ptr->numel() <= max_coords) {
            for (int64_t i = 0; i < ptr->numel(); ++i) coords.push_back(i);
        } else {
            for (int i = 0; i < max_coords; ++i) coords.push_back(pick.uniform_int(0, ptr->numel() - 1));
        }
        for (int64_t ci : coords) {
            const double a = analytic[li][ci];
            double fd = fd_probe(h, ptr, ci, eps);
            double rel = std::fabs(a - fd) / std::max({std::fabs(a), std::fabs(fd), 1.0});
            // Distinguish a kink-crossing finite-difference artifact from a
            // wrong gradient: artifacts shrink linearly with eps, bugs stay.
            for (double e = eps / 8.0; rel > tol && e >= eps / 512.0; e /= 8.0) {
                fd = fd_probe(h, ptr, ci, e);
                rel = std::fabs(a - fd) / std::max({std::fabs(a), std::fabs(fd), 1.0});
            }
            res.max_rel_err = std::max(res.max_rel_err, rel);
        }
    }
    res.pass = res.max_rel_err < tol;
    return res;
}

}  // namespace

std::vector<std::string> gradcheck_op_names() {
    auto checks = make_checks(1, 1e-4, false);
    std::vector<std::string> names;
    for (const auto& c : checks) names.push_back(c.name);
    return names;
}

std::vector<GradCheckResult> run_gradcheck(const GradCheckOptions& opt) {
    auto checks = make_checks(opt.seed, opt.eps, opt.include_negative_control);
    std::vector<GradCheckResult> results;
    for (auto& c : checks) {
        if (!opt.only.empty() &&
            std::find(opt.only.begin(), opt.only.end(), c.name) == opt.only.end())
            continue;
        const double tol = opt.tol_override > 0 ? opt.tol_override : c.tol;
        results.push_back(run_one(c, opt.eps, tol, 0, opt.seed ^ 0x9e3779b97f4a7c15ull));
    }
    return results;
}

GradCheckResult grad_check_model(uint64_t seed, double eps, double tol, int coords_per_param) {
    struct State {
        HGpeModel model;
        Tensor input;
        std::vector<int> labels;
    };
    auto st = std::make_shared<State>();
    st->model = build_model(ModelConfig::micro(), seed);
    Rng rng(seed + 100);
    st->input = Tensor({2, 3, 32, 32});
    rng.fill_uniform(st->input, 0.0, 1.0);
    st->labels = {0, 1};

    Harness h;
    h.name = "micro_model_e2e";
    h.tol = tol;
    h.build = [st](ad::Tape& tape) {
        BuiltGraph g;
        auto lifted = lift_model(tape, st->model);
        visit_params(lifted, [&](const std::string&, ad::Var& v) { g.leaves.push_back(v); });
        ad::Var x = tape.leaf(st->input);
        g.leaves.push_back(x);
        ad::Var logits = model_forward(lifted, x, Mode::Train);
        g.output = ad::cross_entropy(logits, st->labels, 0.1);
        return g;
    };
    visit_params(st->model, [&](const std::string&, Tensor& t) { h.ptrs.push_back(&t); });
    h.ptrs.push_back(&st->input);

    return run_one(h, eps, tol, coords_per_param, seed * 7919 + 13);
}

}  // namespace hgpe
