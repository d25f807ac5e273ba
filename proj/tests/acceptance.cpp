// Acceptance suite: one criterion per entry, each printing a PASS/FAIL
// line with the measured numbers. Exit code is nonzero when any selected
// criterion fails.

#include <cmath>
#include <cstring>
#include <functional>
#include <iostream>
#include <sstream>
#include <vector>

#include "block_oracles.hpp"
#include "hgpe/analysis.hpp"
#include "hgpe/gradcheck.hpp"
#include "hgpe/model.hpp"
#include "hgpe/serialize.hpp"
#include "hgpe/train.hpp"

using namespace hgpe;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    for (int64_t i = 0; i < a.numel(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

Tensor rand_uniform(Rng& rng, std::vector<int64_t> dims, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(dims));
    rng.fill_uniform(t, lo, hi);
    return t;
}

void randomize_bn(Rng& rng, BatchNormT<Tensor>& bn) {
    rng.fill_uniform(bn.scale, 0.5, 1.5);
    rng.fill_uniform(bn.shift, -0.3, 0.3);
    rng.fill_uniform(bn.running_mean, -0.5, 0.5);
    rng.fill_uniform(bn.running_var, 0.5, 2.0);
}

// --- criterion 1: parameter reproduction ------------------------------------

bool criterion_params(std::ostream& out) {
    struct Row {
        Variant v;
        double ref_m;
    };
    const Row rows[] = {{Variant::S, 5.6}, {Variant::T, 2.3}, {Variant::N, 1.2}};
    bool ok = true;
    for (const auto& row : rows) {
        HGpeModel m = build_model(ModelConfig::preset(row.v), 1);
        ComplexityReport r = count_params(m);
        const double got_m = static_cast<double>(r.backbone_params) / 1e6;
        const double rel = got_m / row.ref_m - 1.0;
        const bool pass = std::fabs(rel) <= 0.10;
        ok = ok && pass;
        out << "    H-GPE-" << variant_name(row.v) << ": backbone " << r.backbone_params << " ("
            << got_m << " M) vs reference " << row.ref_m << " M, delta " << rel * 100.0 << "% -> "
            << (pass ? "ok" : "outside +-10%") << "\n";
    }
    return ok;
}

// --- criterion 2: FLOPs reproduction ----------------------------------------

bool criterion_flops(std::ostream& out) {
    struct Row {
        Variant v;
        double ref_g;
    };
    const Row rows[] = {{Variant::S, 1.4}, {Variant::T, 0.5}, {Variant::N, 0.3}};
    bool ok = true;
    for (const auto& row : rows) {
        HGpeModel m = build_model(ModelConfig::preset(row.v), 1);
        ComplexityReport r = count_macs(m, 224, 224);
        const double macs_g = r.flops_macs() / 1e9;
        const double twox_g = r.flops_2x() / 1e9;
        const bool macs_closer = std::fabs(macs_g - row.ref_g) <= std::fabs(twox_g - row.ref_g);
        const double got = macs_closer ? macs_g : twox_g;
        const double rel = got / row.ref_g - 1.0;
        const bool pass = std::fabs(rel) <= 0.20;
        ok = ok && pass;
        out << "    H-GPE-" << variant_name(row.v) << ": " << got << " G (convention "
            << (macs_closer ? "MACS" : "2X_MACS") << ") vs reference " << row.ref_g << " G, delta "
            << rel * 100.0 << "% -> " << (pass ? "ok" : "outside +-20%") << "\n";
    }
    return ok;
}

// --- criterion 3: pseudocode-oracle equivalence ------------------------------

bool criterion_oracles(std::ostream& out) {
    bool ok = true;
    double worst = 0.0;
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed * 101);
        {
            GigT<Tensor> p = detail::make_gig(rng, 8, 7);
            randomize_bn(rng, p.strip_bn);
            rng.fill_uniform(p.gate_h_bias, -0.2, 0.2);
            rng.fill_uniform(p.gate_w_bias, -0.2, 0.2);
            Tensor x = rand_uniform(rng, {1, 8, 6, 6});
            worst = std::max(worst,
                             max_abs_diff(gig_forward(x, p, Mode::Infer), oracle::gig_oracle(x, p)));
        }
        {
            LsaeT<Tensor> p = detail::make_lsae(rng, 4, 4, 0);
            randomize_bn(rng, p.qk->bn);
            randomize_bn(rng, p.v.bn);
            rng.fill_uniform(p.norm.scale, 0.5, 1.5);
            rng.fill_uniform(p.norm.shift, -0.3, 0.3);
            Tensor x = rand_uniform(rng, {1, 4, 8, 8});
            worst = std::max(
                worst, max_abs_diff(lsae_forward(x, p, Mode::Infer), oracle::lsae_oracle(x, p)));
            Tensor odd = rand_uniform(rng, {1, 4, 7, 5});  // padding path
            worst = std::max(worst, max_abs_diff(lsae_forward(odd, p, Mode::Infer),
                                                 oracle::lsae_oracle(odd, p)));
        }
        {
            AsaT<Tensor> p = detail::make_asa(rng, 8);
            rng.fill_uniform(p.conv_h_bias, -0.2, 0.2);
            rng.fill_uniform(p.conv_w_bias, -0.2, 0.2);
            rng.fill_uniform(p.gn_h_scale, 0.5, 1.5);
            rng.fill_uniform(p.gn_h_shift, -0.3, 0.3);
            rng.fill_uniform(p.gn_w_scale, 0.5, 1.5);
            rng.fill_uniform(p.gn_w_shift, -0.3, 0.3);
            Tensor x = rand_uniform(rng, {1, 8, 5, 7});
            worst = std::max(worst, max_abs_diff(asa_forward(x, p), oracle::asa_oracle(x, p)));
        }
        {
            CraT<Tensor> p = detail::make_cra(rng, 8);
            Tensor x = rand_uniform(rng, {2, 8, 4, 4});
            worst = std::max(worst, max_abs_diff(cra_forward(x, p), oracle::cra_oracle(x, p)));
        }
        {
            IrbT<Tensor> p = detail::make_irb(rng, 4, 4, 2, 1);
            randomize_bn(rng, p.expand.bn);
            randomize_bn(rng, p.dw.bn);
            randomize_bn(rng, p.project.bn);
            Tensor x = rand_uniform(rng, {1, 4, 6, 6});
            worst =
                std::max(worst, max_abs_diff(irb_forward(x, p, Mode::Infer), oracle::irb_oracle(x, p)));
        }
    }
    ok = worst < 1e-10;
    out << "    gig/lsae/asa/cra/irb vs straight-line oracles, 20 seeds each: max abs err "
        << worst << (ok ? " < 1e-10" : " >= 1e-10") << "\n";
    return ok;
}

// --- criterion 4: gradient suite ----------------------------------------------

bool criterion_gradients(std::ostream& out) {
    bool ok = true;
    double worst_op = 0.0, worst_model = 0.0;
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        GradCheckOptions opt;
        opt.seed = seed;
        for (const auto& r : run_gradcheck(opt)) {
            worst_op = std::max(worst_op, r.max_rel_err);
            if (r.max_rel_err >= 1e-5) {
                ok = false;
                out << "    seed " << seed << ": " << r.op << " rel err " << r.max_rel_err << "\n";
            }
        }
        GradCheckResult m = grad_check_model(seed, 1e-4, 1e-5);
        worst_model = std::max(worst_model, m.max_rel_err);
        if (!m.pass) {
            ok = false;
            out << "    seed " << seed << ": micro model rel err " << m.max_rel_err << "\n";
        }
    }
    out << "    ops across 5 seeds: worst rel err " << worst_op << "; micro end-to-end: worst "
        << worst_model << " (tolerance 1e-5, eps 1e-4)\n";
    return ok;
}

// --- criterion 5: structural invariants ---------------------------------------

bool criterion_structure(std::ostream& out) {
    bool ok = true;

    // window partition/merge roundtrip, all (H, W) in [1,40]^2, windows {4,7,14}
    {
        Rng rng(5);
        bool exact = true;
        for (int win : {4, 7, 14})
            for (int h = 1; h <= 40 && exact; ++h)
                for (int w = 1; w <= 40 && exact; ++w) {
                    Tensor x = rand_uniform(rng, {1, 2, h, w});
                    auto [wins, rec] = window_partition(x, win, win);
                    exact = bit_equal(window_merge(wins, rec), x);
                }
        out << "    window roundtrip over [1,40]^2 x {4,7,14}: " << (exact ? "bit-exact" : "MISMATCH")
            << "\n";
        ok = ok && exact;
    }

    // attention rows sum to 1
    {
        Rng rng(6);
        double worst = 0.0;
        for (int i = 0; i < 5; ++i) {
            LsaeT<Tensor> p = detail::make_lsae(rng, 4, 4, 0);
            randomize_bn(rng, p.qk->bn);
            randomize_bn(rng, p.v.bn);
            Tensor x = rand_uniform(rng, {1, 4, 9, 6}, -2.0, 2.0);
            std::vector<double> rows;
            (void)oracle::lsae_oracle(x, p, &rows);
            (void)lsae_forward(x, p, Mode::Infer);
            for (double r : rows) worst = std::max(worst, std::fabs(r - 1.0));
        }
        out << "    attention row sums: worst |sum - 1| = " << worst << "\n";
        ok = ok && worst < 1e-6;
    }

    // split/concat roundtrip
    {
        Rng rng(7);
        bool exact = true;
        for (int i = 0; i < 10; ++i) {
            const int64_t c = rng.uniform_int(2, 32);
            Tensor x = rand_uniform(rng, {2, c, 3, 5});
            const int64_t a = rng.uniform_int(1, c - 1);
            exact = exact && bit_equal(concat_channels(split_channels(x, {a, c - a})), x);
        }
        out << "    split/concat roundtrip: " << (exact ? "bit-exact" : "MISMATCH") << "\n";
        ok = ok && exact;
    }

    // GPE residual identity with zeroed branches
    {
        Rng rng(8);
        GpeBlockT<Tensor> blk = detail::make_gpe(rng, ModelConfig::micro(), 8, 4);
        auto zero = [](const std::string&, Tensor& t) {
            for (int64_t i = 0; i < t.numel(); ++i) t[i] = 0.0;
        };
        detail::visit_gpe(blk, "z", zero, [](const std::string&, Tensor&) {});
        Tensor x = rand_uniform(rng, {2, 8, 6, 6});
        const double diff = max_abs_diff(gpe_block_forward(x, blk, Mode::Infer), x);
        out << "    zeroed GPE block vs identity: max abs err " << diff << "\n";
        ok = ok && diff < 1e-10;
    }
    return ok;
}

// --- criterion 6: closed-form complexity --------------------------------------

bool criterion_closed_forms(std::ostream& out) {
    bool ok = true;
    const ClosedForm g64 = gpm_closed_form(64, 7, 14, 14, 7, 64);
    out << "    gpm params(C=64, K=7) = " << g64.params << " (expected 19399)\n";
    ok = ok && g64.params == 19399;

    const ClosedForm w64 = wmhsa_closed_form(64, 196, 49);
    out << "    wmhsa params(C=64) = " << w64.params << " (expected 16640)\n";
    ok = ok && w64.params == 16640;

    ModelConfig cfg = ModelConfig::preset(Variant::S);
    HGpeModel m = build_model(cfg, 1);
    ComplexityReport r = analyze(m, 224, 224);
    const int64_t feat[4] = {112, 56, 28, 14};
    for (int s = 2; s <= 4; ++s) {
        const int c = cfg.out_channels[static_cast<size_t>(s - 1)];
        const int win = stage_window_size(s, cfg);
        const ClosedForm g = gpm_closed_form(c, cfg.gig_kernel, static_cast<int>(feat[s - 1]),
                                             static_cast<int>(feat[s - 1]), win, c);
        const ClosedForm w =
            wmhsa_closed_form(c, feat[s - 1] * feat[s - 1], static_cast<int64_t>(win) * win);
        const int64_t counted = gpm_counted_macs(r, s);
        const double ratio = static_cast<double>(counted) / g.flops;
        const bool lt = g.flops < w.flops;
        const bool factor2 = ratio > 0.5 && ratio < 2.0;
        out << "    stage " << s << ": gpm " << g.flops << " < wmhsa " << w.flops << " -> "
            << (lt ? "ok" : "VIOLATED") << "; counted/closed-form = " << ratio << " -> "
            << (factor2 ? "within 2x" : "OUTSIDE 2x") << "\n";
        ok = ok && lt && factor2;
    }
    return ok;
}

// --- criterion 7: trainability -------------------------------------------------

bool criterion_training(std::ostream& out) {
    TrainToyOptions opt;  // 300 steps, lr 1e-3, adamw, seed 1
    bool ok = true;

    // determinism probe (short)
    {
        TrainToyOptions probe = opt;
        probe.steps = 20;
        TrainLog a = train_toy(ModelConfig::micro(), probe);
        TrainLog b = train_toy(ModelConfig::micro(), probe);
        bool same = a.final_train_accuracy == b.final_train_accuracy;
        for (size_t i = 0; i < a.steps.size() && same; ++i)
            same = a.steps[i].loss == b.steps[i].loss && a.steps[i].accuracy == b.steps[i].accuracy;
        out << "    determinism (20-step double run): " << (same ? "bit-identical" : "MISMATCH")
            << "\n";
        ok = ok && same;
    }

    TrainLog log = train_toy(ModelConfig::micro(), opt);
    out << "    final train accuracy after " << opt.steps << " steps (lr " << opt.lr << ", batch "
        << opt.batch << "): " << log.final_train_accuracy << "\n";
    ok = ok && log.final_train_accuracy >= 0.90;

    // 20-step moving-average loss must never increase (1e-9 headroom for
    // floating-point summation order only)
    std::vector<double> ma;
    for (size_t i = 0; i + 20 <= log.steps.size(); ++i) {
        double s = 0.0;
        for (size_t j = i; j < i + 20; ++j) s += log.steps[j].loss;
        ma.push_back(s / 20.0);
    }
    int violations = 0;
    double worst = 0.0;
    for (size_t i = 0; i + 1 < ma.size(); ++i)
        if (ma[i + 1] > ma[i] + 1e-9) {
            ++violations;
            worst = std::max(worst, ma[i + 1] - ma[i]);
        }
    out << "    20-step moving-average loss: " << ma.size() << " windows, " << violations
        << " increase(s)" << (violations ? " (worst +" + std::to_string(worst) + ")" : "") << "\n";
    ok = ok && violations == 0;
    return ok;
}

// --- criterion 8: ablation structure -------------------------------------------

bool criterion_ablation(std::ostream& out) {
    bool ok = true;
    ModelConfig full = ModelConfig::micro();
    HGpeModel base = build_model(full, 1);
    const int64_t base_params = count_params(base).total_params(true);
    Rng rng(9);
    Tensor x = rand_uniform(rng, {1, 3, 32, 32}, 0.0, 1.0);

    struct Toggle {
        const char* name;
        bool ModelConfig::* flag;
    };
    for (const Toggle& t : {Toggle{"use_gig", &ModelConfig::use_gig},
                            Toggle{"use_lsae", &ModelConfig::use_lsae},
                            Toggle{"use_asa_cra", &ModelConfig::use_asa_cra}}) {
        ModelConfig off = full;
        off.*(t.flag) = false;
        HGpeModel m = build_model(off, 1);
        Tensor logits = model_forward(m, x, Mode::Infer);
        bool finite = true;
        for (int64_t i = 0; i < logits.numel(); ++i) finite = finite && std::isfinite(logits[i]);
        const int64_t params = count_params(m).total_params(true);
        const bool pass = finite && params < base_params;
        out << "    " << t.name << "=false: params " << params << " (full " << base_params
            << "), forward " << (finite ? "finite" : "NON-FINITE") << " -> "
            << (pass ? "ok" : "FAIL") << "\n";
        ok = ok && pass;
    }

    // GIG off equals the identity-GIG computation bit-exactly
    {
        GpmT<Tensor> p;
        p.gig = detail::make_gig(rng, 8, 7);
        p.lsae = detail::make_lsae(rng, 4, 4, 0);
        p.asa = detail::make_asa(rng, 4);
        p.irb = detail::make_irb(rng, 4, 4, 2, 1);
        p.cra = detail::make_cra(rng, 4);
        GpmT<Tensor> off;
        off.use_gig = false;
        off.lsae = p.lsae;
        off.asa = p.asa;
        off.irb = p.irb;
        off.cra = p.cra;
        Tensor in = rand_uniform(rng, {1, 8, 6, 6});
        Tensor got = gpm_forward(in, off, Mode::Infer);
        // identity-GIG: run the same branches on the raw split halves
        auto halves = split_channels(in, {4, 4});
        Tensor b0 = asa_forward(lsae_forward(halves[0], *off.lsae, Mode::Infer), *off.asa);
        Tensor b1 = cra_forward(irb_forward(halves[1], off.irb, Mode::Infer), *off.cra);
        std::vector<Tensor> branches = {b0, b1};
        const bool exact = bit_equal(got, concat_channels(branches));
        out << "    gig-off vs identity-gig computation: " << (exact ? "bit-exact" : "MISMATCH")
            << "\n";
        ok = ok && exact;
    }
    return ok;
}

// --- criterion 9: serialization --------------------------------------------------

bool criterion_serialization(std::ostream& out) {
    bool ok = true;
    const std::string wpath = "/tmp/hgpe_acceptance_weights.bin";
    ModelConfig cfg = ModelConfig::micro();
    HGpeModel a = build_model(cfg, 301);
    Rng rng(11);
    Tensor x = rand_uniform(rng, {2, 3, 32, 32}, 0.0, 1.0);
    Tensor la = model_forward(a, x, Mode::Infer);
    ParamStore sa = build_param_store(a);
    save_weights(wpath, sa);

    HGpeModel b = build_model(cfg, 999);
    ParamStore sb = build_param_store(b);
    load_weights(wpath, sb);
    Tensor lb = model_forward(b, x, Mode::Infer);
    const bool exact = bit_equal(la, lb);
    out << "    save -> load -> infer logits: " << (exact ? "bit-exact" : "MISMATCH") << "\n";
    std::remove(wpath.c_str());
    ok = ok && exact;

    bool cfg_ok = true;
    for (Variant v : {Variant::S, Variant::T, Variant::N})
        cfg_ok = cfg_ok && parse_config(serialize_config(ModelConfig::preset(v))) ==
                               ModelConfig::preset(v);
    cfg_ok = cfg_ok && parse_config(serialize_config(cfg)) == cfg;
    out << "    config roundtrip (S/T/N/micro): " << (cfg_ok ? "lossless" : "MISMATCH") << "\n";
    return ok && cfg_ok;
}

struct Criterion {
    int id;
    const char* name;
    std::function<bool(std::ostream&)> run;
};

}  // namespace

int main(int argc, char** argv) {
    int only = 0;
    for (int i = 1; i < argc; ++i)
        if (std::strcmp(argv[i], "--criterion") == 0 && i + 1 < argc) only = std::atoi(argv[i + 1]);

    const std::vector<Criterion> criteria = {
        {1, "parameter reproduction (published totals, +-10%)", criterion_params},
        {2, "FLOP reproduction at 224x224 (published totals, +-20%)", criterion_flops},
        {3, "pseudocode-oracle equivalence (< 1e-10, 20 instances)", criterion_oracles},
        {4, "gradient suite (eps 1e-4, rel err < 1e-5, 5 seeds)", criterion_gradients},
        {5, "structural invariants (windows, attention, split, residual)", criterion_structure},
        {6, "closed-form complexity checks", criterion_closed_forms},
        {7, "trainability on the synthetic task (>= 0.90 within 300 steps)", criterion_training},
        {8, "ablation structure (flag toggles)", criterion_ablation},
        {9, "serialization roundtrips", criterion_serialization},
    };

    bool all_ok = true;
    for (const auto& c : criteria) {
        if (only != 0 && c.id != only) continue;
        std::ostringstream detail;
        bool ok = false;
        try {
            ok = c.run(detail);
        } catch (const std::exception& e) {
            detail << "    exception: " << e.what() << "\n";
        }
        std::cout << "[" << c.id << "] " << c.name << ": " << (ok ? "PASS" : "FAIL") << "\n"
                  << detail.str();
        all_ok = all_ok && ok;
    }
    return all_ok ? 0 : 1;
}
