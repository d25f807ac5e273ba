#include <doctest.h>

#include "hgpe/ops.hpp"
#include "test_util.hpp"

using namespace hgpe;
using namespace hgpe::test;

namespace {

// Independent brute-force convolution oracle: direct sextuple loop over the
// output, kept free of the production kernel's indexing shortcuts.
Tensor conv2d_oracle(const Tensor& x, const Tensor& w, const Tensor* bias, int sh, int sw, int ph,
                     int pw, int groups) {
    const int64_t n = x.dim(0), h = x.dim(2), wd = x.dim(3);
    const int64_t cout = w.dim(0), cinpg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const int64_t oh = (h + 2 * ph - kh) / sh + 1;
    const int64_t ow = (wd + 2 * pw - kw) / sw + 1;
    const int64_t copg = cout / groups;
    Tensor out({n, cout, oh, ow});
    for (int64_t in = 0; in < n; ++in)
        for (int64_t co = 0; co < cout; ++co)
            for (int64_t y = 0; y < oh; ++y)
                for (int64_t xo = 0; xo < ow; ++xo) {
                    double acc = bias ? (*bias)[co] : 0.0;
                    for (int64_t ci = 0; ci < cinpg; ++ci)
                        for (int64_t ky = 0; ky < kh; ++ky)
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                const int64_t iy = y * sh - ph + ky;
                                const int64_t ix = xo * sw - pw + kx;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                                const int64_t xc = (co / copg) * cinpg + ci;
                                acc += x.at4(in, xc, iy, ix) * w.at4(co, ci, ky, kx);
                            }
                    out.at4(in, co, y, xo) = acc;
                }
    return out;
}

Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
    const int64_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1), n = b.dim(b.rank() - 1);
    const int64_t batch = a.numel() / (m * k);
    std::vector<int64_t> od(a.dims().begin(), a.dims().end() - 2);
    od.push_back(m);
    od.push_back(n);
    Tensor out(od);
    for (int64_t bi = 0; bi < batch; ++bi)
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int64_t kk = 0; kk < k; ++kk)
                    acc += a[bi * m * k + i * k + kk] * b[bi * k * n + kk * n + j];
                out[bi * m * n + i * n + j] = acc;
            }
    return out;
}

}  // namespace

TEST_SUITE_BEGIN("tensor-core");

TEST_CASE("conv2d identity kernel") {
    Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor w = Tensor::full({1, 1, 1, 1}, 1.0);
    Tensor y = conv2d(x, w);
    CHECK(y.dims() == std::vector<int64_t>{1, 1, 3, 3});
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(1.0));
}

TEST_CASE("depthwise conv decouples channels") {
    Rng rng(42);
    Tensor x = rand_uniform(rng, {1, 2, 4, 4});
    Tensor w = rand_uniform(rng, {2, 1, 3, 3});
    Tensor base = conv2d(x, w, 1, 1, 2);

    // Perturb channel 1; channel-0 output must not move.
    Tensor x2 = x;
    for (int64_t h = 0; h < 4; ++h)
        for (int64_t v = 0; v < 4; ++v) x2.at4(0, 1, h, v) += 3.0;
    Tensor moved = conv2d(x2, w, 1, 1, 2);
    for (int64_t h = 0; h < 4; ++h)
        for (int64_t v = 0; v < 4; ++v) {
            CHECK(base.at4(0, 0, h, v) == moved.at4(0, 0, h, v));
            CHECK(base.at4(0, 1, h, v) != moved.at4(0, 1, h, v));
        }
}

TEST_CASE("conv2d vs brute-force oracle") {
    Rng rng(7);
    Tensor x = rand_uniform(rng, {1, 4, 5, 5});
    Tensor w = rand_uniform(rng, {8, 4, 3, 3});
    Tensor got = conv2d(x, w, 2, 1);
    Tensor want = conv2d_oracle(x, w, nullptr, 2, 2, 1, 1, 1);
    CHECK(max_abs_diff(got, want) < 1e-12);

    SUBCASE("with bias, asymmetric padding, groups") {
        Tensor xb = rand_uniform(rng, {2, 6, 7, 5});
        Tensor wb = rand_uniform(rng, {9, 2, 3, 1});
        Tensor bias = rand_uniform(rng, {9});
        Tensor g = conv2d(xb, wb, &bias, 1, 2, 1, 0, 3);
        Tensor o = conv2d_oracle(xb, wb, &bias, 1, 2, 1, 0, 3);
        CHECK(max_abs_diff(g, o) < 1e-12);
    }
}

TEST_CASE("grouped conv equals concatenation of independent convs") {
    Rng rng(11);
    for (int groups : {2, 4}) {
        Tensor x = rand_uniform(rng, {2, 8, 5, 5});
        Tensor w = rand_uniform(rng, {8, 8 / groups, 3, 3});
        Tensor grouped = conv2d(x, w, 1, 1, groups);

        auto xs = split_channels(x, std::vector<int64_t>(groups, 8 / groups));
        auto ws = split_axis(w, std::vector<int64_t>(groups, 8 / groups), 0);
        std::vector<Tensor> outs;
        for (int g = 0; g < groups; ++g) outs.push_back(conv2d(xs[g], ws[g], 1, 1, 1));
        CHECK(bit_equal(grouped, concat_channels(outs)));
    }
}

TEST_CASE("conv2d error naming") {
    Tensor x({1, 5, 4, 4});
    Tensor w({4, 2, 3, 3});
    CHECK_THROWS_WITH_AS(conv2d(x, w, 1, 1, 2),
                         doctest::Contains("input channel axis (Cin=5) not divisible"),
                         std::invalid_argument);
    Tensor w2({4, 3, 3, 3});
    CHECK_THROWS_AS(conv2d(x, w2, 1, 1, 1), std::invalid_argument);
}

TEST_CASE("strip_pool basics") {
    Tensor c = Tensor::full({2, 3, 4, 5}, 2.5);
    Tensor sh = strip_pool(c, StripAxis::Height);
    CHECK(sh.dims() == std::vector<int64_t>{2, 3, 4, 1});
    for (int64_t i = 0; i < sh.numel(); ++i) CHECK(sh[i] == doctest::Approx(2.5));

    Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor h = strip_pool(x, StripAxis::Height);
    CHECK(h.at4(0, 0, 0, 0) == doctest::Approx(1.5));
    CHECK(h.at4(0, 0, 1, 0) == doctest::Approx(3.5));
    Tensor w = strip_pool(x, StripAxis::Width);
    CHECK(w.at4(0, 0, 0, 0) == doctest::Approx(2.0));
    CHECK(w.at4(0, 0, 0, 1) == doctest::Approx(3.0));

    Tensor col({1, 1, 3, 1}, {1, 2, 3});
    CHECK(bit_equal(strip_pool(col, StripAxis::Height), col));

    CHECK_THROWS_AS(strip_pool(Tensor({2, 3}), StripAxis::Height), std::invalid_argument);
}

TEST_CASE("softmax_lastdim") {
    Tensor z({1, 4});
    Tensor s = softmax_lastdim(z);
    for (int64_t i = 0; i < 4; ++i) CHECK(s[i] == doctest::Approx(0.25));

    Tensor r({3}, {7.7, 7.7, 7.7});
    Tensor sr = softmax_lastdim(r);
    for (int64_t i = 0; i < 3; ++i) CHECK(sr[i] == doctest::Approx(1.0 / 3.0));

    Tensor big({2}, {1000.0, 0.0});
    Tensor sb = softmax_lastdim(big);
    CHECK(std::fabs(sb[0] - 1.0) < 1e-12);
    CHECK(std::fabs(sb[1]) < 1e-12);

    SUBCASE("rows sum to one and shift invariance") {
        Rng rng(3);
        Tensor x = rand_uniform(rng, {4, 6, 5}, -3.0, 3.0);
        Tensor sx = softmax_lastdim(x);
        for (int64_t r2 = 0; r2 < 24; ++r2) {
            double sum = 0.0;
            for (int64_t i = 0; i < 5; ++i) sum += sx[r2 * 5 + i];
            CHECK(std::fabs(sum - 1.0) < 1e-6);
        }
        Tensor shifted = x;
        for (int64_t i = 0; i < x.numel(); ++i) shifted[i] += 17.25;
        CHECK(max_abs_diff(softmax_lastdim(shifted), sx) < 1e-12);
    }
}

TEST_CASE("activation kink values") {
    Tensor x({7}, {0.0, 3.0, -3.0, 1.0, 6.5, -0.5, 2.0});
    Tensor h = activation(x, Act::HSwish);
    CHECK(h[0] == doctest::Approx(0.0));
    CHECK(h[1] == doctest::Approx(3.0));
    CHECK(h[2] == doctest::Approx(0.0));
    CHECK(h[3] == doctest::Approx(2.0 / 3.0));

    CHECK(activation(Tensor({1}, {0.0}), Act::Sigmoid)[0] == doctest::Approx(0.5));
    Tensor r = activation(x, Act::Relu6);
    CHECK(r[4] == doctest::Approx(6.0));
    CHECK(r[5] == doctest::Approx(0.0));
    Tensor si = activation(Tensor({1}, {0.0}), Act::Silu);
    CHECK(si[0] == doctest::Approx(0.0));
}

TEST_CASE("layer norm of constant channel vector is affine shift") {
    Tensor x = Tensor::full({2, 5, 3, 3}, 4.2);
    Tensor scale = Tensor::full({5}, 1.0);
    Tensor shift({5});
    Tensor y = layer_norm(x, scale, shift);
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(std::fabs(y[i]) < 1e-12);
}

TEST_CASE("group norm with one group matches per-sample whole-tensor normalization") {
    Rng rng(5);
    Tensor x = rand_uniform(rng, {2, 6, 3, 3});
    Tensor scale = Tensor::full({6}, 1.0);
    Tensor shift({6});
    Tensor got = group_norm(x, scale, shift, 1);

    const int64_t chw = 6 * 9;
    for (int64_t n = 0; n < 2; ++n) {
        double mean = 0.0, var = 0.0;
        for (int64_t i = 0; i < chw; ++i) mean += x[n * chw + i];
        mean /= static_cast<double>(chw);
        for (int64_t i = 0; i < chw; ++i) {
            const double d = x[n * chw + i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(chw);
        for (int64_t i = 0; i < chw; ++i) {
            const double want = (x[n * chw + i] - mean) / std::sqrt(var + 1e-5);
            CHECK(got[n * chw + i] == doctest::Approx(want).epsilon(1e-10));
        }
    }
}

TEST_CASE("batch norm training mode whitens per channel") {
    Rng rng(9);
    Tensor x = rand_uniform(rng, {4, 3, 2, 2}, -2.0, 5.0);
    Tensor scale = Tensor::full({3}, 1.0);
    Tensor shift({3});
    Tensor rm({3}), rv = Tensor::full({3}, 1.0);
    Tensor y = batch_norm(x, scale, shift, rm, rv, true);

    for (int64_t c = 0; c < 3; ++c) {
        double mean = 0.0, var = 0.0;
        for (int64_t n = 0; n < 4; ++n)
            for (int64_t i = 0; i < 4; ++i) mean += y.data()[(n * 3 + c) * 4 + i];
        mean /= 16.0;
        for (int64_t n = 0; n < 4; ++n)
            for (int64_t i = 0; i < 4; ++i) {
                const double d = y.data()[(n * 3 + c) * 4 + i] - mean;
                var += d * d;
            }
        var /= 16.0;
        CHECK(std::fabs(mean) < 1e-6);
        CHECK(std::fabs(var - 1.0) < 1e-5);
        CHECK(rm[c] != 0.0);  // running stats updated
    }

    SUBCASE("zero-variance slice stays finite through eps") {
        Tensor flat = Tensor::full({2, 1, 2, 2}, 3.0);
        Tensor s1 = Tensor::full({1}, 1.0), s0({1});
        Tensor m({1}), v = Tensor::full({1}, 1.0);
        Tensor out = batch_norm(flat, s1, s0, m, v, true);
        for (int64_t i = 0; i < out.numel(); ++i) CHECK(std::isfinite(out[i]));
    }
}

TEST_CASE("normalize dispatcher matches the dedicated entry points") {
    Rng rng(13);
    Tensor x = rand_uniform(rng, {2, 4, 3, 3});
    Tensor scale = rand_uniform(rng, {4}, 0.5, 1.5);
    Tensor shift = rand_uniform(rng, {4}, -0.2, 0.2);
    CHECK(bit_equal(normalize(x, NormKind::Layer, scale, shift), layer_norm(x, scale, shift)));
    CHECK(bit_equal(normalize(x, NormKind::Group, scale, shift,
                              static_cast<BnStateT<double>*>(nullptr), false, 2),
                    group_norm(x, scale, shift, 2)));
    BnStateT<double> st{Tensor({4}), Tensor::full({4}, 1.0)};
    BnStateT<double> st2 = st;
    Tensor a = normalize(x, NormKind::Batch, scale, shift, &st, true);
    Tensor b = batch_norm(x, scale, shift, st2.running_mean, st2.running_var, true);
    CHECK(bit_equal(a, b));
    CHECK(bit_equal(st.running_mean, st2.running_mean));
}

TEST_CASE("window partition shapes and padding") {
    Rng rng(21);
    Tensor x = rand_uniform(rng, {1, 2, 28, 28});
    auto [win, rec] = window_partition(x, 14, 14);
    CHECK(win.dims() == std::vector<int64_t>{4, 2, 14, 14});
    CHECK(rec.pad_h == 0);
    CHECK(rec.pad_w == 0);

    Tensor single = rand_uniform(rng, {1, 2, 14, 14});
    auto [w1, r1] = window_partition(single, 14, 14);
    CHECK(bit_equal(w1, single));
    CHECK(bit_equal(window_merge(w1, r1), single));

    Tensor odd = rand_uniform(rng, {1, 3, 15, 15});
    auto [w2, r2] = window_partition(odd, 14, 14);
    CHECK(r2.pad_h == 13);
    CHECK(w2.dim(0) == 4);
    CHECK(bit_equal(window_merge(w2, r2), odd));
}

TEST_CASE("window roundtrip is bit-exact on random shapes") {
    Rng rng(22);
    for (auto [h, w, win] : {std::tuple{15, 17, 7}, std::tuple{40, 1, 4}, std::tuple{5, 33, 14}}) {
        Tensor x = rand_uniform(rng, {2, 3, h, w});
        auto [wins, rec] = window_partition(x, win, win);
        CHECK(bit_equal(window_merge(wins, rec), x));
    }

    SUBCASE("inconsistent pad record throws") {
        Tensor x = rand_uniform(rng, {1, 2, 8, 8});
        auto [wins, rec] = window_partition(x, 4, 4);
        rec.h = 9;
        CHECK_THROWS_AS(window_merge(wins, rec), std::invalid_argument);
    }
}

TEST_CASE("split and concat channels") {
    Rng rng(31);
    Tensor x = rand_uniform(rng, {2, 64, 3, 3});
    auto halves = split_channels(x, {32, 32});
    CHECK(halves[0].dims() == std::vector<int64_t>{2, 32, 3, 3});
    CHECK(bit_equal(concat_channels(halves), x));

    auto whole = split_channels(x, {64});
    CHECK(bit_equal(whole[0], x));

    Tensor y = rand_uniform(rng, {1, 16, 2, 2});
    auto parts = split_channels(y, {5, 11});
    CHECK(bit_equal(concat_channels(parts), y));

    CHECK_THROWS_WITH_AS(split_channels(y, {5, 10}), doctest::Contains("sizes sum to 15"),
                         std::invalid_argument);
}

TEST_CASE("matmul_batched") {
    Rng rng(41);
    Tensor id({1, 3, 3});
    for (int i = 0; i < 3; ++i) id[i * 3 + i] = 1.0;
    Tensor x = rand_uniform(rng, {1, 3, 3});
    CHECK(max_abs_diff(matmul_batched(id, x), x) < 1e-15);

    Tensor a = rand_uniform(rng, {1, 2, 3});
    Tensor b = rand_uniform(rng, {1, 3, 2});
    CHECK(max_abs_diff(matmul_batched(a, b), matmul_oracle(a, b)) < 1e-12);

    Tensor z({2, 2, 3});
    Tensor anyb = rand_uniform(rng, {2, 3, 4});
    Tensor out = matmul_batched(z, anyb);
    for (int64_t i = 0; i < out.numel(); ++i) CHECK(out[i] == 0.0);

    CHECK_THROWS_AS(matmul_batched(a, rand_uniform(rng, {1, 4, 2})), std::invalid_argument);
}

TEST_CASE("pool_global_avg") {
    Tensor c = Tensor::full({2, 3, 4, 4}, -1.25);
    Tensor p = pool_global_avg(c);
    CHECK(p.dims() == std::vector<int64_t>{2, 3, 1, 1});
    for (int64_t i = 0; i < p.numel(); ++i) CHECK(p[i] == doctest::Approx(-1.25));

    Tensor x({1, 1, 2, 2}, {0, 2, 4, 6});
    CHECK(pool_global_avg(x)[0] == doctest::Approx(3.0));

    Rng rng(51);
    Tensor tiny = rand_uniform(rng, {2, 5, 1, 1});
    CHECK(bit_equal(pool_global_avg(tiny), tiny));
}

TEST_CASE("layout plumbing roundtrips") {
    Rng rng(61);
    Tensor x = rand_uniform(rng, {2, 5, 3, 4});
    Tensor tok = nchw_to_tokens(x);
    CHECK(tok.dims() == std::vector<int64_t>{2, 12, 5});
    CHECK(bit_equal(tokens_to_nchw(tok, 3, 4), x));

    Tensor t = rand_uniform(rng, {3, 4, 6});
    CHECK(bit_equal(merge_heads(split_heads(t, 3), 3), t));
    CHECK(bit_equal(transpose_last2(transpose_last2(t)), t));
}

TEST_CASE("mul_bcast gating") {
    Rng rng(71);
    Tensor x = rand_uniform(rng, {2, 3, 4, 5});
    Tensor gh = rand_uniform(rng, {2, 3, 4, 1});
    Tensor gw = rand_uniform(rng, {2, 3, 1, 5});
    Tensor y = mul_bcast(mul_bcast(x, gh), gw);
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t h = 0; h < 4; ++h)
                for (int64_t w = 0; w < 5; ++w)
                    CHECK(y.at4(n, c, h, w) ==
                          doctest::Approx(x.at4(n, c, h, w) * gh.at4(n, c, h, 0) *
                                          gw.at4(n, c, 0, w)));
}

TEST_CASE("shape type invariants") {
    Shape s = Shape::nchw(2, 3, 4, 5);
    CHECK(s.numel() == 120);
    CHECK(s.str() == "[2,3,4,5]");
    CHECK_THROWS_AS(Shape(std::vector<int64_t>{}), std::invalid_argument);
    CHECK_THROWS_AS(Shape({2, 0, 3}), std::invalid_argument);
    CHECK_THROWS_AS(Shape({2, 3}, {Axis::Batch, Axis::Batch}), std::invalid_argument);
    CHECK_NOTHROW(Shape({2, 3}, {Axis::Any, Axis::Any}));

    CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
}

TEST_CASE("determinism: identical seeds produce bit-identical op outputs") {
    auto run = [] {
        Rng rng(123);
        Tensor x = rand_uniform(rng, {1, 4, 6, 6});
        Tensor w = rand_uniform(rng, {8, 4, 3, 3});
        return softmax_lastdim(conv2d(x, w, 2, 1));
    };
    CHECK(bit_equal(run(), run()));
}

TEST_CASE("finite checks reject non-finite op results") {
    Tensor x = Tensor::full({1, 1, 2, 2}, 1e308);
    Tensor w = Tensor::full({1, 1, 1, 1}, 1e308);
    CHECK_THROWS_AS(conv2d(x, w), std::runtime_error);
    runtime_checks() = false;
    CHECK_NOTHROW(conv2d(x, w));
    runtime_checks() = true;
}

TEST_SUITE_END();
