#include <doctest.h>

#include <numeric>

#include "nodekit/losses.hpp"
#include "oracles.hpp"

using namespace nodekit;

namespace {

ProbVolume probs(const VolumeGeometry &g, std::vector<double> v) { return ProbVolume(ScalarVolume(g, std::move(v))); }

ProbVolume random_pred(oracle::Gen &gen, const VolumeGeometry &g, double lo = 0.05, double hi = 0.95)
{
    return ProbVolume(oracle::random_probs(gen, g, lo, hi));
}

// Finite differences of `loss` against its analytic gradient at every voxel.
double worst_gradient_error(const ProbVolume &pred, const std::function<LossResult(const ProbVolume &)> &loss)
{
    const LossResult at = loss(pred);
    const auto f = [&](const std::vector<double> &x) { return loss(probs(pred.geometry(), x)).value; };
    double worst = 0.0;
    for (std::size_t n = 0; n < pred.size(); ++n) {
        const double fd = oracle::central_difference(f, pred.volume().values(), n, 1e-6);
        worst = std::max(worst, oracle::relative_error(fd, at.gradient[n], 1e-6));
    }
    return worst;
}

double direct_ce(const ProbVolume &p, const LabelVolume &g)
{
    double s = 0.0;
    for (std::size_t n = 0; n < p.size(); ++n) {
        const double q = std::min(std::max(p[n], 1e-7), 1.0 - 1e-7);
        s += g[n] ? -std::log(q) : -std::log(1.0 - q);
    }
    return s / static_cast<double>(p.size());
}

double direct_dice(const ProbVolume &p, const LabelVolume &g, const std::vector<double> &w, double eps)
{
    double a = 0.0, b = 0.0;
    for (std::size_t n = 0; n < p.size(); ++n) {
        a += w[n] * p[n] * g[n];
        b += w[n] * (p[n] + g[n]);
    }
    return 1.0 - (2.0 * a + eps) / (b + eps);
}

double direct_tversky(const ProbVolume &p, const LabelVolume &g, double alpha, double beta, double eps)
{
    double tp = 0.0, fp = 0.0, fn = 0.0;
    for (std::size_t n = 0; n < p.size(); ++n) {
        tp += p[n] * g[n];
        fp += p[n] * (1 - static_cast<double>(g[n]));
        fn += (1 - p[n]) * g[n];
    }
    return 1.0 - (tp + eps) / (tp + alpha * fp + beta * fn + eps);
}

double eq2(bool dilated, double p) { return dilated ? 1.0 : (p <= 0.25 ? 1.0 - p : 0.75); }

} // namespace

TEST_CASE("probability volumes reject values outside [0, 1]")
{
    const auto g = oracle::cube(2);
    CHECK_THROWS_AS(ProbVolume(ScalarVolume(g, 1.01)), Error);
    CHECK_THROWS_AS(ProbVolume(ScalarVolume(g, -0.01)), Error);
    CHECK_NOTHROW(ProbVolume(ScalarVolume(g, 1.0)));
}

TEST_CASE("cross-entropy values")
{
    oracle::Gen gen(1);
    const auto g = oracle::cube(5);
    const LabelVolume gt = oracle::random_mask(gen, g, 0.4);
    CHECK(cross_entropy(ProbVolume(to_scalar(gt)), gt).value <= 1e-6);
    CHECK(cross_entropy(ProbVolume(ScalarVolume(g, 0.5)), gt).value == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(cross_entropy(ProbVolume(ScalarVolume(g, 0.5)), LabelVolume(g)).value ==
          doctest::Approx(0.693147).epsilon(1e-6));
    for (int trial = 0; trial < 10; ++trial) {
        const ProbVolume p(oracle::random_probs(gen, g));
        CHECK(cross_entropy(p, gt).value == doctest::Approx(direct_ce(p, gt)).epsilon(1e-12));
    }
}

TEST_CASE("soft Dice values")
{
    oracle::Gen gen(2);
    const auto g = oracle::cube(5);
    const LabelVolume gt = oracle::random_mask(gen, g, 0.3);
    CHECK(soft_dice_loss(ProbVolume(to_scalar(gt)), gt, nullptr).value <= 1e-5);
    CHECK(soft_dice_loss(ProbVolume(ScalarVolume(g, 0.0)), gt, nullptr).value == doctest::Approx(1.0).epsilon(1e-5));
    for (int trial = 0; trial < 10; ++trial) {
        const ProbVolume p(oracle::random_probs(gen, g));
        const std::vector<double> ones(p.size(), 1.0);
        CHECK(soft_dice_loss(p, gt, nullptr).value == doctest::Approx(direct_dice(p, gt, ones, 1e-5)).epsilon(1e-12));
        const ScalarVolume w = oracle::random_probs(gen, g, 0.75, 1.0);
        const WeightMap wm{w};
        CHECK(soft_dice_loss(p, gt, &wm).value == doctest::Approx(direct_dice(p, gt, w.values(), 1e-5)).epsilon(1e-12));
    }
}

TEST_CASE("uniform Dice weights cancel")
{
    oracle::Gen gen(3);
    const auto g = oracle::cube(6);
    const LabelVolume gt = oracle::random_mask(gen, g, 0.3);
    const ProbVolume p(oracle::random_probs(gen, g));
    const double plain = soft_dice_loss(p, gt, nullptr, 0.0).value;
    for (double c : {0.3, 0.75, 2.0, 10.0}) {
        const WeightMap wm{ScalarVolume(g, c)};
        CHECK(soft_dice_loss(p, gt, &wm, 0.0).value == doctest::Approx(plain).epsilon(1e-12));
        CHECK(soft_dice_loss(p, gt, &wm).value == doctest::Approx(soft_dice_loss(p, gt, nullptr).value).epsilon(1e-5));
    }
}

TEST_CASE("Tversky values")
{
    oracle::Gen gen(4);
    const auto g = oracle::cube(5);
    const LabelVolume gt = oracle::random_mask(gen, g, 0.3);
    CHECK(tversky_loss(ProbVolume(to_scalar(gt)), gt, 0.25, 0.75).value <= 1e-5);
    for (int trial = 0; trial < 10; ++trial) {
        const ProbVolume p(oracle::random_probs(gen, g));
        const double a = gen.uniform(0, 1), b = gen.uniform(0, 1);
        CHECK(tversky_loss(p, gt, a, b).value == doctest::Approx(direct_tversky(p, gt, a, b, 1e-5)).epsilon(1e-12));
    }
}

TEST_CASE("Tversky with alpha = beta = 0.5 is soft Dice")
{
    oracle::Gen gen(5);
    for (int trial = 0; trial < 100; ++trial) {
        const auto g = oracle::cube(gen.integer(3, 8));
        const LabelVolume gt = oracle::random_mask(gen, g, gen.uniform(0.05, 0.6));
        const ProbVolume p(oracle::random_probs(gen, g));
        CHECK(std::abs(tversky_loss(p, gt, 0.5, 0.5).value - soft_dice_loss(p, gt, nullptr).value) <= 1e-6);
    }
}

TEST_CASE("false positives cost less with alpha 0.25 than with alpha 0.75")
{
    const auto g = oracle::cube(4);
    LabelVolume gt(g);
    std::vector<double> p(g.voxel_count(), 0.0);
    for (std::size_t n = 0; n < 8; ++n) {
        gt[n] = 1;
        p[n] = 1.0;
    }
    for (std::size_t n = 8; n < 14; ++n)
        p[n] = 0.7;
    const ProbVolume pred = probs(g, p);
    const double low = tversky_loss(pred, gt, 0.25, 0.75).value;
    const double high = tversky_loss(pred, gt, 0.75, 0.25).value;
    CHECK(low < high);
    CHECK(low == doctest::Approx(1.0 - (8 + 1e-5) / (8 + 0.25 * 4.2 + 1e-5)));
}

TEST_CASE("weight map branches")
{
    const auto g = oracle::cube(11);
    LabelVolume gt(g);
    gt.at(5, 5, 5) = 1;
    ScalarVolume pa(g, 0.1);
    pa.at(0, 0, 0) = 0.6;
    pa.at(5, 5, 5) = 0.9;
    pa.at(5, 5, 7) = 0.9;
    const WeightMap w = pa_weight_map(gt, pa);
    CHECK(w.weights.at(5, 5, 5) == 1.0);
    CHECK(w.weights.at(5, 5, 7) == 1.0);
    CHECK(w.weights.at(1, 1, 1) == doctest::Approx(0.90));
    CHECK(w.weights.at(0, 0, 0) == 0.75);
    std::size_t ones = 0;
    for (std::size_t n = 0; n < w.weights.size(); ++n)
        ones += w.weights[n] == 1.0;
    CHECK(ones == 33);
}

TEST_CASE("weight map on the full (g, p) grid")
{
    const auto g = VolumeGeometry::make({11, 2, 1});
    LabelVolume gt(g);
    ScalarVolume pa(g);
    // column j = 0 holds the dilated case by being ground truth itself
    for (int i = 0; i < 11; ++i) {
        gt.at(i, 0, 0) = 1;
        pa.at(i, 0, 0) = pa.at(i, 1, 0) = i / 10.0;
    }
    LossConfig cfg;
    cfg.dilation_radius_vox = 0;
    const WeightMap w = pa_weight_map(gt, pa, cfg);
    for (int i = 0; i < 11; ++i) {
        CHECK(w.weights.at(i, 0, 0) == eq2(true, i / 10.0));
        CHECK(w.weights.at(i, 1, 0) == eq2(false, i / 10.0));
    }
}

TEST_CASE("weight map range and monotonicity")
{
    oracle::Gen gen(6);
    const auto g = oracle::cube(8);
    const LabelVolume gt = oracle::random_mask(gen, g, 0.02);
    const ScalarVolume pa = oracle::random_probs(gen, g);
    const WeightMap w = pa_weight_map(gt, pa);
    const LabelVolume dil = oracle::brute_dilate(gt, 2);
    for (std::size_t n = 0; n < pa.size(); ++n) {
        CHECK((w.weights[n] >= 0.75 && w.weights[n] <= 1.0));
        CHECK(w.weights[n] == eq2(dil[n] != 0, pa[n]));
    }
    double last = 1.0;
    for (double p = 0.0; p <= 1.0; p += 0.01) {
        const double v = eq2(false, p);
        ScalarVolume one(oracle::cube(1), p);
        const double got = pa_weight_map(LabelVolume(oracle::cube(1)), one).weights[0];
        CHECK(got == v);
        CHECK(got <= last);
        last = got;
    }
}

TEST_CASE("weight map errors")
{
    const auto g = oracle::cube(3);
    CHECK_THROWS_AS(pa_weight_map(LabelVolume(g), ScalarVolume(g, 1.5)), Error);
    CHECK_THROWS_AS(pa_weight_map(LabelVolume(g), ScalarVolume(oracle::cube(4), 0.5)), Error);
    CHECK_THROWS_AS(pa_weight_map(LabelVolume(g, 2u), ScalarVolume(g, 0.5)), Error);
}

TEST_CASE("combined loss")
{
    oracle::Gen gen(7);
    const auto g = oracle::cube(6);
    const LabelVolume gt = oracle::random_mask(gen, g, 0.3);
    const ScalarVolume pa = oracle::random_probs(gen, g);
    CHECK(combined_loss(ProbVolume(to_scalar(gt)), gt, &pa).value <= 1e-5);
    const ProbVolume p = random_pred(gen, g);
    LossConfig ce_only;
    ce_only.lambda_ce = 1.0;
    ce_only.lambda_dice = ce_only.lambda_tversky = 0.0;
    CHECK(combined_loss(p, gt, &pa, ce_only).value == cross_entropy(p, gt).value);

    const WeightMap w = pa_weight_map(gt, pa);
    const double want = 0.25 * direct_ce(p, gt) + 0.25 * direct_dice(p, gt, w.weights.values(), 1e-5) +
                        0.5 * direct_tversky(p, gt, 0.25, 0.75, 1e-5);
    CHECK(combined_loss(p, gt, &pa).value == doctest::Approx(want).epsilon(1e-12));
    const std::vector<double> ones(p.size(), 1.0);
    const double plain = 0.25 * direct_ce(p, gt) + 0.25 * direct_dice(p, gt, ones, 1e-5) +
                         0.5 * direct_tversky(p, gt, 0.25, 0.75, 1e-5);
    CHECK(combined_loss(p, gt, nullptr).value == doctest::Approx(plain).epsilon(1e-12));
}

TEST_CASE("losses are non-negative")
{
    oracle::Gen gen(8);
    for (int trial = 0; trial < 30; ++trial) {
        const auto g = oracle::cube(4);
        const LabelVolume gt = oracle::random_mask(gen, g, gen.uniform(0, 0.5));
        const ProbVolume p(oracle::random_probs(gen, g));
        const ScalarVolume pa = oracle::random_probs(gen, g);
        CHECK(cross_entropy(p, gt).value >= 0.0);
        CHECK(soft_dice_loss(p, gt, nullptr).value >= 0.0);
        CHECK(tversky_loss(p, gt, 0.25, 0.75).value >= 0.0);
        CHECK(combined_loss(p, gt, &pa).value >= 0.0);
    }
}

TEST_CASE("combined loss ignores voxel order")
{
    oracle::Gen gen(9);
    const auto g = VolumeGeometry::make({60, 1, 1});
    const LabelVolume gt = oracle::random_mask(gen, g, 0.3);
    const ProbVolume p(oracle::random_probs(gen, g));
    const ScalarVolume pa = oracle::random_probs(gen, g);
    std::vector<std::size_t> perm(60);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), gen.rng);
    LabelVolume gt2(g);
    ScalarVolume p2(g), pa2(g);
    for (std::size_t n = 0; n < 60; ++n) {
        gt2[n] = gt[perm[n]];
        p2[n] = p[perm[n]];
        pa2[n] = pa[perm[n]];
    }
    // radius 0 keeps the dilation independent of neighbourhoods
    LossConfig cfg;
    cfg.dilation_radius_vox = 0;
    CHECK(combined_loss(ProbVolume(p2), gt2, &pa2, cfg).value == doctest::Approx(combined_loss(p, gt, &pa, cfg).value).epsilon(1e-10));
}

TEST_CASE("gradients match central differences")
{
    oracle::Gen gen(10);
    const auto g = oracle::cube(6);
    for (int trial = 0; trial < 5; ++trial) {
        const LabelVolume gt = oracle::random_mask(gen, g, 0.3);
        const ScalarVolume pa = oracle::random_probs(gen, g);
        const WeightMap w = pa_weight_map(gt, pa);
        const ProbVolume p = random_pred(gen, g);
        CHECK(worst_gradient_error(p, [&](const ProbVolume &q) { return cross_entropy(q, gt); }) < 1e-4);
        CHECK(worst_gradient_error(p, [&](const ProbVolume &q) { return soft_dice_loss(q, gt, nullptr); }) < 1e-4);
        CHECK(worst_gradient_error(p, [&](const ProbVolume &q) { return soft_dice_loss(q, gt, &w); }) < 1e-4);
        CHECK(worst_gradient_error(p, [&](const ProbVolume &q) { return tversky_loss(q, gt, 0.25, 0.75); }) < 1e-4);
        CHECK(worst_gradient_error(p, [&](const ProbVolume &q) { return combined_loss(q, gt, &pa); }) < 1e-4);
    }
}

TEST_CASE("cross-entropy gradient vanishes where the prediction is clamped")
{
    const auto g = oracle::cube(2);
    LabelVolume gt(g);
    gt[0] = 1;
    std::vector<double> p(8, 0.5);
    p[0] = 1.0;
    p[1] = 0.0;
    const LossResult r = cross_entropy(probs(g, p), gt);
    CHECK(r.gradient[0] == 0.0);
    CHECK(r.gradient[1] == 0.0);
    CHECK(r.gradient[2] == doctest::Approx(1.0 / (0.5 * 8)));
}

TEST_CASE("deep supervision weights")
{
    const auto w = deep_supervision_weights(3);
    CHECK(w[0] == doctest::Approx(4.0 / 7));
    CHECK(w[1] == doctest::Approx(2.0 / 7));
    CHECK(w[2] == doctest::Approx(1.0 / 7));
    CHECK(aggregate_deep_supervision({0.7, 0.2, 0.9}) == doctest::Approx((4 * 0.7 + 2 * 0.2 + 0.9) / 7));
    CHECK(aggregate_deep_supervision({0.3}) == 0.3);
    CHECK_THROWS_AS(deep_supervision_weights(0), Error);
}

TEST_CASE("deep supervision loss")
{
    oracle::Gen gen(11);
    const auto g = oracle::cube(8);
    const LabelVolume gt = oracle::random_mask(gen, g, 0.3);
    const ScalarVolume pa = oracle::random_probs(gen, g);
    const ProbVolume p = random_pred(gen, g);
    const double single = combined_loss(p, gt, &pa).value;
    CHECK(deep_supervision_loss({p}, {gt}, {pa}) == doctest::Approx(single).epsilon(1e-14));
    CHECK(deep_supervision_loss({p, p}, {gt, gt}, {pa, pa}) == doctest::Approx(single).epsilon(1e-14));
    CHECK(deep_supervision_loss({p}, gt, &pa) == doctest::Approx(single).epsilon(1e-14));

    const auto g1 = downsampled_geometry(g, 2), g2 = downsampled_geometry(g, 4);
    const ProbVolume p1 = random_pred(gen, g1), p2 = random_pred(gen, g2);
    const LabelVolume gt1 = resample(gt, g1, Interpolation::nearest), gt2 = resample(gt, g2, Interpolation::nearest);
    ScalarVolume pa1 = resample(pa, g1, Interpolation::linear), pa2 = resample(pa, g2, Interpolation::linear);
    const double a = combined_loss(p, gt, &pa).value, b = combined_loss(p1, gt1, &pa1).value,
                 c = combined_loss(p2, gt2, &pa2).value;
    CHECK(deep_supervision_loss({p, p1, p2}, {gt, gt1, gt2}, {pa, pa1, pa2}) ==
          doctest::Approx((4 * a + 2 * b + c) / 7).epsilon(1e-12));
    CHECK(deep_supervision_loss({p, p1, p2}, gt, &pa) == doctest::Approx((4 * a + 2 * b + c) / 7).epsilon(1e-12));
    CHECK(deep_supervision_loss({p, p1}, {gt, gt1}, {}) ==
          doctest::Approx((2 * combined_loss(p, gt, nullptr).value + combined_loss(p1, gt1, nullptr).value) / 3));

    const std::vector<LabelVolume> one_gt{gt};
    CHECK_THROWS_AS(deep_supervision_loss({p, p1}, one_gt, std::vector<ScalarVolume>{}), Error);
    CHECK_THROWS_AS(deep_supervision_loss({p, p1}, {gt, gt1}, {pa}), Error);
}

TEST_CASE("misaligned inputs are geometry errors")
{
    const ProbVolume p(ScalarVolume(oracle::cube(3), 0.5));
    const LabelVolume gt(oracle::cube(4));
    for (auto f : {+[](const ProbVolume &a, const LabelVolume &b) { cross_entropy(a, b); },
                   +[](const ProbVolume &a, const LabelVolume &b) { soft_dice_loss(a, b, nullptr); },
                   +[](const ProbVolume &a, const LabelVolume &b) { tversky_loss(a, b, 0.5, 0.5); }}) {
        try {
            f(p, gt);
            FAIL("misaligned accepted");
        } catch (const Error &e) {
            CHECK(e.code() == ErrorCode::geometry);
        }
    }
}
