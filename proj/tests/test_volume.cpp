#include <doctest.h>

#include "nodekit/volume.hpp"
#include "oracles.hpp"

using namespace nodekit;

TEST_CASE("geometry invariants are enforced")
{
    CHECK_THROWS_AS(VolumeGeometry::make({0, 2, 2}), Error);
    CHECK_THROWS_AS(VolumeGeometry::make({2, 2, 2}, Vec3(1, 0, 1)), Error);
    Mat3 skew = Mat3::Identity();
    skew(0, 1) = 0.1;
    CHECK_THROWS_AS(VolumeGeometry::make({2, 2, 2}, Vec3::Ones(), Vec3::Zero(), skew), Error);
    const auto g = VolumeGeometry::make({2, 2, 2});
    CHECK_THROWS_AS(ScalarVolume(g, std::vector<double>(7, 0.0)), Error);
    std::vector<double> bad(8, 0.0);
    bad[3] = std::nan("");
    try {
        ScalarVolume v(g, bad);
        FAIL("non-finite sample accepted");
    } catch (const Error &e) {
        CHECK(e.code() == ErrorCode::data);
    }
}

TEST_CASE("index and physical coordinates are inverse")
{
    oracle::Gen gen(3);
    for (int trial = 0; trial < 20; ++trial) {
        const auto g = oracle::random_geometry(gen, {5, 6, 7});
        const Vec3 idx(gen.uniform(-2, 8), gen.uniform(-2, 8), gen.uniform(-2, 8));
        CHECK((g.to_index(g.to_physical(idx)) - idx).norm() < 1e-9);
        const Index3 u = g.unravel(g.linear(2, 3, 4));
        CHECK(u == Index3{2, 3, 4});
    }
}

TEST_CASE("alignment uses relative tolerance")
{
    const auto a = VolumeGeometry::make({4, 4, 4}, Vec3(0.7, 0.7, 2.5), Vec3(10, 20, 30));
    auto b = a;
    b.origin[0] *= 1.0 + 1e-7;
    CHECK(aligned(a, b));
    b.origin[0] = 10.1;
    CHECK_FALSE(aligned(a, b));
    CHECK_THROWS_AS(require_aligned(a, b, "test"), Error);
    auto c = a;
    c.dims = {4, 4, 5};
    CHECK_FALSE(aligned(a, c));
}

TEST_CASE("crop to mask bounding box")
{
    const auto g = oracle::cube(10);
    SUBCASE("full mask, zero margin is the identity")
    {
        oracle::Gen gen(1);
        const ScalarVolume v = oracle::random_probs(gen, g);
        const auto [c, rec] = crop_to_mask_bbox(v, LabelVolume(g, 1u), 0.0);
        CHECK(c.values() == v.values());
        CHECK(pad_to_original(c, rec).values() == v.values());
    }
    SUBCASE("single voxel")
    {
        LabelVolume m(g);
        m.at(5, 5, 5) = 1;
        ScalarVolume v(g, 2.0);
        const auto [c, rec] = crop_to_mask_bbox(v, m, 0.0);
        CHECK(c.dims() == Index3{1, 1, 1});
        CHECK(rec.start == Index3{5, 5, 5});
        CHECK((c.geometry().origin - g.to_physical(5, 5, 5)).norm() < 1e-12);
        const LabelVolume one(c.geometry(), 1u);
        const LabelVolume padded = pad_to_original(one, rec);
        CHECK(count_nonzero(padded) == 1);
        CHECK(padded.at(5, 5, 5) == 1);
    }
    SUBCASE("margin rounds up and clamps")
    {
        LabelVolume m(g);
        for (int k = 1; k <= 4; ++k)
            for (int j = 3; j <= 7; ++j)
                for (int i = 2; i <= 6; ++i)
                    m.at(i, j, k) = 1;
        const CropRecord rec = crop_record_for_mask(m, 2.0);
        CHECK(rec.start == Index3{0, 1, 0});
        CHECK(rec.size == Index3{9, 9, 7});
        const CropRecord frac = crop_record_for_mask(m, 1.2);
        CHECK(frac.start == Index3{0, 1, 0});
        CHECK(frac.size == Index3{9, 9, 7});
    }
    SUBCASE("pad counts")
    {
        CropRecord rec{g, {2, 2, 2}, {5, 5, 5}};
        const LabelVolume ones(sub_geometry(g, rec.start, rec.size), 1u);
        CHECK(count_nonzero(pad_to_original(ones, rec)) == 125);
        const LabelVolume wrong(oracle::cube(4), 1u);
        CHECK_THROWS_AS(pad_to_original(wrong, rec), Error);
    }
    SUBCASE("empty mask")
    {
        try {
            crop_to_mask_bbox(ScalarVolume(g), LabelVolume(g), 0.0);
            FAIL("expected empty-mask error");
        } catch (const Error &e) {
            CHECK(e.code() == ErrorCode::empty_mask);
        }
    }
}

TEST_CASE("crop then pad restores random volumes")
{
    oracle::Gen gen(9);
    for (int trial = 0; trial < 20; ++trial) {
        const auto g = oracle::random_geometry(gen, {gen.integer(3, 9), gen.integer(3, 9), gen.integer(3, 9)});
        const LabelVolume m = oracle::random_mask(gen, g, 0.05);
        if (count_nonzero(m) == 0)
            continue;
        const ScalarVolume v = oracle::random_probs(gen, g);
        const auto [c, rec] = crop_to_mask_bbox(v, m, gen.uniform(0, 3));
        const ScalarVolume back = pad_to_original(c, rec);
        for (std::size_t n = 0; n < v.size(); ++n) {
            const Index3 p = g.unravel(n);
            bool inside = true;
            for (int a = 0; a < 3; ++a)
                inside = inside && p[a] >= rec.start[a] && p[a] < rec.start[a] + rec.size[a];
            CHECK(back[n] == (inside ? v[n] : 0.0));
            if (m[n])
                CHECK(inside);
        }
    }
}

TEST_CASE("percentile uses linear interpolation")
{
    std::vector<double> v(1000);
    for (int i = 0; i < 1000; ++i)
        v[i] = 999 - i;
    CHECK(percentile(v, 0.5) == doctest::Approx(4.995).epsilon(1e-12));
    CHECK(percentile(v, 99.5) == doctest::Approx(994.005).epsilon(1e-12));
    CHECK(percentile(v, 0) == 0.0);
    CHECK(percentile(v, 100) == 999.0);
}

TEST_CASE("CT normalization")
{
    const auto g = VolumeGeometry::make({10, 10, 10});
    ScalarVolume v(g);
    for (std::size_t n = 0; n < v.size(); ++n)
        v[n] = static_cast<double>(n);
    const LabelVolume fg(g, 1u);
    const ScalarVolume z = normalize_ct(v, fg);
    double mean = 0, sq = 0;
    for (double x : z.values())
        mean += x;
    mean /= z.size();
    for (double x : z.values())
        sq += (x - mean) * (x - mean);
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(std::sqrt(sq / z.size()) - 1.0) < 1e-5);

    SUBCASE("invariant under positive affine rescaling")
    {
        oracle::Gen gen(5);
        const ScalarVolume r = oracle::random_probs(gen, g, -1000, 1000);
        const LabelVolume m = oracle::random_mask(gen, g, 0.3);
        ScalarVolume s(g);
        for (std::size_t n = 0; n < s.size(); ++n)
            s[n] = 3.7 * r[n] - 250.0;
        const ScalarVolume a = normalize_ct(r, m), b = normalize_ct(s, m);
        for (std::size_t n = 0; n < a.size(); ++n)
            CHECK(std::abs(a[n] - b[n]) < 1e-5);
    }
    SUBCASE("degenerate and empty foreground")
    {
        try {
            normalize_ct(ScalarVolume(g, 4.0), fg);
            FAIL("constant foreground accepted");
        } catch (const Error &e) {
            CHECK(e.code() == ErrorCode::degenerate);
        }
        try {
            normalize_ct(v, LabelVolume(g));
            FAIL("empty foreground accepted");
        } catch (const Error &e) {
            CHECK(e.code() == ErrorCode::empty_mask);
        }
    }
}

TEST_CASE("resampling")
{
    const auto g = VolumeGeometry::make({8, 4, 4}, Vec3(1, 1, 1), Vec3(3, -2, 5));
    ScalarVolume ramp(g);
    for (int k = 0; k < 4; ++k)
        for (int j = 0; j < 4; ++j)
            for (int i = 0; i < 8; ++i)
                ramp.at(i, j, k) = 2.0 * i + 1.0;

    SUBCASE("identity geometry")
    {
        const ScalarVolume r = resample(ramp, g, Interpolation::linear);
        for (std::size_t n = 0; n < r.size(); ++n)
            CHECK(std::abs(r[n] - ramp[n]) < 1e-6);
    }
    SUBCASE("ramp at shifted and coarser positions")
    {
        // half-voxel shift along x: samples fall between ramp nodes
        const auto t = VolumeGeometry::make({4, 4, 4}, Vec3(2, 1, 1), Vec3(3.5, -2, 5));
        const ScalarVolume r = resample(ramp, t, Interpolation::linear);
        for (int i = 0; i < 4; ++i) {
            const double x_index = 0.5 + 2.0 * i;
            const double expect = x_index <= 7.0 ? 2.0 * x_index + 1.0 : 0.0;
            CHECK(r.at(i, 1, 1) == doctest::Approx(expect));
        }
    }
    SUBCASE("outside fills zero")
    {
        auto t = g;
        t.origin = Vec3(100, 100, 100);
        const ScalarVolume r = resample(ramp, t, Interpolation::linear);
        for (double x : r.values())
            CHECK(x == 0.0);
    }
    SUBCASE("labels need nearest and keep the label set")
    {
        oracle::Gen gen(2);
        LabelVolume lab(g);
        for (std::size_t n = 0; n < lab.size(); ++n)
            lab[n] = gen.coin(0.3) ? 7u : 0u;
        try {
            resample(lab, g, Interpolation::linear);
            FAIL("linear label resample accepted");
        } catch (const Error &e) {
            CHECK(e.code() == ErrorCode::mode);
        }
        const auto t = oracle::random_geometry(gen, {6, 6, 6});
        auto t2 = t;
        t2.origin = g.to_physical(Vec3(2, 1, 1));
        const LabelVolume r = resample(lab, t2, Interpolation::nearest);
        for (auto x : r.values())
            CHECK((x == 0u || x == 7u));
    }
}

TEST_CASE("trilinear sampling matches the analytic interpolant")
{
    oracle::Gen gen(4);
    const auto g = oracle::cube(2);
    double c[2][2][2];
    ScalarVolume v(g);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            for (int k = 0; k < 2; ++k)
                v.at(i, j, k) = c[i][j][k] = gen.uniform(-5, 5);
    for (int t = 0; t < 50; ++t) {
        const Vec3 p(gen.uniform(), gen.uniform(), gen.uniform());
        CHECK(sample_linear(v, p) == doctest::Approx(oracle::trilinear(c, p[0], p[1], p[2])));
        Vec3 grad;
        CHECK(sample_linear_clamped(v, p, &grad) == doctest::Approx(oracle::trilinear(c, p[0], p[1], p[2])));
        const double h = 1e-6;
        for (int a = 0; a < 3; ++a) {
            Vec3 lo = p, hi = p;
            lo[a] -= h;
            hi[a] += h;
            const double fd = (oracle::trilinear(c, hi[0], hi[1], hi[2]) - oracle::trilinear(c, lo[0], lo[1], lo[2])) /
                              (2 * h);
            CHECK(grad[a] == doctest::Approx(fd).epsilon(1e-6));
        }
    }
    CHECK(sample_linear(v, Vec3(1.5, 0, 0), -3.0) == -3.0);
    CHECK(sample_nearest(v, Vec3(0.49, 0.51, 0.2)) == v.at(0, 1, 0));
}

TEST_CASE("gaussian smoothing")
{
    const auto g = oracle::cube(21);
    ScalarVolume v(g);
    v.at(10, 10, 10) = 1.0;
    SUBCASE("interior mass is preserved")
    {
        const ScalarVolume s = gaussian_smooth(v, Vec3::Constant(2.0), true);
        double sum = 0;
        for (double x : s.values())
            sum += x;
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(s.at(9, 10, 10) == doctest::Approx(s.at(11, 10, 10)));
        CHECK(s.at(10, 10, 10) > s.at(11, 10, 10));
    }
    SUBCASE("tiny sigma is the identity")
    {
        const ScalarVolume s = gaussian_smooth(v, Vec3::Constant(1e-6), true);
        CHECK(s.values() == v.values());
    }
    SUBCASE("replicate boundary keeps constants")
    {
        const ScalarVolume s = gaussian_smooth(ScalarVolume(g, 3.0), Vec3::Constant(3.0), false);
        for (double x : s.values())
            CHECK(x == doctest::Approx(3.0));
    }
}

TEST_CASE("downsampling covers the same extent")
{
    const auto g = VolumeGeometry::make({9, 8, 7}, Vec3(1, 2, 0.5), Vec3(1, 2, 3));
    const auto d = downsampled_geometry(g, 2);
    CHECK(d.dims == Index3{5, 4, 4});
    CHECK((d.spacing - Vec3(2, 4, 1)).norm() < 1e-12);
    CHECK((d.origin - g.to_physical(Vec3(0.5, 0.5, 0.5))).norm() < 1e-12);
    const ScalarVolume c = downsample(ScalarVolume(g, 5.0), 2);
    for (double x : c.values())
        CHECK(x == doctest::Approx(5.0));
}
