#include "nodekit/augment.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace nodekit {

void GinConfig::validate() const
{
    if (layers < 1)
        throw Error(ErrorCode::argument, "GIN needs at least one layer");
    if (kernel < 1 || kernel % 2 == 0)
        throw Error(ErrorCode::argument, "GIN kernel size must be odd and positive");
    if (channels < 1)
        throw Error(ErrorCode::argument, "GIN needs at least one channel");
    if (!(leaky_slope >= 0.0) || leaky_slope > 1.0)
        throw Error(ErrorCode::argument, "GIN leaky slope must lie in [0, 1]");
}

void RampConfig::validate() const
{
    if (ramp_epochs < 1)
        throw Error(ErrorCode::argument, "ramp_epochs must be >= 1");
    if (!(shape >= 0.0) || !std::isfinite(shape))
        throw Error(ErrorCode::argument, "ramp shape must be finite and non-negative");
}

std::uint64_t mix_seed(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

namespace {

struct MeanStd {
    double mean = 0.0;
    double stddev = 0.0;
};

MeanStd mean_std(std::span<const double> v)
{
    double sum = 0.0;
    for (const double x : v)
        sum += x;
    const double mean = sum / static_cast<double>(v.size());
    double sq = 0.0;
    for (const double x : v)
        sq += (x - mean) * (x - mean);
    return {mean, std::sqrt(sq / static_cast<double>(v.size()))};
}

// in: cin planes, out: cout planes; weights [o][c][tap]
void conv3d(const std::vector<std::vector<double>> &in, std::vector<std::vector<double>> &out, int cout,
            const std::vector<double> &weights, int kernel, const Index3 &d)
{
    const int cin = static_cast<int>(in.size());
    const int r = kernel / 2;
    const int taps = kernel * kernel * kernel;
    const std::size_t n = in.front().size();
    out.assign(cout, std::vector<double>(n, 0.0));
    for (int o = 0; o < cout; ++o) {
        auto &dst = out[o];
        for (int c = 0; c < cin; ++c) {
            const auto &src = in[c];
            const double *w = &weights[(static_cast<std::size_t>(o) * cin + c) * taps];
            int t = 0;
            for (int dk = -r; dk <= r; ++dk)
                for (int dj = -r; dj <= r; ++dj)
                    for (int di = -r; di <= r; ++di, ++t) {
                        const double wt = w[t];
                        const int k0 = std::max(0, -dk), k1 = std::min(d[2], d[2] - dk);
                        const int j0 = std::max(0, -dj), j1 = std::min(d[1], d[1] - dj);
                        const int i0 = std::max(0, -di), i1 = std::min(d[0], d[0] - di);
                        for (int k = k0; k < k1; ++k)
                            for (int j = j0; j < j1; ++j) {
                                const std::size_t row = static_cast<std::size_t>(d[0]) * (j + static_cast<std::size_t>(d[1]) * k);
                                const std::size_t srow = static_cast<std::size_t>(d[0]) *
                                                         ((j + dj) + static_cast<std::size_t>(d[1]) * (k + dk));
                                for (int i = i0; i < i1; ++i)
                                    dst[row + i] += wt * src[srow + i + di];
                            }
                    }
        }
    }
}

} // namespace

ScalarVolume gin_transform(const ScalarVolume &vol, const GinConfig &cfg)
{
    cfg.validate();
    const auto &d = vol.dims();
    std::mt19937_64 rng(mix_seed(cfg.seed));
    const int taps = cfg.kernel * cfg.kernel * cfg.kernel;

    std::vector<std::vector<double>> cur{vol.values()}, next;
    for (int layer = 0; layer < cfg.layers; ++layer) {
        const int cin = static_cast<int>(cur.size());
        const int cout = layer + 1 == cfg.layers ? 1 : cfg.channels;
        const double fan_in = static_cast<double>(cin) * taps;
        std::normal_distribution<double> normal(
            0.0, std::sqrt(2.0 / ((1.0 + cfg.leaky_slope * cfg.leaky_slope) * fan_in)));
        std::vector<double> weights(static_cast<std::size_t>(cout) * cin * taps);
        for (double &w : weights)
            w = normal(rng);
        conv3d(cur, next, cout, weights, cfg.kernel, d);
        for (auto &plane : next)
            for (double &x : plane)
                x = x >= 0.0 ? x : cfg.leaky_slope * x;
        std::swap(cur, next);
    }

    std::vector<double> out = std::move(cur.front());
    const MeanStd target = mean_std(vol.data());
    const MeanStd got = mean_std(out);
    if (got.stddev > 1e-12 * std::max(1.0, std::abs(got.mean))) {
        for (double &x : out)
            x = (x - got.mean) / got.stddev * target.stddev + target.mean;
    } else {
        std::fill(out.begin(), out.end(), target.mean);
    }
    return ScalarVolume(vol.geometry(), std::move(out));
}

ScalarVolume upsample_trilinear(const std::vector<double> &coarse, const Index3 &cd, const VolumeGeometry &geometry)
{
    geometry.validate();
    if (static_cast<std::size_t>(cd[0]) * cd[1] * cd[2] != coarse.size())
        throw Error(ErrorCode::argument, "coarse sample count does not match coarse dims");
    const auto &d = geometry.dims;
    // per-axis lower cell index and weight
    std::array<std::vector<std::pair<int, double>>, 3> axis;
    for (int a = 0; a < 3; ++a) {
        axis[a].resize(d[a]);
        for (int i = 0; i < d[a]; ++i) {
            if (cd[a] == 1 || d[a] == 1) {
                axis[a][i] = {0, 0.0};
                continue;
            }
            const double x = static_cast<double>(i) * (cd[a] - 1) / (d[a] - 1);
            const int lo = std::min(static_cast<int>(std::floor(x)), cd[a] - 2);
            axis[a][i] = {lo, x - lo};
        }
    }
    auto at = [&](int i, int j, int k) {
        return coarse[static_cast<std::size_t>(i) + static_cast<std::size_t>(cd[0]) * (j + static_cast<std::size_t>(cd[1]) * k)];
    };
    std::vector<double> out(geometry.voxel_count());
    std::size_t n = 0;
    for (int k = 0; k < d[2]; ++k) {
        const auto [k0, wk] = axis[2][k];
        const int k1 = std::min(k0 + 1, cd[2] - 1);
        for (int j = 0; j < d[1]; ++j) {
            const auto [j0, wj] = axis[1][j];
            const int j1 = std::min(j0 + 1, cd[1] - 1);
            for (int i = 0; i < d[0]; ++i, ++n) {
                const auto [i0, wi] = axis[0][i];
                const int i1 = std::min(i0 + 1, cd[0] - 1);
                const double c00 = at(i0, j0, k0) * (1 - wi) + at(i1, j0, k0) * wi;
                const double c10 = at(i0, j1, k0) * (1 - wi) + at(i1, j1, k0) * wi;
                const double c01 = at(i0, j0, k1) * (1 - wi) + at(i1, j0, k1) * wi;
                const double c11 = at(i0, j1, k1) * (1 - wi) + at(i1, j1, k1) * wi;
                const double c0 = c00 * (1 - wj) + c10 * wj;
                const double c1 = c01 * (1 - wj) + c11 * wj;
                out[n] = std::clamp(c0 * (1 - wk) + c1 * wk, 0.0, 1.0);
            }
        }
    }
    return ScalarVolume(geometry, std::move(out));
}

ScalarVolume pseudo_correlation_map(const VolumeGeometry &geometry, const Index3 &coarse_dims, std::uint64_t seed)
{
    for (int a = 0; a < 3; ++a)
        if (coarse_dims[a] < 1 || coarse_dims[a] > geometry.dims[a])
            throw Error(ErrorCode::argument, "coarse dims must lie in [1, dims]");
    std::mt19937_64 rng(mix_seed(seed));
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    std::vector<double> coarse(static_cast<std::size_t>(coarse_dims[0]) * coarse_dims[1] * coarse_dims[2]);
    for (double &v : coarse)
        v = uniform(rng);
    return upsample_trilinear(coarse, coarse_dims, geometry);
}

ScalarVolume ipa_blend(const ScalarVolume &a, const ScalarVolume &b, const ScalarVolume &rho)
{
    require_aligned(a.geometry(), b.geometry(), "ipa_blend");
    require_aligned(a.geometry(), rho.geometry(), "ipa_blend (rho)");
    std::vector<double> out(a.size());
    for (std::size_t n = 0; n < out.size(); ++n) {
        const double r = rho[n];
        if (r < 0.0 || r > 1.0)
            throw Error(ErrorCode::argument, "blend weights must lie in [0, 1]");
        out[n] = r * a[n] + (1.0 - r) * b[n];
    }
    return ScalarVolume(a.geometry(), std::move(out));
}

double rampup_weight(int epoch, const RampConfig &cfg)
{
    cfg.validate();
    if (epoch < 0)
        throw Error(ErrorCode::argument, "epoch must be non-negative");
    const double t = std::min(static_cast<double>(epoch) / cfg.ramp_epochs, 1.0);
    return std::exp(-cfg.shape * (1.0 - t) * (1.0 - t));
}

BlendParts augment_parts(const ScalarVolume &vol, std::uint64_t seed, const GinConfig &gin, const Index3 &coarse_dims)
{
    GinConfig g1 = gin, g2 = gin;
    g1.seed = mix_seed(seed ^ 0x1ULL);
    g2.seed = mix_seed(seed ^ 0x2ULL);
    Index3 cd;
    for (int a = 0; a < 3; ++a)
        cd[a] = std::min(coarse_dims[a], vol.dims()[a]);
    return {gin_transform(vol, g1), gin_transform(vol, g2),
            pseudo_correlation_map(vol.geometry(), cd, mix_seed(seed ^ 0x3ULL))};
}

ScalarVolume augment_blend(const ScalarVolume &vol, double lambda, std::uint64_t seed, const GinConfig &gin,
                           const Index3 &coarse_dims)
{
    if (!(lambda >= 0.0 && lambda <= 1.0))
        throw Error(ErrorCode::argument, "blend weight must lie in [0, 1]");
    gin.validate();
    if (lambda == 0.0)
        return vol;
    const BlendParts parts = augment_parts(vol, seed, gin, coarse_dims);
    const ScalarVolume mixed = ipa_blend(parts.gin_a, parts.gin_b, parts.rho);
    std::vector<double> out(vol.size());
    for (std::size_t n = 0; n < out.size(); ++n)
        out[n] = (1.0 - lambda) * vol[n] + lambda * mixed[n];
    return ScalarVolume(vol.geometry(), std::move(out));
}

std::uint64_t epoch_seed(std::uint64_t seed, int epoch)
{
    return mix_seed(seed) ^ mix_seed(static_cast<std::uint64_t>(epoch) + 0x5bd1e995ULL);
}

ScalarVolume augment_pipeline(const ScalarVolume &vol, int epoch, std::uint64_t seed, const GinConfig &gin,
                              const RampConfig &ramp)
{
    return augment_blend(vol, rampup_weight(epoch, ramp), epoch_seed(seed, epoch), gin);
}

} // namespace nodekit
