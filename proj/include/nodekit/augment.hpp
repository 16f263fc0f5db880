#pragma once

#include <cstdint>

#include "nodekit/volume.hpp"

namespace nodekit {

struct GinConfig {
    int layers = 4;
    int kernel = 3;
    int channels = 2;
    double leaky_slope = 0.2;
    std::uint64_t seed = 0;

    void validate() const;
};

struct RampConfig {
    int ramp_epochs = 1000;
    double shape = 5.0;

    void validate() const;
};

/// splitmix64 finalizer; used to derive independent sub-seeds.
std::uint64_t mix_seed(std::uint64_t x);

/// Random shallow convolutional network applied to `vol`: conv (zero padding,
/// no bias) + leaky ReLU per layer, 1 -> channels -> ... -> 1 channels. The
/// result has the input's mean and (population) standard deviation.
ScalarVolume gin_transform(const ScalarVolume &vol, const GinConfig &cfg);

/// Uniform [0,1] noise on a coarse lattice, trilinearly upsampled with the
/// coarse corners on the grid corners.
ScalarVolume pseudo_correlation_map(const VolumeGeometry &geometry, const Index3 &coarse_dims, std::uint64_t seed);

/// Trilinear upsampling of `coarse` (coarse_dims, x fastest) onto `geometry`, corners aligned.
ScalarVolume upsample_trilinear(const std::vector<double> &coarse, const Index3 &coarse_dims,
                                const VolumeGeometry &geometry);

/// rho a + (1 - rho) b
ScalarVolume ipa_blend(const ScalarVolume &a, const ScalarVolume &b, const ScalarVolume &rho);

/// exp(-shape (1 - min(epoch / ramp_epochs, 1))^2)
double rampup_weight(int epoch, const RampConfig &cfg = {});

/// The three random ingredients of a blend: two GIN outputs and the blend map.
struct BlendParts {
    ScalarVolume gin_a;
    ScalarVolume gin_b;
    ScalarVolume rho;
};
/// Sub-seeds derived from `seed`; coarse dims are clipped to the volume dims.
BlendParts augment_parts(const ScalarVolume &vol, std::uint64_t seed, const GinConfig &gin = {},
                         const Index3 &coarse_dims = {4, 4, 4});

/// (1 - lambda) vol + lambda ipa_blend(gin(vol, s1), gin(vol, s2), rho(s3)),
/// sub-seeds derived from `seed`.
ScalarVolume augment_blend(const ScalarVolume &vol, double lambda, std::uint64_t seed, const GinConfig &gin = {},
                           const Index3 &coarse_dims = {4, 4, 4});

/// Blend seed for a given (seed, epoch).
std::uint64_t epoch_seed(std::uint64_t seed, int epoch);
/// augment_blend(vol, rampup_weight(epoch), epoch_seed(seed, epoch), gin).
ScalarVolume augment_pipeline(const ScalarVolume &vol, int epoch, std::uint64_t seed, const GinConfig &gin = {},
                              const RampConfig &ramp = {});

} // namespace nodekit
