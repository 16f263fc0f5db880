#include "nodekit/ssl.hpp"

#include <algorithm>
#include <cmath>

namespace nodekit {

SoftmaxVolume::SoftmaxVolume(const VolumeGeometry &geometry, int classes, std::vector<double> probs)
    : geometry_(geometry), classes_(classes), probs_(std::move(probs))
{
    geometry_.validate();
    if (classes_ < 1)
        throw Error(ErrorCode::argument, "softmax needs at least one class");
    if (probs_.size() != geometry_.voxel_count() * static_cast<std::size_t>(classes_))
        throw Error(ErrorCode::geometry, "softmax data length does not match dims x classes");
    for (std::size_t v = 0; v < geometry_.voxel_count(); ++v) {
        double sum = 0.0;
        for (int c = 0; c < classes_; ++c) {
            const double p = probs_[v * classes_ + c];
            if (!(p >= 0.0) || !std::isfinite(p))
                throw Error(ErrorCode::argument, "softmax probabilities must be finite and non-negative");
            sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-5)
            throw Error(ErrorCode::argument, "softmax probabilities must sum to 1 per voxel");
    }
}

SoftmaxVolume SoftmaxVolume::from_foreground(const ProbVolume &fg)
{
    std::vector<double> probs(2 * fg.size());
    for (std::size_t v = 0; v < fg.size(); ++v) {
        probs[2 * v] = 1.0 - fg[v];
        probs[2 * v + 1] = fg[v];
    }
    return SoftmaxVolume(fg.geometry(), 2, std::move(probs));
}

ScalarVolume SoftmaxVolume::channel(int c) const
{
    if (c < 0 || c >= classes_)
        throw Error(ErrorCode::argument, "softmax channel out of range");
    std::vector<double> out(voxels());
    for (std::size_t v = 0; v < out.size(); ++v)
        out[v] = prob(v, c);
    return ScalarVolume(geometry_, std::move(out));
}

ScalarVolume entropy_map(const SoftmaxVolume &sm)
{
    std::vector<double> h(sm.voxels());
    for (std::size_t v = 0; v < h.size(); ++v) {
        double e = 0.0;
        for (int c = 0; c < sm.classes(); ++c) {
            const double p = sm.prob(v, c);
            if (p > 0.0)
                e -= p * std::log(p);
        }
        h[v] = std::clamp(e, 0.0, std::log(static_cast<double>(sm.classes())));
    }
    return ScalarVolume(sm.geometry(), std::move(h));
}

LabelVolume reliability_mask(const SoftmaxVolume &sm, double quantile)
{
    if (!(quantile > 0.0 && quantile <= 1.0))
        throw Error(ErrorCode::argument, "quantile must lie in (0, 1]");
    constexpr int bins = 256;
    const ScalarVolume h = entropy_map(sm);
    LabelVolume out(sm.geometry());
    const auto [lo_it, hi_it] = std::minmax_element(h.values().begin(), h.values().end());
    const double lo = *lo_it, hi = *hi_it;
    if (!(hi > lo)) {
        std::fill(out.data().begin(), out.data().end(), 1u);
        return out;
    }
    auto bin_of = [&](double x) { return std::min(bins - 1, static_cast<int>((x - lo) / (hi - lo) * bins)); };
    std::vector<std::size_t> hist(bins, 0);
    for (const double x : h.values())
        ++hist[bin_of(x)];
    const double need = quantile * static_cast<double>(h.size());
    int cut = bins - 1;
    std::size_t cum = 0;
    for (int b = 0; b < bins; ++b) {
        cum += hist[b];
        if (static_cast<double>(cum) >= need - 1e-9) {
            cut = b;
            break;
        }
    }
    for (std::size_t n = 0; n < out.size(); ++n)
        out[n] = bin_of(h[n]) <= cut ? 1u : 0u;
    return out;
}

ParamVector ema_update(const ParamVector &teacher, const ParamVector &student, double momentum)
{
    if (teacher.size() != student.size())
        throw Error(ErrorCode::argument, "teacher and student parameter counts differ");
    if (!(momentum >= 0.0 && momentum <= 1.0))
        throw Error(ErrorCode::argument, "momentum must lie in [0, 1]");
    ParamVector out(teacher.size());
    for (std::size_t n = 0; n < out.size(); ++n) {
        if (!std::isfinite(teacher[n]) || !std::isfinite(student[n]))
            throw Error(ErrorCode::argument, "parameters must be finite");
        out[n] = momentum * teacher[n] + (1.0 - momentum) * student[n];
    }
    return out;
}

LabelVolume argmax_labels(const SoftmaxVolume &sm)
{
    LabelVolume out(sm.geometry());
    for (std::size_t v = 0; v < sm.voxels(); ++v) {
        int best = 0;
        for (int c = 1; c < sm.classes(); ++c)
            if (sm.prob(v, c) >= sm.prob(v, best))
                best = c;
        out[v] = static_cast<std::uint32_t>(best);
    }
    return out;
}

LabelVolume pseudo_label(const SoftmaxVolume &sm, const ScalarVolume &pa, const LabelVolume &lungs,
                         const PostprocessConfig &cfg)
{
    if (sm.classes() != 2)
        throw Error(ErrorCode::argument, "pseudo_label expects a two-class softmax");
    ScalarVolume fg = sm.channel(1);
    for (std::size_t n = 0; n < fg.size(); ++n)
        fg[n] = std::clamp(fg[n], 0.0, 1.0);
    return run_postprocess({ProbVolume(std::move(fg))}, pa, lungs, nullptr, cfg);
}

} // namespace nodekit
