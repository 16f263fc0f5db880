#include "nodekit/losses.hpp"

#include <algorithm>
#include <cmath>

#include "nodekit/distance.hpp"

namespace nodekit {

namespace {

constexpr double ce_eps = 1e-7;

void check_binary(const LabelVolume &gt)
{
    for (const auto v : gt.values())
        if (v > 1)
            throw Error(ErrorCode::argument, "ground truth must be a binary {0,1} mask");
}

void check_inputs(const ProbVolume &pred, const LabelVolume &gt, const char *what)
{
    require_aligned(pred.geometry(), gt.geometry(), what);
    check_binary(gt);
}

} // namespace

ProbVolume::ProbVolume(ScalarVolume probs) : vol_(std::move(probs))
{
    for (const double p : vol_.values())
        if (p < 0.0 || p > 1.0)
            throw Error(ErrorCode::argument, "probabilities must lie in [0, 1]");
}

void LossConfig::validate() const
{
    if (lambda_ce < 0 || lambda_dice < 0 || lambda_tversky < 0)
        throw Error(ErrorCode::argument, "loss weights must be non-negative");
    if (alpha < 0 || beta < 0)
        throw Error(ErrorCode::argument, "Tversky alpha/beta must be non-negative");
    if (!(smooth_eps > 0))
        throw Error(ErrorCode::argument, "smooth_eps must be positive");
    if (dilation_radius_vox < 0)
        throw Error(ErrorCode::argument, "dilation radius must be non-negative");
    if (pa_cap < 0 || pa_cap > 1)
        throw Error(ErrorCode::argument, "pa_cap must lie in [0, 1]");
}

LossResult cross_entropy(const ProbVolume &pred, const LabelVolume &gt)
{
    check_inputs(pred, gt, "cross_entropy");
    const double n = static_cast<double>(pred.size());
    LossResult out;
    out.gradient.resize(pred.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double raw = pred[i];
        const double p = std::clamp(raw, ce_eps, 1.0 - ce_eps);
        const bool inside = raw > ce_eps && raw < 1.0 - ce_eps;
        if (gt[i]) {
            sum -= std::log(p);
            out.gradient[i] = inside ? -1.0 / (p * n) : 0.0;
        } else {
            sum -= std::log(1.0 - p);
            out.gradient[i] = inside ? 1.0 / ((1.0 - p) * n) : 0.0;
        }
    }
    out.value = sum / n;
    return out;
}

LossResult soft_dice_loss(const ProbVolume &pred, const LabelVolume &gt, const WeightMap *weights, double eps)
{
    check_inputs(pred, gt, "soft_dice_loss");
    if (weights)
        require_aligned(pred.geometry(), weights->weights.geometry(), "soft_dice_loss (weights)");
    double inter = 0.0, total = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double w = weights ? weights->weights[i] : 1.0;
        const double g = gt[i];
        inter += w * pred[i] * g;
        total += w * (pred[i] + g);
    }
    const double num = 2.0 * inter + eps;
    const double den = total + eps;
    LossResult out;
    out.value = 1.0 - num / den;
    out.gradient.resize(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double w = weights ? weights->weights[i] : 1.0;
        out.gradient[i] = -(2.0 * w * gt[i] * den - num * w) / (den * den);
    }
    return out;
}

LossResult tversky_loss(const ProbVolume &pred, const LabelVolume &gt, double alpha, double beta, double eps)
{
    check_inputs(pred, gt, "tversky_loss");
    double tp = 0.0, fp = 0.0, fn = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double p = pred[i];
        const double g = gt[i];
        tp += p * g;
        fp += p * (1.0 - g);
        fn += (1.0 - p) * g;
    }
    const double num = tp + eps;
    const double den = tp + alpha * fp + beta * fn + eps;
    LossResult out;
    out.value = 1.0 - num / den;
    out.gradient.resize(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double g = gt[i];
        const double dden = g + alpha * (1.0 - g) - beta * g;
        out.gradient[i] = -(g * den - num * dden) / (den * den);
    }
    return out;
}

WeightMap pa_weight_map(const LabelVolume &gt, const ScalarVolume &pa, const LossConfig &cfg)
{
    cfg.validate();
    require_aligned(gt.geometry(), pa.geometry(), "pa_weight_map");
    check_binary(gt);
    for (const double p : pa.values())
        if (p < 0.0 || p > 1.0)
            throw Error(ErrorCode::argument, "atlas prior values must lie in [0, 1]");
    const LabelVolume dilated = dilate_ball(gt, cfg.dilation_radius_vox);
    std::vector<double> w(gt.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (dilated[i])
            w[i] = 1.0;
        else if (pa[i] <= cfg.pa_cap)
            w[i] = 1.0 - pa[i];
        else
            w[i] = 1.0 - cfg.pa_cap;
    }
    return WeightMap{ScalarVolume(gt.geometry(), std::move(w))};
}

LossResult combined_loss(const ProbVolume &pred, const LabelVolume &gt, const ScalarVolume *pa, const LossConfig &cfg)
{
    cfg.validate();
    const LossResult ce = cross_entropy(pred, gt);
    std::optional<WeightMap> weights;
    if (pa)
        weights = pa_weight_map(gt, *pa, cfg);
    const LossResult dice = soft_dice_loss(pred, gt, weights ? &*weights : nullptr, cfg.smooth_eps);
    const LossResult tv = tversky_loss(pred, gt, cfg.alpha, cfg.beta, cfg.smooth_eps);

    LossResult out;
    out.value = cfg.lambda_ce * ce.value + cfg.lambda_dice * dice.value + cfg.lambda_tversky * tv.value;
    out.gradient.resize(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i)
        out.gradient[i] = cfg.lambda_ce * ce.gradient[i] + cfg.lambda_dice * dice.gradient[i] +
                          cfg.lambda_tversky * tv.gradient[i];
    return out;
}

std::vector<double> deep_supervision_weights(std::size_t levels)
{
    if (levels == 0)
        throw Error(ErrorCode::argument, "deep supervision needs at least one level");
    std::vector<double> w(levels);
    double sum = 0.0;
    for (std::size_t r = 0; r < levels; ++r) {
        w[r] = std::ldexp(1.0, -static_cast<int>(r));
        sum += w[r];
    }
    for (double &x : w)
        x /= sum;
    return w;
}

double aggregate_deep_supervision(const std::vector<double> &per_level)
{
    const auto w = deep_supervision_weights(per_level.size());
    double total = 0.0;
    for (std::size_t r = 0; r < per_level.size(); ++r)
        total += w[r] * per_level[r];
    return total;
}

double deep_supervision_loss(const std::vector<ProbVolume> &preds, const std::vector<LabelVolume> &gts,
                             const std::vector<ScalarVolume> &pas, const LossConfig &cfg)
{
    if (preds.size() != gts.size() || (!pas.empty() && pas.size() != preds.size()))
        throw Error(ErrorCode::argument, "deep supervision inputs have mismatched lengths");
    std::vector<double> per_level;
    per_level.reserve(preds.size());
    for (std::size_t r = 0; r < preds.size(); ++r)
        per_level.push_back(combined_loss(preds[r], gts[r], pas.empty() ? nullptr : &pas[r], cfg).value);
    return aggregate_deep_supervision(per_level);
}

double deep_supervision_loss(const std::vector<ProbVolume> &preds, const LabelVolume &gt, const ScalarVolume *pa,
                             const LossConfig &cfg)
{
    std::vector<LabelVolume> gts;
    std::vector<ScalarVolume> pas;
    for (const auto &p : preds) {
        gts.push_back(resample(gt, p.geometry(), Interpolation::nearest));
        if (pa) {
            ScalarVolume level = resample(*pa, p.geometry(), Interpolation::linear);
            for (std::size_t n = 0; n < level.size(); ++n)
                level[n] = std::clamp(level[n], 0.0, 1.0);
            pas.push_back(std::move(level));
        }
    }
    return deep_supervision_loss(preds, gts, pas, cfg);
}

} // namespace nodekit
