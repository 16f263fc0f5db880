#include "nodekit/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "nodekit/distance.hpp"
#include "nodekit/postprocess.hpp"

namespace nodekit {

namespace {

struct Overlap {
    std::size_t a = 0, b = 0, both = 0;
};

Overlap overlap(const LabelVolume &pred, const LabelVolume &gt, const char *what)
{
    require_aligned(pred.geometry(), gt.geometry(), what);
    Overlap o;
    for (std::size_t n = 0; n < pred.size(); ++n) {
        const bool p = pred[n] != 0, g = gt[n] != 0;
        o.a += p;
        o.b += g;
        o.both += p && g;
    }
    return o;
}

} // namespace

double dice(const LabelVolume &pred, const LabelVolume &gt)
{
    const Overlap o = overlap(pred, gt, "dice");
    if (o.a + o.b == 0)
        return 1.0;
    return 2.0 * static_cast<double>(o.both) / static_cast<double>(o.a + o.b);
}

LabelVolume surface_voxels(const LabelVolume &mask)
{
    const auto &g = mask.geometry();
    LabelVolume out = mask.like<std::uint32_t>();
    static constexpr int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
    for (int k = 0; k < g.dims[2]; ++k)
        for (int j = 0; j < g.dims[1]; ++j)
            for (int i = 0; i < g.dims[0]; ++i) {
                if (mask.at(i, j, k) == 0)
                    continue;
                for (const auto &o : off) {
                    const int a = i + o[0], b = j + o[1], c = k + o[2];
                    if (!g.contains(a, b, c) || mask.at(a, b, c) == 0) {
                        out.at(i, j, k) = 1;
                        break;
                    }
                }
            }
    return out;
}

AssdResult assd(const LabelVolume &pred, const LabelVolume &gt)
{
    require_aligned(pred.geometry(), gt.geometry(), "assd");
    if (count_nonzero(pred) == 0 || count_nonzero(gt) == 0)
        return {std::numeric_limits<double>::infinity(), true};
    const LabelVolume sp = surface_voxels(pred), sg = surface_voxels(gt);
    const Vec3 &spacing = pred.geometry().spacing;
    const auto to_gt = squared_distance_transform(sg, spacing);
    const auto to_pred = squared_distance_transform(sp, spacing);
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t n = 0; n < sp.size(); ++n) {
        if (sp[n]) {
            sum += std::sqrt(to_gt[n]);
            ++count;
        }
        if (sg[n]) {
            sum += std::sqrt(to_pred[n]);
            ++count;
        }
    }
    return {sum / static_cast<double>(count), false};
}

PrecisionRecall precision_recall(const LabelVolume &pred, const LabelVolume &gt)
{
    const Overlap o = overlap(pred, gt, "precision_recall");
    PrecisionRecall pr;
    if (o.a == 0)
        pr.precision_undefined = true;
    else
        pr.precision = static_cast<double>(o.both) / static_cast<double>(o.a);
    if (o.b == 0)
        pr.recall_undefined = true;
    else
        pr.recall = static_cast<double>(o.both) / static_cast<double>(o.b);
    return pr;
}

LesionCounts ln_found(const LabelVolume &pred, const LabelVolume &gt, int dilation_vox, int connectivity)
{
    require_aligned(pred.geometry(), gt.geometry(), "ln_found");
    if (dilation_vox < 0)
        throw Error(ErrorCode::argument, "dilation radius must be non-negative");
    const LabelVolume dp = dilate_ball(pred, dilation_vox);
    const LabelVolume dg = dilate_ball(gt, dilation_vox);
    const ComponentSet gc = connected_components(dg, connectivity);
    const ComponentSet pc = connected_components(dp, connectivity);

    std::vector<char> gt_hit(gc.count() + 1, 0), pred_hit(pc.count() + 1, 0);
    for (std::size_t n = 0; n < dp.size(); ++n)
        if (gc.labels[n] && pc.labels[n]) {
            gt_hit[gc.labels[n]] = 1;
            pred_hit[pc.labels[n]] = 1;
        }
    LesionCounts out;
    for (std::size_t c = 1; c <= gc.count(); ++c)
        (gt_hit[c] ? out.tp : out.fn) += 1;
    for (std::size_t c = 1; c <= pc.count(); ++c)
        out.fp += pred_hit[c] ? 0 : 1;
    if (out.tp + out.fn == 0)
        out.undefined = true;
    else
        out.ln_found = static_cast<double>(out.tp) / static_cast<double>(out.tp + out.fn);
    return out;
}

MetricsReport evaluate_case(const LabelVolume &pred, const LabelVolume &gt, const std::string &case_id)
{
    MetricsReport r;
    r.case_id = case_id;
    r.dice = dice(pred, gt);
    const AssdResult a = assd(pred, gt);
    r.assd_mm = a.value;
    r.assd_undefined = a.empty;
    const PrecisionRecall pr = precision_recall(pred, gt);
    r.precision = pr.precision;
    r.recall = pr.recall;
    r.precision_undefined = pr.precision_undefined;
    r.recall_undefined = pr.recall_undefined;
    const LesionCounts lc = ln_found(pred, gt);
    r.ln_found = lc.ln_found;
    r.ln_found_undefined = lc.undefined;
    r.tp = lc.tp;
    r.fp = lc.fp;
    r.fn = lc.fn;
    return r;
}

nlohmann::ordered_json MetricsReport::to_json() const
{
    auto value = [](double v, bool undefined) { return undefined ? nlohmann::ordered_json() : nlohmann::ordered_json(v); };
    nlohmann::ordered_json j;
    if (!case_id.empty())
        j["case"] = case_id;
    j["dice"] = dice;
    j["assd_mm"] = value(assd_mm, assd_undefined);
    j["assd_undefined"] = assd_undefined;
    j["precision"] = value(precision, precision_undefined);
    j["precision_undefined"] = precision_undefined;
    j["recall"] = value(recall, recall_undefined);
    j["recall_undefined"] = recall_undefined;
    j["ln_found"] = value(ln_found, ln_found_undefined);
    j["ln_found_undefined"] = ln_found_undefined;
    j["tp"] = tp;
    j["fp"] = fp;
    j["fn"] = fn;
    return j;
}

namespace {

struct Means {
    double sum[5] = {0, 0, 0, 0, 0};
    std::size_t count[5] = {0, 0, 0, 0, 0};

    void add(int m, double v, bool undefined)
    {
        if (!undefined) {
            sum[m] += v;
            ++count[m];
        }
    }
    bool defined(int m) const { return count[m] > 0; }
    double mean(int m) const { return sum[m] / static_cast<double>(count[m]); }
};

Means means_of(const std::vector<MetricsReport> &reports)
{
    Means m;
    for (const auto &r : reports) {
        m.add(0, r.dice, false);
        m.add(1, r.assd_mm, r.assd_undefined);
        m.add(2, r.precision, r.precision_undefined);
        m.add(3, r.recall, r.recall_undefined);
        m.add(4, r.ln_found, r.ln_found_undefined);
    }
    return m;
}

constexpr const char *metric_keys[5] = {"dice", "assd_mm", "precision", "recall", "ln_found"};

std::string cell(double v, bool undefined)
{
    if (undefined)
        return "";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

} // namespace

nlohmann::ordered_json summarize(const std::vector<MetricsReport> &reports)
{
    const Means m = means_of(reports);
    nlohmann::ordered_json j;
    j["cases"] = reports.size();
    for (int k = 0; k < 5; ++k)
        j[metric_keys[k]] = m.defined(k) ? nlohmann::ordered_json(m.mean(k)) : nlohmann::ordered_json();
    return j;
}

std::string metrics_csv(const std::vector<MetricsReport> &reports)
{
    std::string out = "case,Dice,ASSD,Precision,Recall,LN found\n";
    for (const auto &r : reports) {
        out += r.case_id + "," + cell(r.dice, false) + "," + cell(r.assd_mm, r.assd_undefined) + "," +
               cell(r.precision, r.precision_undefined) + "," + cell(r.recall, r.recall_undefined) + "," +
               cell(r.ln_found, r.ln_found_undefined) + "\n";
    }
    const Means m = means_of(reports);
    out += "mean";
    for (int k = 0; k < 5; ++k)
        out += "," + cell(m.defined(k) ? m.mean(k) : 0.0, !m.defined(k));
    out += "\n";
    return out;
}

} // namespace nodekit
