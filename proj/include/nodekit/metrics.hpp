#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "nodekit/volume.hpp"

namespace nodekit {

/// 2|A n B| / (|A| + |B|); 1 when both are empty.
double dice(const LabelVolume &pred, const LabelVolume &gt);

/// Foreground voxels with at least one background 6-neighbor (the grid border counts as background).
LabelVolume surface_voxels(const LabelVolume &mask);

struct AssdResult {
    double value = 0.0; // +inf when undefined
    bool empty = false;
};

/// Mean over both surface sets of the distance (mm) to the other surface.
AssdResult assd(const LabelVolume &pred, const LabelVolume &gt);

struct PrecisionRecall {
    double precision = 1.0;
    double recall = 1.0;
    bool precision_undefined = false; // empty prediction
    bool recall_undefined = false;    // empty ground truth
};

PrecisionRecall precision_recall(const LabelVolume &pred, const LabelVolume &gt);

struct LesionCounts {
    double ln_found = 0.0;
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;
    bool undefined = false; // no ground-truth lesions
};

/// Lesion-wise detection after ball dilation of both masks. A dilated gt
/// component is found when it overlaps the dilated prediction; a dilated
/// prediction component touching no dilated gt is a false positive.
LesionCounts ln_found(const LabelVolume &pred, const LabelVolume &gt, int dilation_vox = 2, int connectivity = 26);

struct MetricsReport {
    std::string case_id;
    double dice = 0.0;
    double assd_mm = 0.0;
    bool assd_undefined = false;
    double precision = 0.0;
    double recall = 0.0;
    bool precision_undefined = false;
    bool recall_undefined = false;
    double ln_found = 0.0;
    bool ln_found_undefined = false;
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;

    /// Undefined values serialize as null with a matching *_undefined flag.
    nlohmann::ordered_json to_json() const;
};

MetricsReport evaluate_case(const LabelVolume &pred, const LabelVolume &gt, const std::string &case_id = {});

/// Means of each metric over the cases where it is defined.
nlohmann::ordered_json summarize(const std::vector<MetricsReport> &reports);

/// Header "case,Dice,ASSD,Precision,Recall,LN found" followed by one row per case and a mean row.
std::string metrics_csv(const std::vector<MetricsReport> &reports);

} // namespace nodekit
