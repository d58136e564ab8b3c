#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "anom/tensor.hpp"

namespace anom {

// Raised when a metric is undefined for the given inputs (single-class
// labels, no ground-truth regions).
struct MetricError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Trapezoidal ROC area with rank-averaged ties (Mann-Whitney form).
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

// 8-connectivity labeling. labels[i] is 0 for background or the 1-based
// region id; ids are assigned in raster-scan order of first contact.
struct Labeling {
    int height = 0, width = 0;
    std::vector<int> labels;
    int count = 0;
};

Labeling connected_components(const TensorF& mask);

// Mean per-region overlap integrated over false-positive rates in
// [0, fpr_limit] and normalized by the limit. Thresholds are every distinct
// score when the pixel count is at most 2^20, else 200 quantiles.
double pro(const std::vector<TensorF>& score_maps, const std::vector<TensorF>& gt_masks,
           double fpr_limit = 0.3);

struct MetricTriple {
    double image_auroc = 0.0;
    double pixel_auroc = 0.0;
    double pro = 0.0;
};

struct EvalReport {
    MetricTriple overall;
    std::map<std::string, MetricTriple> per_category;
    int positives = 0;
    int negatives = 0;
    std::string config_digest;

    std::string to_json() const;
    std::string to_table() const;
};

// Scored test set for one image.
struct ScoredImage {
    std::string category;
    double image_score = 0.0;
    int image_label = 0;  // 1 = defective
    TensorF score_map;    // (h, w) or (1, h, w)
    TensorF gt_mask;      // (h, w), all zeros for normal images
};

// Aggregates the three metrics overall and per category.
EvalReport evaluate_scores(const std::vector<ScoredImage>& images, double fpr_limit = 0.3);

}  // namespace anom
