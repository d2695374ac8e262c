#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ll3da/geometry.hpp"
#include "ll3da/textio.hpp"

namespace ll3da {

/// Caption tokenization for metrics: lowercase, punctuation separated into
/// its own tokens. Fixed so scores reproduce bit-for-bit.
std::vector<std::string> metric_tokenize(const std::string& text);

/// Clipped n-gram precision (n = 1..4) geometric mean with brevity penalty;
/// zero clipped counts are smoothed with epsilon = 1e-9.
double bleu4(const std::string& candidate, const std::vector<std::string>& references);

/// LCS-based F-measure with beta = 1.2, max over references.
double rouge_l(const std::string& candidate, const std::vector<std::string>& references);

struct CiderItem {
    std::string candidate;
    std::vector<std::string> references;
};

/// CiDEr-D: TF-IDF n-gram similarity (n = 1..4) with clipping and a
/// Gaussian length penalty (sigma = 6), scaled by 10. IDF comes from the
/// corpus passed in; per-item scores returned in input order.
std::vector<double> cider_d(const std::vector<CiderItem>& corpus);

// ---- dense-captioning metric -----------------------------------------------

struct CaptionPrediction {
    std::string caption;
    std::optional<Box3D> box;  // absent: the IoU gate fails
};

struct CaptionReference {
    std::vector<std::string> captions;
    Box3D box;
};

struct CaptionEval {
    std::map<std::string, CaptionPrediction> predictions;  // instance key ->
    std::map<std::string, CaptionReference> references;
};

enum class CaptionMetric { bleu4, rouge_l, cider_d };

/// (1/N) sum of metric(c_pred, c_gt) * [IoU >= k] over reference keys;
/// unmatched references contribute 0; a prediction without a reference key
/// is an error.
double m_at_k_iou(const CaptionEval& eval, CaptionMetric metric, double k);

// ---- detection metric ---------------------------------------------------------

struct DetectionItem {
    std::string scene_id;
    Box3D box;
    std::string category;
    double confidence = 0.0;  // ignored on ground truth
};

struct DetectionEval {
    std::vector<DetectionItem> predictions;
    std::vector<DetectionItem> ground_truth;
};

struct DetectionResult {
    double mean_ap = 0.0;        // mean over categories with >= 1 ground truth
    double average_recall = 0.0; // matched ground-truth fraction
};

/// Confidence-sorted greedy matching (each ground truth matched at most
/// once, highest IoU first) with all-point interpolated AP per category.
DetectionResult detection_pr(const DetectionEval& eval, double iou_threshold);

// ---- reports --------------------------------------------------------------------

struct MetricEntry {
    std::string metric;
    double threshold = 0.0;
    double value = 0.0;
    int64_t n_items = 0;
};

std::string metrics_to_json(const std::vector<MetricEntry>& entries);
std::string metrics_to_csv(const std::vector<MetricEntry>& entries);

}  // namespace ll3da
