#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "deskdet/geometry.hpp"

namespace deskdet {

/// One predicted object: class, softmax score, box, per-boundary sigma and
/// the boundary mean used by the regression filter.
struct Detection {
  int class_id = 0;
  double score = 0.0;
  Box box;
  std::array<double, 4> sigma = {0.0, 0.0, 0.0, 0.0};
  double sigma_mean = 0.0;
};

struct DetectionRecord {
  int image_id = 0;
  Detection det;
};

struct GroundTruth {
  int image_id = 0;
  int class_id = 0;
  Box box;
};

/// COCO-style report: 101-point interpolated AP per class at IoU thresholds
/// 0.50:0.05:0.95. Classes with no ground truth are excluded from the means.
struct APReport {
  std::vector<double> thresholds;
  std::map<int, std::vector<double>> per_class;  // class -> AP per threshold
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ap50_95 = 0.0;
};

/// AP of a single class at one IoU threshold. Detections are matched greedily
/// in descending score order to the unmatched ground truth with the highest
/// IoU >= iou_thresh (IoU ties pick the lower ground-truth index).
double average_precision(std::vector<DetectionRecord> detections,
                         const std::vector<GroundTruth>& ground_truths, double iou_thresh);

APReport evaluate_ap(const std::vector<DetectionRecord>& detections,
                     const std::vector<GroundTruth>& ground_truths);

struct CorrelationBin {
  double sigma_mean = 0.0;
  double iou_mean = 0.0;
  int count = 0;
};

struct CorrelationReport {
  double spearman_rho = 0.0;
  int sample_count = 0;
  std::vector<CorrelationBin> bins;  // sigma-mean deciles vs mean IoU
};

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

/// Correlation between predicted sigma-mean and best ground-truth IoU.
/// Every detection in an image that has at least one ground-truth box is a
/// sample (best IoU over all boxes, regardless of class); throws below 30
/// samples.
CorrelationReport uncertainty_iou_correlation(const std::vector<DetectionRecord>& detections,
                                              const std::vector<GroundTruth>& ground_truths);

// --- file formats ---

/// CSV: image_id,class,score,x1,y1,x2,y2,sigma1..sigma4,sigma_mean
void write_detection_dump(const std::string& path, const std::vector<DetectionRecord>& dets);
std::vector<DetectionRecord> read_detection_dump(const std::string& path);

void write_ap_report(const std::string& path, const APReport& report);
void write_correlation_report(const std::string& path, const CorrelationReport& report);

}  // namespace deskdet
