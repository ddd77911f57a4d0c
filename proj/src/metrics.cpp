#include "deskdet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace deskdet {

double average_precision(std::vector<DetectionRecord> detections,
                         const std::vector<GroundTruth>& ground_truths, double iou_thresh) {
  if (ground_truths.empty()) return 0.0;
  if (detections.empty()) return 0.0;

  std::stable_sort(detections.begin(), detections.end(),
                   [](const DetectionRecord& a, const DetectionRecord& b) {
                     return a.det.score > b.det.score;
                   });

  std::vector<char> gt_used(ground_truths.size(), 0);
  const int n_gt = static_cast<int>(ground_truths.size());
  std::vector<char> tp(detections.size(), 0);
  for (std::size_t d = 0; d < detections.size(); ++d) {
    double best_iou = 0.0;
    int best_gt = -1;
    for (std::size_t g = 0; g < ground_truths.size(); ++g) {
      if (gt_used[g]) continue;
      if (ground_truths[g].image_id != detections[d].image_id) continue;
      const double ov = iou(detections[d].det.box, ground_truths[g].box);
      if (ov >= iou_thresh && ov > best_iou) {
        best_iou = ov;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0) {
      gt_used[static_cast<std::size_t>(best_gt)] = 1;
      tp[d] = 1;
    }
  }

  // Precision/recall after each detection, then 101-point interpolation.
  std::vector<double> precision(detections.size()), recall(detections.size());
  int cum_tp = 0;
  for (std::size_t d = 0; d < detections.size(); ++d) {
    cum_tp += tp[d];
    precision[d] = static_cast<double>(cum_tp) / static_cast<double>(d + 1);
    recall[d] = static_cast<double>(cum_tp) / static_cast<double>(n_gt);
  }
  double ap = 0.0;
  for (int i = 0; i <= 100; ++i) {
    const double r = i / 100.0;
    double best = 0.0;
    for (std::size_t d = 0; d < detections.size(); ++d) {
      if (recall[d] >= r) best = std::max(best, precision[d]);
    }
    ap += best;
  }
  return ap / 101.0;
}

APReport evaluate_ap(const std::vector<DetectionRecord>& detections,
                     const std::vector<GroundTruth>& ground_truths) {
  APReport report;
  for (int i = 0; i < 10; ++i) report.thresholds.push_back(0.50 + 0.05 * i);

  std::set<int> classes;
  for (const auto& g : ground_truths) classes.insert(g.class_id);

  for (int c : classes) {
    std::vector<DetectionRecord> dets_c;
    std::vector<GroundTruth> gts_c;
    for (const auto& d : detections)
      if (d.det.class_id == c) dets_c.push_back(d);
    for (const auto& g : ground_truths)
      if (g.class_id == c) gts_c.push_back(g);
    std::vector<double> aps;
    for (double t : report.thresholds) aps.push_back(average_precision(dets_c, gts_c, t));
    report.per_class[c] = aps;
  }

  if (!report.per_class.empty()) {
    const double n_classes = static_cast<double>(report.per_class.size());
    for (std::size_t ti = 0; ti < report.thresholds.size(); ++ti) {
      double s = 0.0;
      for (const auto& [c, aps] : report.per_class) s += aps[ti];
      const double mean_ap = s / n_classes;
      report.ap50_95 += mean_ap / static_cast<double>(report.thresholds.size());
      if (ti == 0) report.ap50 = mean_ap;
      if (ti == 5) report.ap75 = mean_ap;
    }
  }
  return report;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return v[static_cast<std::size_t>(a)] < v[static_cast<std::size_t>(b)]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[static_cast<std::size_t>(order[j + 1])] ==
                            v[static_cast<std::size_t>(order[i])]) {
      ++j;
    }
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[static_cast<std::size_t>(order[k])] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) {
    throw std::invalid_argument("spearman: need two equal-length series of >= 2 samples");
  }
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

CorrelationReport uncertainty_iou_correlation(const std::vector<DetectionRecord>& detections,
                                              const std::vector<GroundTruth>& ground_truths) {
  std::vector<double> sigmas, ious;
  for (const auto& d : detections) {
    double best = -1.0;
    for (const auto& g : ground_truths) {
      if (g.image_id != d.image_id) continue;
      best = std::max(best, iou(d.det.box, g.box));
    }
    if (best < 0.0) continue;  // image without ground truth: no sample
    sigmas.push_back(d.det.sigma_mean);
    ious.push_back(best);
  }
  if (sigmas.size() < 30) {
    throw std::runtime_error("uncertainty_iou_correlation: need >= 30 matched detections, got " +
                             std::to_string(sigmas.size()));
  }

  CorrelationReport report;
  report.sample_count = static_cast<int>(sigmas.size());
  report.spearman_rho = spearman(sigmas, ious);

  // Decile bins over sigma-mean for plot emission.
  std::vector<int> order(sigmas.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return sigmas[static_cast<std::size_t>(a)] < sigmas[static_cast<std::size_t>(b)];
  });
  report.bins.assign(10, CorrelationBin{});
  for (std::size_t k = 0; k < order.size(); ++k) {
    const std::size_t bin = std::min<std::size_t>(9, k * 10 / order.size());
    auto& b = report.bins[bin];
    b.sigma_mean += sigmas[static_cast<std::size_t>(order[k])];
    b.iou_mean += ious[static_cast<std::size_t>(order[k])];
    b.count++;
  }
  for (auto& b : report.bins) {
    if (b.count > 0) {
      b.sigma_mean /= b.count;
      b.iou_mean /= b.count;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// file formats
// ---------------------------------------------------------------------------

void write_detection_dump(const std::string& path, const std::vector<DetectionRecord>& dets) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_detection_dump: cannot open " + path);
  out << "image_id,class,score,x1,y1,x2,y2,sigma1,sigma2,sigma3,sigma4,sigma_mean\n";
  out.precision(17);
  for (const auto& d : dets) {
    out << d.image_id << "," << d.det.class_id << "," << d.det.score << "," << d.det.box.x1 << ","
        << d.det.box.y1 << "," << d.det.box.x2 << "," << d.det.box.y2 << "," << d.det.sigma[0]
        << "," << d.det.sigma[1] << "," << d.det.sigma[2] << "," << d.det.sigma[3] << ","
        << d.det.sigma_mean << "\n";
  }
}

std::vector<DetectionRecord> read_detection_dump(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_detection_dump: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("read_detection_dump: empty file");
  std::vector<DetectionRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string tok;
    std::vector<double> f;
    while (std::getline(ss, tok, ',')) f.push_back(std::stod(tok));
    if (f.size() != 12) throw std::runtime_error("read_detection_dump: malformed row: " + line);
    DetectionRecord r;
    r.image_id = static_cast<int>(f[0]);
    r.det.class_id = static_cast<int>(f[1]);
    r.det.score = f[2];
    r.det.box = Box{f[3], f[4], f[5], f[6]};
    r.det.sigma = {f[7], f[8], f[9], f[10]};
    r.det.sigma_mean = f[11];
    out.push_back(r);
  }
  return out;
}

void write_ap_report(const std::string& path, const APReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_ap_report: cannot open " + path);
  out.precision(17);
  out << "class";
  for (double t : report.thresholds) out << ",ap" << static_cast<int>(std::lround(t * 100));
  out << "\n";
  for (const auto& [c, aps] : report.per_class) {
    out << c;
    for (double ap : aps) out << "," << ap;
    out << "\n";
  }
  out << "summary,ap50=" << report.ap50 << ",ap75=" << report.ap75
      << ",ap50_95=" << report.ap50_95 << "\n";
}

void write_correlation_report(const std::string& path, const CorrelationReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_correlation_report: cannot open " + path);
  out.precision(17);
  out << "spearman_rho," << report.spearman_rho << "\n";
  out << "sample_count," << report.sample_count << "\n";
  out << "bin,sigma_mean,iou_mean,count\n";
  for (std::size_t i = 0; i < report.bins.size(); ++i) {
    out << i << "," << report.bins[i].sigma_mean << "," << report.bins[i].iou_mean << ","
        << report.bins[i].count << "\n";
  }
}

}  // namespace deskdet
