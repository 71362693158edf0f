#pragma once

// Single-object tracking metrics: precision at a pixel threshold, its
// box-normalized variant, and success (overlap) at 0.5 plus the area under
// the success curve over thresholds 0, 0.05, ..., 1.0. All comparisons are
// strict (error < threshold, overlap > threshold).

#include <span>
#include <vector>

#include "evtrack/image.hpp"

namespace evtrack {

double iou(const RectF& a, const RectF& b);
double center_error_px(const RectF& pred, const RectF& gt);
double normalized_center_error(const RectF& pred, const RectF& gt);

struct SequenceMetrics {
  double pr = 0;      // center error < 20 px
  double npr = 0;     // normalized center error < 0.2
  double sr_at_05 = 0; // overlap > 0.5
  double sr_auc = 0;  // mean success over 21 overlap thresholds
  std::vector<double> success_curve;  // one value per threshold
};

SequenceMetrics evaluate_tracking(std::span<const RectF> pred,
                                  std::span<const RectF> gt,
                                  double px_threshold = 20.0,
                                  double norm_threshold = 0.2);

// `PR=` / `NPR=` / `SR@0.5=` / `SR_auc=` lines, four decimals.
std::string metrics_report(const SequenceMetrics& m);

// Results file interchange: one `x,y,w,h,score` line per frame.
struct FrameResult {
  RectF box;
  double score = 0;
};
void write_results(const std::string& path,
                   const std::vector<FrameResult>& results);
std::vector<FrameResult> read_results(const std::string& path);

// Ground truth: one `x,y,w,h` line per frame.
void write_ground_truth(const std::string& path,
                        const std::vector<RectF>& boxes);
std::vector<RectF> read_ground_truth(const std::string& path);

}  // namespace evtrack
