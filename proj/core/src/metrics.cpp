#include "evtrack/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace evtrack {

double iou(const RectF& a, const RectF& b) {
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) -
                                      std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) -
                                      std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double center_error_px(const RectF& pred, const RectF& gt) {
  const double dx = pred.cx() - gt.cx();
  const double dy = pred.cy() - gt.cy();
  return std::sqrt(dx * dx + dy * dy);
}

double normalized_center_error(const RectF& pred, const RectF& gt) {
  const double dx = (pred.cx() - gt.cx()) / gt.w;
  const double dy = (pred.cy() - gt.cy()) / gt.h;
  return std::sqrt(dx * dx + dy * dy);
}

SequenceMetrics evaluate_tracking(std::span<const RectF> pred,
                                  std::span<const RectF> gt,
                                  double px_threshold, double norm_threshold) {
  if (pred.size() != gt.size()) {
    throw InputError("evaluate_tracking: " + std::to_string(pred.size()) +
                     " predictions vs " + std::to_string(gt.size()) +
                     " ground-truth boxes");
  }
  if (pred.empty()) throw InputError("evaluate_tracking: empty sequence");

  SequenceMetrics m;
  const std::size_t n = pred.size();
  std::vector<double> overlaps(n);
  for (std::size_t i = 0; i < n; ++i) {
    overlaps[i] = iou(pred[i], gt[i]);
    if (center_error_px(pred[i], gt[i]) < px_threshold) m.pr += 1;
    if (normalized_center_error(pred[i], gt[i]) < norm_threshold) m.npr += 1;
  }
  m.pr /= static_cast<double>(n);
  m.npr /= static_cast<double>(n);

  m.success_curve.resize(21);
  for (std::size_t k = 0; k < 21; ++k) {
    const double threshold = 0.05 * static_cast<double>(k);
    double hits = 0;
    for (const double o : overlaps)
      if (o > threshold) hits += 1;
    m.success_curve[k] = hits / static_cast<double>(n);
  }
  m.sr_at_05 = m.success_curve[10];
  double auc = 0;
  for (const double v : m.success_curve) auc += v;
  m.sr_auc = auc / 21.0;
  return m;
}

std::string metrics_report(const SequenceMetrics& m) {
  char buf[128];
  std::snprintf(buf, sizeof(buf),
                "PR=%.4f\nNPR=%.4f\nSR@0.5=%.4f\nSR_auc=%.4f\n", m.pr, m.npr,
                m.sr_at_05, m.sr_auc);
  return buf;
}

void write_results(const std::string& path,
                   const std::vector<FrameResult>& results) {
  std::ofstream out(path);
  if (!out) throw InputError("write_results: cannot open " + path);
  char buf[160];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof(buf), "%.4f,%.4f,%.4f,%.4f,%.6f\n", r.box.x,
                  r.box.y, r.box.w, r.box.h, r.score);
    out << buf;
  }
}

std::vector<FrameResult> read_results(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("read_results: cannot open " + path);
  std::vector<FrameResult> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    FrameResult r;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf,%lf", &r.box.x, &r.box.y,
                    &r.box.w, &r.box.h, &r.score) != 5) {
      throw InputError("read_results: " + path + ":" +
                       std::to_string(line_no) + ": bad line '" + line + "'");
    }
    out.push_back(r);
  }
  return out;
}

void write_ground_truth(const std::string& path,
                        const std::vector<RectF>& boxes) {
  std::ofstream out(path);
  if (!out) throw InputError("write_ground_truth: cannot open " + path);
  char buf[128];
  for (const auto& b : boxes) {
    std::snprintf(buf, sizeof(buf), "%.4f,%.4f,%.4f,%.4f\n", b.x, b.y, b.w,
                  b.h);
    out << buf;
  }
}

std::vector<RectF> read_ground_truth(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("read_ground_truth: cannot open " + path);
  std::vector<RectF> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    RectF b;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf", &b.x, &b.y, &b.w,
                    &b.h) != 4) {
      throw InputError("read_ground_truth: " + path + ":" +
                       std::to_string(line_no) + ": bad line '" + line + "'");
    }
    out.push_back(b);
  }
  return out;
}

}  // namespace evtrack
