#pragma once

// Tracking head: channel-concatenated dual-modality search features are
// reshaped to a map and pushed through Conv-BN-ReLU stacks into three
// sigmoid-bounded outputs (score 1ch, center offset 2ch, box size 2ch).
// Also houses the training losses and the reliability score head.

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "evtrack/autodiff.hpp"
#include "evtrack/block.hpp"
#include "evtrack/errors.hpp"
#include "evtrack/ops.hpp"

namespace evtrack {

// [B, N, C] tokens in row-major grid order -> [B, C, G, G] map.
template <typename T>
Var<T> tokens_to_map(Tape<T>& tape, const Var<T>& x, std::size_t grid) {
  const auto& s = x->value.shape();
  if (s.size() != 3 || s[1] != grid * grid) {
    throw ShapeError("tokens_to_map: " + shape_str(s) + " is not a " +
                     std::to_string(grid) + "x" + std::to_string(grid) +
                     " grid");
  }
  const std::size_t B = s[0], N = s[1], C = s[2];
  NdArray<T> y({B, C, grid, grid});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        y.at(b, c, n / grid, n % grid) = x->value.at(b, n, c);
  auto out = make_var(std::move(y));
  if (tape.enabled() && x->requires_grad) {
    Var<T> xv = x;
    tape.record([xv, out, B, N, C, grid] {
      const NdArray<T>& dy = out->grad_buffer();
      NdArray<T>& dx = xv->grad_buffer();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c)
            dx.at(b, n, c) += dy.at(b, c, n / grid, n % grid);
    });
  }
  return out;
}

template <typename T>
struct ConvBnRelu {
  // No conv bias: the following normalization would cancel it anyway.
  Var<T> conv_w;
  Var<T> bn_gamma, bn_beta;

  Var<T> forward(Tape<T>& tape, const Var<T>& x) const {
    auto zero_bias = make_const(NdArray<T>::zeros({conv_w->value.dim(0)}));
    auto y = ops::conv2d(tape, x, conv_w, zero_bias);
    y = ops::batch_norm2d(tape, y, bn_gamma, bn_beta);
    return ops::relu(tape, y);
  }
  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".conv_w", conv_w});
    out.push_back({prefix + ".bn_gamma", bn_gamma});
    out.push_back({prefix + ".bn_beta", bn_beta});
  }
};

template <typename T>
struct SubHead {
  std::vector<ConvBnRelu<T>> stages;
  Var<T> final_w, final_b;  // 1x1 projection to the output channels

  Var<T> forward(Tape<T>& tape, const Var<T>& x) const {
    Var<T> h = x;
    for (const auto& stage : stages) h = stage.forward(tape, h);
    return ops::sigmoid(tape, ops::conv2d(tape, h, final_w, final_b));
  }
  void collect(ParamList<T>& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < stages.size(); ++i)
      stages[i].collect(out, prefix + ".stage" + std::to_string(i));
    out.push_back({prefix + ".final_w", final_w});
    out.push_back({prefix + ".final_b", final_b});
  }
};

template <typename T>
struct HeadOutput {
  Var<T> score;   // [B, 1, G, G], (0,1)
  Var<T> offset;  // [B, 2, G, G], (0,1)
  Var<T> size;    // [B, 2, G, G], (0,1)
};

template <typename T>
struct TrackingHead {
  std::size_t width = 128;
  SubHead<T> score, offset, size;

  // Inputs are search-region tokens only, one sequence per modality.
  HeadOutput<T> forward(Tape<T>& tape, const Var<T>& rgb_search,
                        const Var<T>& event_search) const {
    const std::size_t n = rgb_search->value.dim(1);
    const auto grid = static_cast<std::size_t>(std::llround(std::sqrt(
        static_cast<double>(n))));
    if (grid * grid != n) {
      throw ShapeError("tracking head: token count " + std::to_string(n) +
                       " is not a square grid");
    }
    auto fused = ops::concat_channels(tape, rgb_search, event_search);
    auto map = tokens_to_map(tape, fused, grid);
    HeadOutput<T> out;
    out.score = score.forward(tape, map);
    out.offset = offset.forward(tape, map);
    out.size = size.forward(tape, map);
    return out;
  }

  void collect(ParamList<T>& out) const {
    score.collect(out, "head.score");
    offset.collect(out, "head.offset");
    size.collect(out, "head.size");
  }
};

template <typename T>
SubHead<T> init_sub_head(std::mt19937_64& rng, std::size_t in_ch,
                         std::size_t width, std::size_t stages,
                         std::size_t out_ch) {
  SubHead<T> sh;
  std::size_t ch = in_ch;
  for (std::size_t i = 0; i < stages; ++i) {
    ConvBnRelu<T> s;
    s.conv_w = init_normal<T>(rng, {width, ch, 3, 3},
                              T{1} / std::sqrt(static_cast<T>(9 * ch)));
    s.bn_gamma = make_var(NdArray<T>::ones({width}));
    s.bn_beta = make_var(NdArray<T>::zeros({width}));
    sh.stages.push_back(std::move(s));
    ch = width;
  }
  // Zero-initialized final projection: every map starts at sigmoid(0)=0.5.
  sh.final_w = make_var(NdArray<T>::zeros({out_ch, width, 1, 1}));
  sh.final_b = make_var(NdArray<T>::zeros({out_ch}));
  return sh;
}

template <typename T>
TrackingHead<T> init_tracking_head(std::mt19937_64& rng, std::size_t embed_dim,
                                   std::size_t width = 128,
                                   std::size_t stages = 4) {
  TrackingHead<T> head;
  head.width = width;
  head.score = init_sub_head<T>(rng, 2 * embed_dim, width, stages, 1);
  head.offset = init_sub_head<T>(rng, 2 * embed_dim, width, stages, 2);
  head.size = init_sub_head<T>(rng, 2 * embed_dim, width, stages, 2);
  return head;
}

// ---------------------------------------------------------------------------
// decoding

// Box normalized to the search region, center format.
struct NormBox {
  double cx = 0, cy = 0, w = 0, h = 0;
};

struct Decoded {
  NormBox box;
  double peak_score = 0;
  std::size_t cell_i = 0, cell_j = 0;
};

// Argmax over the score map (row-major tie-break: smallest flat index),
// then center = (cell + offset) / G and size read at the peak cell.
template <typename T>
Decoded decode_box(const NdArray<T>& score, const NdArray<T>& offset,
                   const NdArray<T>& size, std::size_t batch = 0) {
  const std::size_t G = score.dim(2);
  std::size_t best = 0;
  const T* sp = score.data() + batch * score.dim(1) * G * G;
  for (std::size_t i = 1; i < G * G; ++i)
    if (sp[i] > sp[best]) best = i;
  const std::size_t bi = best / G, bj = best % G;
  Decoded d;
  d.cell_i = bi;
  d.cell_j = bj;
  d.peak_score = static_cast<double>(sp[best]);
  const double off_x = static_cast<double>(offset.at(batch, 0, bi, bj));
  const double off_y = static_cast<double>(offset.at(batch, 1, bi, bj));
  d.box.cx = (static_cast<double>(bj) + off_x) / static_cast<double>(G);
  d.box.cy = (static_cast<double>(bi) + off_y) / static_cast<double>(G);
  d.box.w = static_cast<double>(size.at(batch, 0, bi, bj));
  d.box.h = static_cast<double>(size.at(batch, 1, bi, bj));
  return d;
}

template <typename T>
Decoded decode_box(const HeadOutput<T>& out, std::size_t batch = 0) {
  return decode_box(out.score->value, out.offset->value, out.size->value,
                    batch);
}

// Assembles the normalized box read at a fixed grid cell into a [B, 4]
// (cx, cy, w, h) tensor; used by the regression losses.
template <typename T>
Var<T> box_at_cell(Tape<T>& tape, const HeadOutput<T>& out, std::size_t i,
                   std::size_t j) {
  auto off = ops::gather_cell(tape, out.offset, i, j);  // [B, 2]
  auto sz = ops::gather_cell(tape, out.size, i, j);     // [B, 2]
  const std::size_t B = off->value.dim(0);
  const std::size_t G = out.score->value.dim(2);
  const T inv_g = T{1} / static_cast<T>(G);
  NdArray<T> box({B, 4});
  for (std::size_t b = 0; b < B; ++b) {
    box.at(b, 0) = (static_cast<T>(j) + off->value.at(b, 0)) * inv_g;
    box.at(b, 1) = (static_cast<T>(i) + off->value.at(b, 1)) * inv_g;
    box.at(b, 2) = sz->value.at(b, 0);
    box.at(b, 3) = sz->value.at(b, 1);
  }
  auto result = make_var(std::move(box));
  if (tape.enabled()) {
    tape.record([off, sz, result, B, inv_g] {
      const NdArray<T>& dy = result->grad_buffer();
      if (off->requires_grad) {
        NdArray<T>& doff = off->grad_buffer();
        for (std::size_t b = 0; b < B; ++b) {
          doff.at(b, 0) += dy.at(b, 0) * inv_g;
          doff.at(b, 1) += dy.at(b, 1) * inv_g;
        }
      }
      if (sz->requires_grad) {
        NdArray<T>& dsz = sz->grad_buffer();
        for (std::size_t b = 0; b < B; ++b) {
          dsz.at(b, 0) += dy.at(b, 2);
          dsz.at(b, 1) += dy.at(b, 3);
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// losses

// Gaussian-weighted target map: 1 at the positive cell, exp-decayed
// elsewhere with sigma = G/12.
template <typename T>
NdArray<T> gaussian_score_target(std::size_t grid, std::size_t gt_i,
                                 std::size_t gt_j) {
  NdArray<T> target({1, 1, grid, grid});
  const double sigma = static_cast<double>(grid) / 12.0;
  for (std::size_t i = 0; i < grid; ++i)
    for (std::size_t j = 0; j < grid; ++j) {
      const double di = static_cast<double>(i) - static_cast<double>(gt_i);
      const double dj = static_cast<double>(j) - static_cast<double>(gt_j);
      target.at(0, 0, i, j) =
          static_cast<T>(std::exp(-(di * di + dj * dj) / (2 * sigma * sigma)));
    }
  target.at(0, 0, gt_i, gt_j) = T{1};
  return target;
}

// Penalty-reduced focal loss over the score map:
//   -mean[ (1-p)^2 log p            where t == 1
//          (1-t)^4 p^2 log(1-p)     elsewhere ]
// p is clamped to [1e-7, 1-1e-7]; clamped cells pass no gradient.
template <typename T>
Var<T> focal_loss(Tape<T>& tape, const Var<T>& score,
                  const NdArray<T>& target) {
  if (!score->value.same_shape(target)) {
    throw ShapeError("focal_loss: score " + shape_str(score->value.shape()) +
                     " vs target " + shape_str(target.shape()));
  }
  const std::size_t n = score->value.numel();
  const T lo = static_cast<T>(1e-7), hi = T{1} - static_cast<T>(1e-7);
  T acc = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const T p = std::clamp(score->value[k], lo, hi);
    const T t = target[k];
    if (t == T{1}) {
      acc -= (T{1} - p) * (T{1} - p) * std::log(p);
    } else {
      const T w = (T{1} - t) * (T{1} - t);
      acc -= w * w * p * p * std::log(T{1} - p);
    }
  }
  auto out = make_var(NdArray<T>::scalar(acc / static_cast<T>(n)));
  if (tape.enabled() && score->requires_grad) {
    Var<T> sv = score;
    auto tgt = std::make_shared<NdArray<T>>(target);
    tape.record([sv, out, tgt, n, lo, hi] {
      const T g = out->grad_buffer()[0] / static_cast<T>(n);
      NdArray<T>& dx = sv->grad_buffer();
      for (std::size_t k = 0; k < n; ++k) {
        const T raw = sv->value[k];
        if (raw < lo || raw > hi) continue;
        const T p = raw;
        const T t = (*tgt)[k];
        T dldp;
        if (t == T{1}) {
          dldp = -(-T{2} * (T{1} - p) * std::log(p) +
                   (T{1} - p) * (T{1} - p) / p);
        } else {
          const T w = (T{1} - t) * (T{1} - t);
          dldp = -w * w *
                 (T{2} * p * std::log(T{1} - p) - p * p / (T{1} - p));
        }
        dx[k] += g * dldp;
      }
    });
  }
  return out;
}

namespace detail {

struct GiouParts {
  double loss;
  double d_cx, d_cy, d_w, d_h;
};

inline GiouParts giou_with_grad(double cx, double cy, double w, double h,
                                double gx, double gy, double gw, double gh) {
  const double p1x = cx - w / 2, p2x = cx + w / 2;
  const double p1y = cy - h / 2, p2y = cy + h / 2;
  const double g1x = gx - gw / 2, g2x = gx + gw / 2;
  const double g1y = gy - gh / 2, g2y = gy + gh / 2;

  const double ix1 = std::max(p1x, g1x), ix2 = std::min(p2x, g2x);
  const double iy1 = std::max(p1y, g1y), iy2 = std::min(p2y, g2y);
  const double iw = std::max(0.0, ix2 - ix1), ih = std::max(0.0, iy2 - iy1);
  const double inter = iw * ih;

  const double area_p = w * h, area_g = gw * gh;
  const double uni = area_p + area_g - inter;
  const double hx1 = std::min(p1x, g1x), hx2 = std::max(p2x, g2x);
  const double hy1 = std::min(p1y, g1y), hy2 = std::max(p2y, g2y);
  const double hull = (hx2 - hx1) * (hy2 - hy1);

  GiouParts out{};
  // giou = inter/uni + uni/hull - 1; loss = 1 - giou
  out.loss = 1.0 - (inter / uni + uni / hull - 1.0);

  // Partials of inter/hull/area w.r.t. the box, with active min/max branches.
  auto d_inter = [&](double* dcx, double* dcy, double* dw, double* dh) {
    *dcx = *dcy = *dw = *dh = 0;
    if (inter <= 0) return;
    // d(iw)/d{p1x,p2x} with p1x = cx - w/2, p2x = cx + w/2
    const double diw_dp1x = (p1x > g1x) ? -1.0 : 0.0;
    const double diw_dp2x = (p2x < g2x) ? 1.0 : 0.0;
    const double dih_dp1y = (p1y > g1y) ? -1.0 : 0.0;
    const double dih_dp2y = (p2y < g2y) ? 1.0 : 0.0;
    *dcx = ih * (diw_dp1x + diw_dp2x);
    *dw = ih * (diw_dp1x * -0.5 + diw_dp2x * 0.5);
    *dcy = iw * (dih_dp1y + dih_dp2y);
    *dh = iw * (dih_dp1y * -0.5 + dih_dp2y * 0.5);
  };
  auto d_hull = [&](double* dcx, double* dcy, double* dw, double* dh) {
    const double hw = hx2 - hx1, hh = hy2 - hy1;
    const double dhx1 = (p1x < g1x) ? 1.0 : 0.0;
    const double dhx2 = (p2x > g2x) ? 1.0 : 0.0;
    const double dhy1 = (p1y < g1y) ? 1.0 : 0.0;
    const double dhy2 = (p2y > g2y) ? 1.0 : 0.0;
    *dcx = hh * (dhx2 - dhx1);
    *dw = hh * (dhx2 * 0.5 + dhx1 * 0.5);
    *dcy = hw * (dhy2 - dhy1);
    *dh = hw * (dhy2 * 0.5 + dhy1 * 0.5);
  };

  double di_cx, di_cy, di_w, di_h;
  d_inter(&di_cx, &di_cy, &di_w, &di_h);
  double dh_cx, dh_cy, dh_w, dh_h;
  d_hull(&dh_cx, &dh_cy, &dh_w, &dh_h);
  const double da_w = h, da_h = w;  // d(area_p)

  // dG/dI, dG/dA_p, dG/dHull with U = A_p + A_g - I
  const double dg_di = (uni + inter) / (uni * uni) - 1.0 / hull;
  const double dg_da = 1.0 / hull - inter / (uni * uni);
  const double dg_dh = -uni / (hull * hull);

  out.d_cx = -(dg_di * di_cx + dg_dh * dh_cx);
  out.d_cy = -(dg_di * di_cy + dg_dh * dh_cy);
  out.d_w = -(dg_di * di_w + dg_da * da_w + dg_dh * dh_w);
  out.d_h = -(dg_di * di_h + dg_da * da_h + dg_dh * dh_h);
  return out;
}

}  // namespace detail

// Scalar generalized overlap of two center-format boxes.
inline double giou(const NormBox& a, const NormBox& b) {
  return 1.0 - detail::giou_with_grad(a.cx, a.cy, a.w, a.h, b.cx, b.cy, b.w,
                                      b.h)
                   .loss;
}

// 1 - GIoU, averaged over the batch. pred/gt are [B, 4] center-format.
template <typename T>
Var<T> giou_loss(Tape<T>& tape, const Var<T>& pred, const NdArray<T>& gt) {
  if (!pred->value.same_shape(gt)) {
    throw ShapeError("giou_loss: pred " + shape_str(pred->value.shape()) +
                     " vs gt " + shape_str(gt.shape()));
  }
  const std::size_t B = pred->value.dim(0);
  for (std::size_t b = 0; b < B; ++b) {
    if (!(gt.at(b, 2) > T{0}) || !(gt.at(b, 3) > T{0})) {
      throw InputError("giou_loss: zero-area ground-truth box at batch " +
                       std::to_string(b));
    }
  }
  T acc = 0;
  std::vector<detail::GiouParts> parts(B);
  for (std::size_t b = 0; b < B; ++b) {
    parts[b] = detail::giou_with_grad(
        pred->value.at(b, 0), pred->value.at(b, 1), pred->value.at(b, 2),
        pred->value.at(b, 3), gt.at(b, 0), gt.at(b, 1), gt.at(b, 2),
        gt.at(b, 3));
    acc += static_cast<T>(parts[b].loss);
  }
  auto out = make_var(NdArray<T>::scalar(acc / static_cast<T>(B)));
  if (tape.enabled() && pred->requires_grad) {
    Var<T> pv = pred;
    auto saved = std::make_shared<std::vector<detail::GiouParts>>(
        std::move(parts));
    tape.record([pv, out, saved, B] {
      const T g = out->grad_buffer()[0] / static_cast<T>(B);
      NdArray<T>& dx = pv->grad_buffer();
      for (std::size_t b = 0; b < B; ++b) {
        dx.at(b, 0) += g * static_cast<T>((*saved)[b].d_cx);
        dx.at(b, 1) += g * static_cast<T>((*saved)[b].d_cy);
        dx.at(b, 2) += g * static_cast<T>((*saved)[b].d_w);
        dx.at(b, 3) += g * static_cast<T>((*saved)[b].d_h);
      }
    });
  }
  return out;
}

// Mean absolute error over all box coordinates.
template <typename T>
Var<T> l1_loss(Tape<T>& tape, const Var<T>& pred, const NdArray<T>& gt) {
  if (!pred->value.same_shape(gt)) {
    throw ShapeError("l1_loss: pred " + shape_str(pred->value.shape()) +
                     " vs gt " + shape_str(gt.shape()));
  }
  const std::size_t n = pred->value.numel();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i)
    acc += std::abs(pred->value[i] - gt[i]);
  auto out = make_var(NdArray<T>::scalar(acc / static_cast<T>(n)));
  if (tape.enabled() && pred->requires_grad) {
    Var<T> pv = pred;
    auto tgt = std::make_shared<NdArray<T>>(gt);
    tape.record([pv, out, tgt, n] {
      const T g = out->grad_buffer()[0] / static_cast<T>(n);
      NdArray<T>& dx = pv->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const T d = pv->value[i] - (*tgt)[i];
        dx[i] += g * (d > T{0} ? T{1} : (d < T{0} ? T{-1} : T{0}));
      }
    });
  }
  return out;
}

inline constexpr double kFocalWeight = 1.0;
inline constexpr double kL1Weight = 14.0;
inline constexpr double kGiouWeight = 1.0;

template <typename T>
Var<T> total_loss(Tape<T>& tape, const Var<T>& focal, const Var<T>& l1,
                  const Var<T>& giou_term) {
  auto weighted = ops::scale(tape, l1, static_cast<T>(kL1Weight));
  auto acc = ops::add(tape, ops::scale(tape, focal, static_cast<T>(kFocalWeight)),
                      weighted);
  return ops::add(tape, acc, ops::scale(tape, giou_term,
                                        static_cast<T>(kGiouWeight)));
}

inline double total_loss(double focal, double l1, double giou_term) {
  return kFocalWeight * focal + kL1Weight * l1 + kGiouWeight * giou_term;
}

// ---------------------------------------------------------------------------
// reliability score head

template <typename T>
struct ScoreHead {
  Dense<T> hidden;  // 2C -> C
  Dense<T> out;     // C -> 1

  // Mean-pooled tokens over both modalities -> two-layer perceptron.
  Var<T> forward(Tape<T>& tape, const Var<T>& f_rgb,
                 const Var<T>& f_event) const {
    auto fused = ops::concat_channels(tape, f_rgb, f_event);
    auto pooled = ops::mean_tokens(tape, fused);  // [B, 2C]
    auto h = ops::relu(tape, hidden.forward(tape, pooled));
    return out.forward(tape, h);  // [B, 1] logits
  }
  void collect(ParamList<T>& params) const {
    hidden.collect(params, "score_head.hidden");
    out.collect(params, "score_head.out");
  }
};

template <typename T>
ScoreHead<T> init_score_head(std::mt19937_64& rng, std::size_t embed_dim) {
  ScoreHead<T> sh;
  sh.hidden = init_dense<T>(rng, 2 * embed_dim, embed_dim, /*with_bias=*/true);
  sh.out = init_dense<T>(rng, embed_dim, 1, /*with_bias=*/true);
  return sh;
}

// Stable binary cross-entropy on logits, averaged over the batch.
// Labels must be exactly 0 or 1.
template <typename T>
Var<T> bce_logits_loss(Tape<T>& tape, const Var<T>& logits,
                       const NdArray<T>& labels) {
  if (logits->value.numel() != labels.numel()) {
    throw ShapeError("bce_logits_loss: " + shape_str(logits->value.shape()) +
                     " vs " + shape_str(labels.shape()));
  }
  const std::size_t n = labels.numel();
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != T{0} && labels[i] != T{1}) {
      throw InputError("bce_logits_loss: label " +
                       std::to_string(static_cast<double>(labels[i])) +
                       " outside {0,1}");
    }
  }
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T x = logits->value[i];
    const T y = labels[i];
    acc += std::max(x, T{0}) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  auto out = make_var(NdArray<T>::scalar(acc / static_cast<T>(n)));
  if (tape.enabled() && logits->requires_grad) {
    Var<T> lv = logits;
    auto lbl = std::make_shared<NdArray<T>>(labels);
    tape.record([lv, out, lbl, n] {
      const T g = out->grad_buffer()[0] / static_cast<T>(n);
      NdArray<T>& dx = lv->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        dx[i] += g * (ops::sigmoid_scalar(lv->value[i]) - (*lbl)[i]);
    });
  }
  return out;
}

}  // namespace evtrack
