#pragma once

// Online tracking loop: initialization from the first frame, per-frame
// inference with search-region cropping, the low-score re-localization
// state machine, and the interval+confidence dynamic template update.

#include <cmath>
#include <cstdint>
#include <vector>

#include "evtrack/config.hpp"
#include "evtrack/event.hpp"
#include "evtrack/image.hpp"
#include "evtrack/metrics.hpp"
#include "evtrack/model.hpp"
#include "evtrack/synthetic.hpp"

namespace evtrack {

template <typename T>
struct TrackerState {
  NdArray<T> rgb_template_static, event_template_static;    // [1,3,S,S]
  NdArray<T> rgb_template_dynamic, event_template_dynamic;  // [1,3,S,S]
  RectF last_box;
  std::size_t low_score_run = 0;
  bool search_enlarged = false;
  std::size_t frames_since_update = 0;

  double search_context(const TrackerConfig& cfg) const {
    return cfg.search_context * (search_enlarged ? cfg.scale_factor : 1.0);
  }
};

// Crops around a box center and packages the patch as a [1,3,S,S] constant.
template <typename T>
NdArray<T> crop_patch(const NdArray<double>& image, const RectF& box,
                      double context, std::size_t side,
                      CropAffine* affine = nullptr) {
  CropSpec spec{box.cx(), box.cy(), box.w, box.h, context, side};
  NdArray<double> patch = crop_region(image, spec, affine);
  return patch.template cast<T>().reshaped({1, 3, side, side});
}

// Low-score re-localization rule: a run of k consecutive frames below the
// threshold enlarges the search context; the first frame at or above the
// threshold restores it.
template <typename T>
void apply_score_rule(TrackerState<T>& state, double peak_score,
                      const TrackerConfig& cfg) {
  if (peak_score < cfg.score_threshold) {
    ++state.low_score_run;
    if (state.low_score_run >= cfg.k_frames) state.search_enlarged = true;
  } else {
    state.low_score_run = 0;
    state.search_enlarged = false;
  }
}

// Dynamic template refresh is due when the interval has elapsed and the
// reliability probability strictly exceeds the threshold.
template <typename T>
bool template_update_due(const TrackerState<T>& state, double score_prob,
                         const TrackerConfig& cfg) {
  return state.frames_since_update >= cfg.update_interval &&
         score_prob > cfg.update_score_threshold;
}

template <typename T>
TrackerState<T> tracker_init(const NdArray<double>& rgb0,
                             const NdArray<double>& event_frame0,
                             const RectF& box0, const TrackerConfig& tcfg,
                             const ModelConfig& mcfg) {
  if (!(box0.w > 0) || !(box0.h > 0)) {
    throw InputError("tracker_init: degenerate box");
  }
  const auto W = static_cast<double>(rgb0.dim(2));
  const auto H = static_cast<double>(rgb0.dim(1));
  if (box0.cx() < 0 || box0.cx() >= W || box0.cy() < 0 || box0.cy() >= H) {
    throw InputError("tracker_init: box center outside the frame");
  }
  TrackerState<T> state;
  state.rgb_template_static = crop_patch<T>(rgb0, box0, tcfg.template_context,
                                            mcfg.template_side);
  state.event_template_static = crop_patch<T>(
      event_frame0, box0, tcfg.template_context, mcfg.template_side);
  state.rgb_template_dynamic = state.rgb_template_static;
  state.event_template_dynamic = state.event_template_static;
  state.last_box = box0;
  return state;
}

template <typename T>
struct TrackStep {
  RectF box;
  double peak_score = 0;
  double score_prob = 0;
  bool template_updated = false;
};

// Refreshes the dynamic templates from the current frame when due.
template <typename T>
bool maybe_update_template(TrackerState<T>& state, const NdArray<double>& rgb,
                           const NdArray<double>& event_frame,
                           const RectF& box, double score_prob,
                           const TrackerConfig& tcfg,
                           const ModelConfig& mcfg) {
  ++state.frames_since_update;
  if (!template_update_due(state, score_prob, tcfg)) return false;
  state.rgb_template_dynamic =
      crop_patch<T>(rgb, box, tcfg.template_context, mcfg.template_side);
  state.event_template_dynamic = crop_patch<T>(
      event_frame, box, tcfg.template_context, mcfg.template_side);
  state.frames_since_update = 0;
  return true;
}

template <typename T>
TrackStep<T> track_frame(TrackerState<T>& state, const NdArray<double>& rgb,
                         const NdArray<double>& event_frame,
                         const TrackerModel<T>& model,
                         const TrackerConfig& tcfg) {
  const std::size_t S = model.cfg.search_side;
  CropAffine aff;
  CropSpec spec{state.last_box.cx(), state.last_box.cy(), state.last_box.w,
                state.last_box.h, state.search_context(tcfg), S};
  NdArray<double> rgb_patch = crop_region(rgb, spec, &aff);
  NdArray<double> event_patch = crop_region(event_frame, spec);

  ModelInput<T> in;
  in.rgb_template_static = make_const(state.rgb_template_static);
  in.rgb_template_dynamic = make_const(state.rgb_template_dynamic);
  in.rgb_search =
      make_const(rgb_patch.template cast<T>().reshaped({1, 3, S, S}));
  in.event_template_static = make_const(state.event_template_static);
  in.event_template_dynamic = make_const(state.event_template_dynamic);
  in.event_search =
      make_const(event_patch.template cast<T>().reshaped({1, 3, S, S}));

  Tape<T> tape(false);
  auto out = model.forward(tape, in, SelectMode::kArgmax);
  const Decoded decoded = decode_box(out.head);

  // Normalized coordinates to image pixels through the crop affine; the
  // -0.5 moves from edge-based to pixel-center coordinates.
  const double side = static_cast<double>(S);
  TrackStep<T> step;
  step.box = RectF::from_center(
      aff.to_image_x(decoded.box.cx * side - 0.5),
      aff.to_image_y(decoded.box.cy * side - 0.5),
      decoded.box.w * side * aff.scale_x, decoded.box.h * side * aff.scale_y);
  step.peak_score = decoded.peak_score;
  step.score_prob =
      ops::sigmoid_scalar(static_cast<double>(out.score_logit->value[0]));

  step.template_updated = maybe_update_template(
      state, rgb, event_frame, step.box, step.score_prob, tcfg, model.cfg);
  apply_score_rule(state, step.peak_score, tcfg);
  state.last_box = step.box;
  return step;
}

// Tracks a whole in-memory sequence. Frame 0 initializes from ground truth
// and is emitted with a unit score.
template <typename T>
std::vector<FrameResult> run_tracker(const TrackerModel<T>& model,
                                     const SyntheticDataset& data,
                                     const TrackerConfig& tcfg) {
  if (data.frames.empty()) throw InputError("run_tracker: empty sequence");
  const std::size_t H = data.frames[0].dim(1);
  const std::size_t W = data.frames[0].dim(2);

  NdArray<double> zero_events({3, H, W});
  auto state = tracker_init<T>(data.frames[0], zero_events, data.boxes[0],
                               tcfg, model.cfg);
  std::vector<FrameResult> results;
  results.push_back({data.boxes[0], 1.0});
  for (std::size_t k = 1; k < data.frames.size(); ++k) {
    NdArray<double> events = stack_events<double>(
        data.events.events, data.frame_time(k - 1), data.frame_time(k), H, W);
    auto step = track_frame(state, data.frames[k], events, model, tcfg);
    results.push_back({step.box, step.peak_score});
  }
  return results;
}

}  // namespace evtrack
