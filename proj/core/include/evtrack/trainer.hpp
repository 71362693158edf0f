#pragma once

// Desk-scale two-phase trainer. Phase 1 optimizes the localization losses
// over the base model with the score head untouched; phase 2 freezes the
// base model and fits the reliability head alone with the logit loss.
// Optimizer: decoupled weight decay with first-order adaptive moments.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "evtrack/config.hpp"
#include "evtrack/model.hpp"
#include "evtrack/tracker.hpp"

namespace evtrack {

template <typename T>
class AdamW {
 public:
  AdamW(double lr, double weight_decay)
      : lr_(lr), weight_decay_(weight_decay) {}

  void step(ParamList<T>& params) {
    if (slots_.size() != params.size()) {
      slots_.clear();
      for (const auto& p : params) {
        slots_.push_back({NdArray<T>::zeros(p.var->value.shape()),
                          NdArray<T>::zeros(p.var->value.shape())});
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i].var;
      if (!p.has_grad()) continue;
      NdArray<T>& m = slots_[i].m;
      NdArray<T>& v = slots_[i].v;
      for (std::size_t k = 0; k < p.value.numel(); ++k) {
        const double g = static_cast<double>(p.grad[k]);
        const double mk = beta1_ * static_cast<double>(m[k]) + (1 - beta1_) * g;
        const double vk =
            beta2_ * static_cast<double>(v[k]) + (1 - beta2_) * g * g;
        m[k] = static_cast<T>(mk);
        v[k] = static_cast<T>(vk);
        const double update =
            (mk / bc1) / (std::sqrt(vk / bc2) + eps_) +
            weight_decay_ * static_cast<double>(p.value[k]);
        p.value[k] = static_cast<T>(static_cast<double>(p.value[k]) -
                                    lr_ * update);
      }
    }
  }

  static void zero_grads(ParamList<T>& params) {
    for (auto& p : params) p.var->grad = NdArray<T>();
  }

 private:
  struct Slot {
    NdArray<T> m, v;
  };
  double lr_, weight_decay_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::size_t t_ = 0;
  std::vector<Slot> slots_;
};

// One sampled (templates, search) observation with its regression targets.
template <typename T>
struct TrainSample {
  ModelInput<T> input;
  NdArray<T> box_target;  // [1, 4] normalized center box
  std::size_t cell_i = 0, cell_j = 0;
};

template <typename T>
TrainSample<T> make_train_sample(const SyntheticDataset& data,
                                 const TrackerModel<T>& model,
                                 const TrackerConfig& tcfg,
                                 std::size_t frame_index, double jitter_x,
                                 double jitter_y, double crop_scale = 1.0) {
  const std::size_t H = data.frames[0].dim(1);
  const std::size_t W = data.frames[0].dim(2);
  const std::size_t S = model.cfg.search_side;
  const RectF& gt = data.boxes[frame_index];

  TrainSample<T> sample;
  NdArray<double> zero_events({3, H, W});
  NdArray<T> tpl_rgb = crop_patch<T>(data.frames[0], data.boxes[0],
                                     tcfg.template_context,
                                     model.cfg.template_side);
  NdArray<T> tpl_event = crop_patch<T>(zero_events, data.boxes[0],
                                       tcfg.template_context,
                                       model.cfg.template_side);
  sample.input.rgb_template_static = make_const(tpl_rgb);
  sample.input.rgb_template_dynamic = make_const(tpl_rgb);
  sample.input.event_template_static = make_const(tpl_event);
  sample.input.event_template_dynamic = make_const(tpl_event);

  NdArray<double> events =
      frame_index == 0
          ? zero_events
          : stack_events<double>(data.events.events,
                                 data.frame_time(frame_index - 1),
                                 data.frame_time(frame_index), H, W);
  const RectF crop_box =
      RectF::from_center(gt.cx() + jitter_x, gt.cy() + jitter_y,
                         gt.w * crop_scale, gt.h * crop_scale);
  CropAffine aff;
  CropSpec spec{crop_box.cx(), crop_box.cy(), crop_box.w, crop_box.h,
                tcfg.search_context, S};
  NdArray<double> rgb_patch = crop_region(data.frames[frame_index], spec, &aff);
  NdArray<double> event_patch = crop_region(events, spec);
  sample.input.rgb_search =
      make_const(rgb_patch.cast<T>().reshaped({1, 3, S, S}));
  sample.input.event_search =
      make_const(event_patch.cast<T>().reshaped({1, 3, S, S}));

  // Ground truth in normalized search coordinates (edge-based).
  const double side = static_cast<double>(S);
  const double cx = (aff.to_patch_x(gt.cx()) + 0.5) / side;
  const double cy = (aff.to_patch_y(gt.cy()) + 0.5) / side;
  const double w = gt.w / (aff.scale_x * side);
  const double h = gt.h / (aff.scale_y * side);
  sample.box_target = NdArray<T>(
      {1, 4}, {static_cast<T>(cx), static_cast<T>(cy), static_cast<T>(w),
               static_cast<T>(h)});

  const std::size_t G = model.cfg.search_side / model.cfg.patch;
  auto clamp_cell = [G](double v) {
    const auto cell = static_cast<long>(std::floor(v * static_cast<double>(G)));
    return static_cast<std::size_t>(
        std::clamp<long>(cell, 0, static_cast<long>(G) - 1));
  };
  sample.cell_i = clamp_cell(cy);
  sample.cell_j = clamp_cell(cx);
  return sample;
}

struct TrainResult {
  std::vector<double> losses;        // phase 1, one entry per step
  std::vector<double> score_losses;  // phase 2
};

template <typename T>
TrainResult train_desk_scale(TrackerModel<T>& model,
                             const SyntheticDataset& data,
                             const RunConfig& cfg) {
  if (data.frames.size() < 2) {
    throw InputError("train_desk_scale: need at least two frames");
  }
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> frame_pick(
      1, data.frames.size() - 1);
  std::uniform_real_distribution<double> jitter(-cfg.train.jitter_px,
                                                cfg.train.jitter_px);
  std::uniform_real_distribution<double> log_scale(-cfg.train.scale_jitter,
                                                   cfg.train.scale_jitter);
  auto pick_scale = [&] {
    return cfg.train.scale_jitter > 0 ? std::exp(log_scale(rng)) : 1.0;
  };
  const std::size_t G = model.cfg.search_side / model.cfg.patch;

  TrainResult result;
  ParamList<T> base = model.base_params();
  ParamList<T> all = model.all_params();

  // Phase 1: localization losses, score head untouched.
  {
    AdamW<T> opt(cfg.train.lr, cfg.train.weight_decay);
    for (std::size_t step = 0; step < cfg.train.steps; ++step) {
      auto sample = make_train_sample(data, model, cfg.tracker, frame_pick(rng),
                                      jitter(rng), jitter(rng), pick_scale());
      Tape<T> tape;
      auto out = model.forward(tape, sample.input, SelectMode::kHard,
                               cfg.seed * 1000003 + step);
      auto target = gaussian_score_target<T>(G, sample.cell_i, sample.cell_j);
      auto box = box_at_cell(tape, out.head, sample.cell_i, sample.cell_j);
      auto loss = total_loss(tape,
                             focal_loss(tape, out.head.score, target),
                             l1_loss(tape, box, sample.box_target),
                             giou_loss(tape, box, sample.box_target));
      const double loss_value = static_cast<double>(loss->value[0]);
      result.losses.push_back(loss_value);
      if (!std::isfinite(loss_value) ||
          loss_value > cfg.train.divergence_abort) {
        throw NumericError("training diverged at step " +
                           std::to_string(step) + ": total loss " +
                           std::to_string(loss_value));
      }
      tape.backward(loss);
      opt.step(base);
      AdamW<T>::zero_grads(all);
    }
  }

  // Phase 2: base model frozen, reliability head only.
  {
    for (auto& p : base) p.var->requires_grad = false;
    ParamList<T> score = model.score_params();
    AdamW<T> opt(cfg.train.lr, cfg.train.weight_decay);
    for (std::size_t step = 0; step < cfg.train.score_steps; ++step) {
      auto sample = make_train_sample(data, model, cfg.tracker, frame_pick(rng),
                                      jitter(rng), jitter(rng), pick_scale());
      Tape<T> tape;
      auto out = model.forward(tape, sample.input, SelectMode::kArgmax);
      const Decoded decoded = decode_box(out.head);
      NormBox want{static_cast<double>(sample.box_target.at(0, 0)),
                   static_cast<double>(sample.box_target.at(0, 1)),
                   static_cast<double>(sample.box_target.at(0, 2)),
                   static_cast<double>(sample.box_target.at(0, 3))};
      const double overlap =
          iou(RectF::from_center(decoded.box.cx, decoded.box.cy,
                                 decoded.box.w, decoded.box.h),
              RectF::from_center(want.cx, want.cy, want.w, want.h));
      NdArray<T> label({1, 1}, {overlap > 0.5 ? T{1} : T{0}});
      auto loss = bce_logits_loss(tape, out.score_logit, label);
      result.score_losses.push_back(static_cast<double>(loss->value[0]));
      tape.backward(loss);
      opt.step(score);
      AdamW<T>::zero_grads(all);
    }
    for (auto& p : base) p.var->requires_grad = true;
  }
  return result;
}

}  // namespace evtrack
