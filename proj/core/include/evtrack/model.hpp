#pragma once

// The full tracker model: per-modality patch embeddings, shared position
// tables, the prompt generator, the dual-branch backbone, the localization
// head and the reliability score head. The template token segment holds the
// static and the dynamic template back to back, so sequence shapes stay
// fixed while tracking.

#include <cstdint>
#include <random>
#include <utility>

#include "evtrack/block.hpp"
#include "evtrack/checkpoint.hpp"
#include "evtrack/config.hpp"
#include "evtrack/head.hpp"
#include "evtrack/prompt.hpp"
#include "evtrack/ssm.hpp"
#include "evtrack/tokenizer.hpp"

namespace evtrack {

// One observation pushed through the model: static template, dynamic
// template and search crop, for each modality. Images are [1, 3, S, S].
template <typename T>
struct ModelInput {
  Var<T> rgb_template_static, rgb_template_dynamic, rgb_search;
  Var<T> event_template_static, event_template_dynamic, event_search;
};

template <typename T>
struct ModelOutput {
  HeadOutput<T> head;
  Var<T> score_logit;  // [B, 1]
  Var<T> search_rgb, search_event;  // backbone search features
};

template <typename T>
struct TrackerModel {
  ModelConfig cfg;
  PatchEmbed<T> embed_rgb, embed_event;
  Var<T> pos_template;  // [2*Nz, C]: static + dynamic segments
  Var<T> pos_search;    // [Nx, C]
  PromptGenerator<T> prompts;
  Backbone<T> backbone;
  TrackingHead<T> head;
  ScoreHead<T> score_head;
  bool use_prompts = true;

  std::size_t template_tokens() const {
    const std::size_t g = cfg.template_side / cfg.patch;
    return g * g;
  }
  std::size_t search_tokens() const {
    const std::size_t g = cfg.search_side / cfg.patch;
    return g * g;
  }

  ModelOutput<T> forward(Tape<T>& tape, const ModelInput<T>& in,
                         SelectMode mode, std::uint64_t seed = 0) const {
    auto tokenize = [&](const PatchEmbed<T>& embed, const Var<T>& z_s,
                        const Var<T>& z_d, const Var<T>& x,
                        Modality modality) {
      auto zs = embed.forward(tape, z_s, Region::kTemplate, modality);
      auto zd = embed.forward(tape, z_d, Region::kTemplate, modality);
      auto zx = embed.forward(tape, x, Region::kSearch, modality);
      auto z = concat_region_tokens(tape, zs, zd);
      z = add_positions(tape, z, pos_template);
      zx = add_positions(tape, zx, pos_search);
      return concat_region_tokens(tape, z, zx);
    };

    auto h_rgb = tokenize(embed_rgb, in.rgb_template_static,
                          in.rgb_template_dynamic, in.rgb_search,
                          Modality::kRgb);
    auto h_event = tokenize(embed_event, in.event_template_static,
                            in.event_template_dynamic, in.event_search,
                            Modality::kEvent);

    Var<T> p_rgb, p_event;
    if (use_prompts) {
      auto generated =
          prompts.generate(tape, h_rgb.tokens, h_event.tokens, mode, seed);
      p_rgb = generated.rgb;
      p_event = generated.event;
    }
    auto [f_rgb, f_event] =
        backbone.forward(tape, h_rgb.tokens, h_event.tokens, p_rgb, p_event);

    const std::size_t n_z = 2 * template_tokens();
    const std::size_t n_x = search_tokens();
    ModelOutput<T> out;
    out.search_rgb = ops::slice_tokens(tape, f_rgb, n_z, n_x);
    out.search_event = ops::slice_tokens(tape, f_event, n_z, n_x);
    out.head = head.forward(tape, out.search_rgb, out.search_event);
    out.score_logit = score_head.forward(tape, f_rgb, f_event);
    return out;
  }

  // Everything optimized in the first training phase.
  ParamList<T> base_params() const {
    ParamList<T> params;
    params.push_back({"embed.rgb.weight", embed_rgb.weight});
    params.push_back({"embed.rgb.bias", embed_rgb.bias});
    params.push_back({"embed.event.weight", embed_event.weight});
    params.push_back({"embed.event.bias", embed_event.bias});
    params.push_back({"pos.template", pos_template});
    params.push_back({"pos.search", pos_search});
    params.push_back({"prompt.pool.rgb", prompts.pool.w_rgb});
    params.push_back({"prompt.pool.event", prompts.pool.w_event});
    params.push_back({"prompt.route.w1", prompts.net.w1});
    params.push_back({"prompt.route.b1", prompts.net.b1});
    params.push_back({"prompt.route.w2", prompts.net.w2});
    params.push_back({"prompt.route.b2", prompts.net.b2});
    backbone.collect(params);
    head.collect(params);
    return params;
  }

  ParamList<T> score_params() const {
    ParamList<T> params;
    score_head.collect(params);
    return params;
  }

  ParamList<T> all_params() const {
    ParamList<T> params = base_params();
    ParamList<T> score = score_params();
    params.insert(params.end(), score.begin(), score.end());
    return params;
  }
};

template <typename T>
TrackerModel<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.prompt_dim != cfg.state_size) {
    throw ConfigError("model.prompt_dim", "must equal model.state_size");
  }
  std::mt19937_64 rng(seed);
  TrackerModel<T> m;
  m.cfg = cfg;

  const std::size_t patch_dim = 3 * cfg.patch * cfg.patch;
  m.embed_rgb.patch = cfg.patch;
  m.embed_rgb.weight = init_normal<T>(
      rng, {patch_dim, cfg.embed_dim},
      T{1} / std::sqrt(static_cast<T>(patch_dim)));
  m.embed_rgb.bias = make_var(NdArray<T>::zeros({cfg.embed_dim}));
  m.embed_event.patch = cfg.patch;
  m.embed_event.weight = init_normal<T>(
      rng, {patch_dim, cfg.embed_dim},
      T{1} / std::sqrt(static_cast<T>(patch_dim)));
  m.embed_event.bias = make_var(NdArray<T>::zeros({cfg.embed_dim}));

  const std::size_t gz = cfg.template_side / cfg.patch;
  const std::size_t gx = cfg.search_side / cfg.patch;
  m.pos_template = init_normal<T>(rng, {2 * gz * gz, cfg.embed_dim},
                                  static_cast<T>(0.02));
  m.pos_search = init_normal<T>(rng, {gx * gx, cfg.embed_dim},
                                static_cast<T>(0.02));

  m.prompts.tau = static_cast<T>(cfg.tau);
  m.prompts.pool.w_rgb = init_normal<T>(rng, {cfg.pool_size, cfg.prompt_dim},
                                        static_cast<T>(0.5));
  m.prompts.pool.w_event = init_normal<T>(
      rng, {cfg.pool_size, cfg.prompt_dim}, static_cast<T>(0.5));
  m.prompts.net.w1 = init_normal<T>(
      rng, {cfg.embed_dim, cfg.embed_dim},
      T{1} / std::sqrt(static_cast<T>(cfg.embed_dim)));
  m.prompts.net.b1 = make_var(NdArray<T>::zeros({cfg.embed_dim}));
  m.prompts.net.w2 = init_normal<T>(
      rng, {cfg.embed_dim, cfg.pool_size},
      T{1} / std::sqrt(static_cast<T>(cfg.embed_dim)));
  m.prompts.net.b2 = make_var(NdArray<T>::zeros({cfg.pool_size}));

  BackboneConfig<T> bb;
  bb.depth = cfg.depth;
  bb.embed_dim = cfg.embed_dim;
  bb.state_size = cfg.state_size;
  bb.expand = cfg.expand;
  bb.conv_width = cfg.conv_width;
  bb.scan_chunk = cfg.scan_chunk;
  m.backbone = init_backbone<T>(rng, bb);

  m.head = init_tracking_head<T>(rng, cfg.embed_dim, cfg.head_width,
                                 cfg.head_stages);
  m.score_head = init_score_head<T>(rng, cfg.embed_dim);
  return m;
}

template <typename T>
void save_model(const std::string& path, const TrackerModel<T>& model,
                const std::string& config_json) {
  save_checkpoint(path, to_entries(model.all_params()), config_json);
}

template <typename T>
void load_model(const std::string& path, TrackerModel<T>& model,
                std::string* config_json = nullptr) {
  auto entries = load_checkpoint(path, config_json);
  ParamList<T> params = model.all_params();
  from_entries(entries, params);
}

}  // namespace evtrack
