#include "evtrack/config.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace evtrack {

namespace {

using nlohmann::json;

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

json model_to_json(const ModelConfig& m) {
  return {{"depth", m.depth},
          {"embed_dim", m.embed_dim},
          {"state_size", m.state_size},
          {"expand", m.expand},
          {"conv_width", m.conv_width},
          {"patch", m.patch},
          {"pool_size", m.pool_size},
          {"prompt_dim", m.prompt_dim},
          {"tau", m.tau},
          {"head_width", m.head_width},
          {"head_stages", m.head_stages},
          {"template_side", m.template_side},
          {"search_side", m.search_side},
          {"scan_chunk", m.scan_chunk}};
}

void model_from_json(const json& j, ModelConfig& m) {
  read_field(j, "depth", m.depth);
  read_field(j, "embed_dim", m.embed_dim);
  read_field(j, "state_size", m.state_size);
  read_field(j, "expand", m.expand);
  read_field(j, "conv_width", m.conv_width);
  read_field(j, "patch", m.patch);
  read_field(j, "pool_size", m.pool_size);
  read_field(j, "prompt_dim", m.prompt_dim);
  read_field(j, "tau", m.tau);
  read_field(j, "head_width", m.head_width);
  read_field(j, "head_stages", m.head_stages);
  read_field(j, "template_side", m.template_side);
  read_field(j, "search_side", m.search_side);
  read_field(j, "scan_chunk", m.scan_chunk);
}

}  // namespace

void RunConfig::validate() const {
  if (model.prompt_dim != model.state_size) {
    throw ConfigError("model.prompt_dim",
                      "must equal model.state_size (" +
                          std::to_string(model.prompt_dim) + " vs " +
                          std::to_string(model.state_size) + ")");
  }
  if (!(model.tau > 0)) throw ConfigError("model.tau", "must be positive");
  if (model.pool_size < 1) throw ConfigError("model.pool_size", "must be >= 1");
  if (model.patch == 0 || model.template_side % model.patch != 0 ||
      model.search_side % model.patch != 0) {
    throw ConfigError("model.patch",
                      "template and search sides must be divisible by patch");
  }
  if (model.expand < 1) throw ConfigError("model.expand", "must be >= 1");
  if (tracker.k_frames < 1) throw ConfigError("tracker.k_frames", "must be >= 1");
  if (tracker.score_threshold < 0 || tracker.score_threshold > 1) {
    throw ConfigError("tracker.score_threshold", "must lie in [0,1]");
  }
  if (tracker.update_score_threshold < 0 ||
      tracker.update_score_threshold > 1) {
    throw ConfigError("tracker.update_score_threshold", "must lie in [0,1]");
  }
  if (!(tracker.scale_factor > 0)) {
    throw ConfigError("tracker.scale_factor", "must be positive");
  }
  if (!(tracker.template_context > 0) || !(tracker.search_context > 0)) {
    throw ConfigError("tracker.search_context", "context factors must be positive");
  }
  if (precision != "f32" && precision != "f64") {
    throw ConfigError("precision", "must be 'f32' or 'f64', got '" + precision + "'");
  }
  if (!(synth.object_w > 0) || !(synth.object_h > 0)) {
    throw ConfigError("synth.object_w", "object size must be positive");
  }
  if (!(synth.event_threshold > 0)) {
    throw ConfigError("synth.event_threshold", "must be positive");
  }
}

std::string RunConfig::to_json() const {
  json j;
  j["model"] = model_to_json(model);
  j["tracker"] = {{"score_threshold", tracker.score_threshold},
                  {"k_frames", tracker.k_frames},
                  {"scale_factor", tracker.scale_factor},
                  {"update_interval", tracker.update_interval},
                  {"update_score_threshold", tracker.update_score_threshold},
                  {"template_context", tracker.template_context},
                  {"search_context", tracker.search_context}};
  j["train"] = {{"steps", train.steps},
                {"score_steps", train.score_steps},
                {"lr", train.lr},
                {"weight_decay", train.weight_decay},
                {"jitter_px", train.jitter_px},
                {"divergence_abort", train.divergence_abort}};
  j["synth"] = {{"height", synth.height},
                {"width", synth.width},
                {"object_w", synth.object_w},
                {"object_h", synth.object_h},
                {"object_intensity", synth.object_intensity},
                {"background_intensity", synth.background_intensity},
                {"speed_px", synth.speed_px},
                {"event_threshold", synth.event_threshold},
                {"texture_amplitude", synth.texture_amplitude},
                {"frame_interval_us", synth.frame_interval_us},
                {"frames", synth.frames}};
  j["precision"] = precision;
  j["seed"] = seed;
  j["threads"] = threads;
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  RunConfig cfg;
  if (j.contains("model")) model_from_json(j["model"], cfg.model);
  if (j.contains("tracker")) {
    const auto& t = j["tracker"];
    read_field(t, "score_threshold", cfg.tracker.score_threshold);
    read_field(t, "k_frames", cfg.tracker.k_frames);
    read_field(t, "scale_factor", cfg.tracker.scale_factor);
    read_field(t, "update_interval", cfg.tracker.update_interval);
    read_field(t, "update_score_threshold",
               cfg.tracker.update_score_threshold);
    read_field(t, "template_context", cfg.tracker.template_context);
    read_field(t, "search_context", cfg.tracker.search_context);
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    read_field(t, "steps", cfg.train.steps);
    read_field(t, "score_steps", cfg.train.score_steps);
    read_field(t, "lr", cfg.train.lr);
    read_field(t, "weight_decay", cfg.train.weight_decay);
    read_field(t, "jitter_px", cfg.train.jitter_px);
    read_field(t, "divergence_abort", cfg.train.divergence_abort);
  }
  if (j.contains("synth")) {
    const auto& s = j["synth"];
    read_field(s, "height", cfg.synth.height);
    read_field(s, "width", cfg.synth.width);
    read_field(s, "object_w", cfg.synth.object_w);
    read_field(s, "object_h", cfg.synth.object_h);
    read_field(s, "object_intensity", cfg.synth.object_intensity);
    read_field(s, "background_intensity", cfg.synth.background_intensity);
    read_field(s, "speed_px", cfg.synth.speed_px);
    read_field(s, "event_threshold", cfg.synth.event_threshold);
    read_field(s, "texture_amplitude", cfg.synth.texture_amplitude);
    read_field(s, "frame_interval_us", cfg.synth.frame_interval_us);
    read_field(s, "frames", cfg.synth.frames);
  }
  read_field(j, "precision", cfg.precision);
  read_field(j, "seed", cfg.seed);
  read_field(j, "threads", cfg.threads);
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("config: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return from_json(text);
}

void RunConfig::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw InputError("config: cannot write " + path);
  out << to_json() << "\n";
}

}  // namespace evtrack
