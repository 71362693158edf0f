#pragma once

// Synthetic paired RGB/event sequences: a rectangular object glides along a
// smooth bounded path over a static background; events follow the standard
// per-pixel log-intensity change model with threshold stepping of the
// reference level. Deterministic given the seed.

#include <cstdint>
#include <string>
#include <vector>

#include "evtrack/config.hpp"
#include "evtrack/event.hpp"
#include "evtrack/image.hpp"

namespace evtrack {

struct SyntheticDataset {
  std::vector<NdArray<double>> frames;  // [3, H, W], values in [0,1]
  std::vector<RectF> boxes;             // object box per frame
  EventStream events;
  std::int64_t frame_interval_us = 10000;

  std::int64_t frame_time(std::size_t index) const {
    return static_cast<std::int64_t>(index) * frame_interval_us;
  }
};

SyntheticDataset generate_synthetic(const SynthConfig& scene,
                                    std::size_t n_frames, std::uint64_t seed);

// Swaps object and background intensities; with a flat background the event
// stream of the flipped scene is the polarity mirror of the original.
SynthConfig polarity_flipped(const SynthConfig& scene);

// Directory layout: frames/%06d.ppm, groundtruth.txt, events.csv, meta.json.
void write_dataset(const std::string& dir, const SyntheticDataset& data,
                   bool force = false);
SyntheticDataset read_dataset(const std::string& dir);

}  // namespace evtrack
