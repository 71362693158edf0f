#pragma once

// Asynchronous event streams and their frame-aligned dense encoding. An event
// frame has 3 channels: positive count, negative count, total count; after
// stacking, each channel is max-normalized to [0,1].

#include <algorithm>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "evtrack/errors.hpp"
#include "evtrack/nd_array.hpp"

namespace evtrack {

struct Event {
  std::int64_t t_us = 0;  // monotone non-decreasing within a stream
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  std::int8_t p = 1;  // +1 or -1
};

struct EventStream {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Event> events;  // sorted by t_us
};

// Raw per-pixel per-polarity counts for events with t0 <= t < t1.
// Channel 2 is the total (channel 0 + channel 1). Throws InputError on an
// unsorted stream or an out-of-bounds event, naming the offending index.
template <typename T>
NdArray<T> event_counts(std::span<const Event> stream, std::int64_t t0,
                        std::int64_t t1, std::size_t height,
                        std::size_t width) {
  if (t0 >= t1) {
    throw InputError("event window [" + std::to_string(t0) + "," +
                     std::to_string(t1) + ") is empty or reversed");
  }
  NdArray<T> counts({3, height, width});
  std::int64_t prev_t = std::numeric_limits<std::int64_t>::min();
  for (std::size_t i = 0; i < stream.size(); ++i) {
    const Event& e = stream[i];
    if (e.t_us < prev_t) {
      throw InputError("event stream unsorted at index " + std::to_string(i));
    }
    prev_t = e.t_us;
    if (e.x >= width || e.y >= height) {
      throw InputError("event " + std::to_string(i) + " at (" +
                       std::to_string(e.x) + "," + std::to_string(e.y) +
                       ") outside " + std::to_string(width) + "x" +
                       std::to_string(height));
    }
    if (e.p != 1 && e.p != -1) {
      throw InputError("event " + std::to_string(i) + " has polarity " +
                       std::to_string(int(e.p)));
    }
    if (e.t_us < t0 || e.t_us >= t1) continue;
    const std::size_t ch = e.p > 0 ? 0 : 1;
    counts.at(ch, e.y, e.x) += T{1};
    counts.at(2, e.y, e.x) += T{1};
  }
  return counts;
}

// Per-channel max normalization; an all-zero channel stays zero.
template <typename T>
void normalize_event_frame(NdArray<T>& frame) {
  const std::size_t hw = frame.dim(1) * frame.dim(2);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    T* p = frame.data() + ch * hw;
    T mx = 0;
    for (std::size_t i = 0; i < hw; ++i) mx = std::max(mx, p[i]);
    if (mx > T{0}) {
      const T inv = T{1} / mx;
      for (std::size_t i = 0; i < hw; ++i) p[i] *= inv;
    }
  }
}

// Counts in [t0, t1), then max-normalized per channel.
template <typename T>
NdArray<T> stack_events(std::span<const Event> stream, std::int64_t t0,
                        std::int64_t t1, std::size_t height,
                        std::size_t width) {
  NdArray<T> frame = event_counts<T>(stream, t0, t1, height, width);
  normalize_event_frame(frame);
  return frame;
}

// CSV interchange: header line `#H=<int> W=<int>`, then `t_us,x,y,p` lines.
EventStream read_event_csv(const std::string& path);
void write_event_csv(const std::string& path, const EventStream& stream);

}  // namespace evtrack
