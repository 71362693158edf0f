#pragma once

// Patch embedding of template/search crops into token sequences, learnable
// absolute position tables, and template+search concatenation.

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "evtrack/autodiff.hpp"
#include "evtrack/errors.hpp"
#include "evtrack/ops.hpp"

namespace evtrack {

enum class Region { kTemplate, kSearch };
enum class Modality { kRgb, kEvent };

inline const char* to_string(Modality m) {
  return m == Modality::kRgb ? "rgb" : "event";
}

template <typename T>
struct TokenSequence {
  Var<T> tokens;  // [B, N, C]
  Modality modality = Modality::kRgb;
  std::size_t grid_h = 0, grid_w = 0;
  // Ordered (region, token count) runs; preserved across concatenation.
  std::vector<std::pair<Region, std::size_t>> segments;

  std::size_t length() const { return tokens->value.dim(1); }
  std::size_t channels() const { return tokens->value.dim(2); }
};

namespace ops_tok {

// [B, 3, S, S] -> [B, N, 3*p*p] with N = (S/p)^2; each row is one patch
// flattened channel-major. Pure gather; backward scatters.
template <typename T>
Var<T> extract_patches(Tape<T>& tape, const Var<T>& image,
                       std::size_t patch) {
  const auto& s = image->value.shape();
  if (s.size() != 4 || s[1] != 3) {
    throw ShapeError("extract_patches: image must be [B,3,S,S], got " +
                     shape_str(s));
  }
  if (patch == 0 || s[2] % patch != 0 || s[3] % patch != 0) {
    throw ParamError("extract_patches: side " + std::to_string(s[2]) + "x" +
                     std::to_string(s[3]) + " not divisible by patch " +
                     std::to_string(patch));
  }
  const std::size_t B = s[0], H = s[2], W = s[3];
  const std::size_t gh = H / patch, gw = W / patch;
  const std::size_t N = gh * gw;
  const std::size_t D = 3 * patch * patch;
  NdArray<T> out({B, N, D});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t gi = 0; gi < gh; ++gi)
      for (std::size_t gj = 0; gj < gw; ++gj) {
        T* row = out.data() + (b * N + gi * gw + gj) * D;
        std::size_t k = 0;
        for (std::size_t c = 0; c < 3; ++c)
          for (std::size_t di = 0; di < patch; ++di)
            for (std::size_t dj = 0; dj < patch; ++dj)
              row[k++] = image->value.at(b, c, gi * patch + di,
                                         gj * patch + dj);
      }
  auto result = make_var(std::move(out));
  if (tape.enabled() && image->requires_grad) {
    Var<T> img = image;
    tape.record([img, result, B, gh, gw, patch, N, D] {
      const NdArray<T>& dy = result->grad_buffer();
      NdArray<T>& dx = img->grad_buffer();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t gi = 0; gi < gh; ++gi)
          for (std::size_t gj = 0; gj < gw; ++gj) {
            const T* row = dy.data() + (b * N + gi * gw + gj) * D;
            std::size_t k = 0;
            for (std::size_t c = 0; c < 3; ++c)
              for (std::size_t di = 0; di < patch; ++di)
                for (std::size_t dj = 0; dj < patch; ++dj)
                  dx.at(b, c, gi * patch + di, gj * patch + dj) += row[k++];
          }
    });
  }
  return result;
}

// [B, N, C] + [N, C] broadcast over the batch axis.
template <typename T>
Var<T> add_rows(Tape<T>& tape, const Var<T>& x, const Var<T>& table) {
  const auto& xs = x->value.shape();
  const auto& ts = table->value.shape();
  if (xs.size() != 3 || ts.size() != 2 || ts[0] != xs[1] || ts[1] != xs[2]) {
    throw ShapeError("add_rows: tokens " + shape_str(xs) + " vs table " +
                     shape_str(ts));
  }
  const std::size_t B = xs[0], rows = xs[1] * xs[2];
  NdArray<T> y(xs);
  for (std::size_t b = 0; b < B; ++b) {
    const T* xp = x->value.data() + b * rows;
    T* yp = y.data() + b * rows;
    const T* tp = table->value.data();
    for (std::size_t i = 0; i < rows; ++i) yp[i] = xp[i] + tp[i];
  }
  auto out = make_var(std::move(y));
  if (tape.enabled()) {
    Var<T> xv = x, tv = table;
    tape.record([xv, tv, out, B, rows] {
      const NdArray<T>& dy = out->grad_buffer();
      if (xv->requires_grad) accumulate(xv->grad_buffer(), dy);
      if (tv->requires_grad) {
        NdArray<T>& dt = tv->grad_buffer();
        for (std::size_t b = 0; b < B; ++b) {
          const T* dyp = dy.data() + b * rows;
          for (std::size_t i = 0; i < rows; ++i) dt[i] += dyp[i];
        }
      }
    });
  }
  return out;
}

}  // namespace ops_tok

// Non-overlapping patchification followed by a linear projection to the
// embedding width.
template <typename T>
struct PatchEmbed {
  Var<T> weight;  // [3*patch*patch, C]
  Var<T> bias;    // [C]
  std::size_t patch = 16;

  TokenSequence<T> forward(Tape<T>& tape, const Var<T>& image, Region region,
                           Modality modality) const {
    auto flat = ops_tok::extract_patches(tape, image, patch);
    auto tokens = ops::linear(tape, flat, weight, bias);
    TokenSequence<T> seq;
    seq.tokens = tokens;
    seq.modality = modality;
    seq.grid_h = image->value.dim(2) / patch;
    seq.grid_w = image->value.dim(3) / patch;
    seq.segments = {{region, seq.grid_h * seq.grid_w}};
    return seq;
  }
};

template <typename T>
TokenSequence<T> add_positions(Tape<T>& tape, const TokenSequence<T>& seq,
                               const Var<T>& table) {
  TokenSequence<T> out = seq;
  out.tokens = ops_tok::add_rows(tape, seq.tokens, table);
  return out;
}

// Template tokens first, search tokens second; segment tags are preserved.
template <typename T>
TokenSequence<T> concat_region_tokens(Tape<T>& tape,
                                      const TokenSequence<T>& z,
                                      const TokenSequence<T>& x) {
  if (z.modality != x.modality) {
    throw InputError(std::string("concat_region_tokens: modality mismatch (") +
                     to_string(z.modality) + " vs " + to_string(x.modality) +
                     ")");
  }
  if (x.length() == 0) return z;
  TokenSequence<T> out;
  out.tokens = ops::concat_tokens(tape, z.tokens, x.tokens);
  out.modality = z.modality;
  out.grid_h = x.grid_h;  // head reshaping uses the search grid
  out.grid_w = x.grid_w;
  out.segments = z.segments;
  out.segments.insert(out.segments.end(), x.segments.begin(),
                      x.segments.end());
  return out;
}

// Total token count in segments tagged with `region`.
template <typename T>
std::size_t region_token_count(const TokenSequence<T>& seq, Region region) {
  std::size_t n = 0;
  for (const auto& [tag, len] : seq.segments)
    if (tag == region) n += len;
  return n;
}

}  // namespace evtrack
