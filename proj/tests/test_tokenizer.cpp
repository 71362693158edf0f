#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "evtrack/tokenizer.hpp"

using namespace evtrack;

namespace {

PatchEmbed<double> identity_embed(std::size_t patch) {
  // One-hot projection: token values are the raw flattened patch pixels.
  const std::size_t D = 3 * patch * patch;
  NdArray<double> W({D, D});
  for (std::size_t i = 0; i < D; ++i) W.at(i, i) = 1.0;
  PatchEmbed<double> pe;
  pe.weight = make_var(std::move(W));
  pe.bias = make_var(NdArray<double>::zeros({D}));
  pe.patch = patch;
  return pe;
}

PatchEmbed<double> random_embed(std::size_t patch, std::size_t C,
                                std::uint64_t seed, bool zero_bias = false) {
  std::mt19937_64 rng(seed);
  PatchEmbed<double> pe;
  NdArray<double> W({3 * patch * patch, C});
  W.fill_normal(rng, 0.1);
  pe.weight = make_var(std::move(W));
  NdArray<double> b({C});
  if (!zero_bias) b.fill_normal(rng, 0.1);
  pe.bias = make_var(std::move(b));
  pe.patch = patch;
  return pe;
}

}  // namespace

TEST_CASE("zero image with zero bias embeds to zero tokens") {
  Tape<double> tape(false);
  auto pe = random_embed(8, 16, 1, /*zero_bias=*/true);
  auto img = make_var(NdArray<double>::zeros({1, 3, 32, 32}), false);
  auto seq = pe.forward(tape, img, Region::kSearch, Modality::kRgb);
  CHECK(max_abs(seq.tokens->value) == 0.0);
}

TEST_CASE("token count is (S/patch)^2") {
  Tape<double> tape(false);
  auto pe = random_embed(16, 8, 2);
  auto img = make_var(NdArray<double>::zeros({1, 3, 32, 32}), false);
  auto seq = pe.forward(tape, img, Region::kTemplate, Modality::kEvent);
  CHECK(seq.length() == 4);
  CHECK(seq.grid_h == 2);
  CHECK(seq.grid_w == 2);
}

TEST_CASE("one-hot projection recovers raw patch pixels") {
  Tape<double> tape(false);
  const std::size_t patch = 4, S = 8;
  auto pe = identity_embed(patch);
  std::mt19937_64 rng(3);
  NdArray<double> img({1, 3, S, S});
  img.fill_uniform(rng, 0.0, 1.0);
  auto seq = pe.forward(tape, make_var(img, false), Region::kTemplate,
                        Modality::kRgb);
  // Direct loop over patches.
  for (std::size_t gi = 0; gi < 2; ++gi)
    for (std::size_t gj = 0; gj < 2; ++gj) {
      std::size_t k = 0;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t di = 0; di < patch; ++di)
          for (std::size_t dj = 0; dj < patch; ++dj) {
            const double want =
                img.at(0, c, gi * patch + di, gj * patch + dj);
            CHECK(seq.tokens->value.at(0, gi * 2 + gj, k) ==
                  doctest::Approx(want));
            ++k;
          }
    }
}

TEST_CASE("default crop sides give 64 template and 256 search tokens") {
  Tape<double> tape(false);
  auto pe = random_embed(16, 8, 9);
  auto z = make_var(NdArray<double>::zeros({1, 3, 128, 128}), false);
  auto x = make_var(NdArray<double>::zeros({1, 3, 256, 256}), false);
  CHECK(pe.forward(tape, z, Region::kTemplate, Modality::kRgb).length() == 64);
  CHECK(pe.forward(tape, x, Region::kSearch, Modality::kRgb).length() == 256);
}

TEST_CASE("indivisible side is rejected") {
  Tape<double> tape(false);
  auto pe = random_embed(16, 8, 4);
  auto img = make_var(NdArray<double>::zeros({1, 3, 40, 40}), false);
  CHECK_THROWS_AS(pe.forward(tape, img, Region::kSearch, Modality::kRgb),
                  ParamError);
}

TEST_CASE("patch embedding is linear with zero bias") {
  Tape<double> tape(false);
  auto pe = random_embed(4, 12, 5, /*zero_bias=*/true);
  std::mt19937_64 rng(6);
  NdArray<double> img({1, 3, 8, 8});
  img.fill_uniform(rng, 0.0, 1.0);
  NdArray<double> scaled = img;
  for (std::size_t i = 0; i < scaled.numel(); ++i) scaled[i] *= 3.5;

  auto a = pe.forward(tape, make_var(img, false), Region::kSearch,
                      Modality::kRgb);
  auto b = pe.forward(tape, make_var(scaled, false), Region::kSearch,
                      Modality::kRgb);
  for (std::size_t i = 0; i < a.tokens->value.numel(); ++i)
    CHECK(b.tokens->value[i] == doctest::Approx(3.5 * a.tokens->value[i]));
}

TEST_CASE("add_positions") {
  Tape<double> tape(false);
  std::mt19937_64 rng(7);
  NdArray<double> toks({2, 4, 6});
  toks.fill_normal(rng, 1.0);
  NdArray<double> table({4, 6});
  table.fill_normal(rng, 1.0);

  TokenSequence<double> seq;
  seq.tokens = make_var(toks);
  seq.segments = {{Region::kTemplate, 4}};

  SUBCASE("zero table is the identity") {
    auto out = add_positions(tape, seq,
                             make_var(NdArray<double>::zeros({4, 6})));
    for (std::size_t i = 0; i < toks.numel(); ++i)
      CHECK(out.tokens->value[i] == toks[i]);
  }
  SUBCASE("zero tokens produce the table") {
    seq.tokens = make_var(NdArray<double>::zeros({2, 4, 6}));
    auto out = add_positions(tape, seq, make_var(table));
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < 24; ++i)
        CHECK(out.tokens->value[b * 24 + i] == table[i]);
  }
  SUBCASE("random case equals elementwise add") {
    auto out = add_positions(tape, seq, make_var(table));
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < 24; ++i)
        CHECK(out.tokens->value[b * 24 + i] ==
              doctest::Approx(toks[b * 24 + i] + table[i]));
  }
  SUBCASE("length mismatch is rejected") {
    auto bad = make_var(NdArray<double>::zeros({5, 6}));
    CHECK_THROWS_AS(add_positions(tape, seq, bad), ShapeError);
  }
}

TEST_CASE("concat_region_tokens") {
  Tape<double> tape(false);
  std::mt19937_64 rng(8);

  auto mk = [&](std::size_t n, Region r, Modality m) {
    NdArray<double> t({1, n, 5});
    t.fill_normal(rng, 1.0);
    TokenSequence<double> s;
    s.tokens = make_var(std::move(t));
    s.modality = m;
    if (n > 0) s.segments = {{r, n}};
    return s;
  };

  SUBCASE("template-then-search lengths add up") {
    auto z = mk(64, Region::kTemplate, Modality::kRgb);
    auto x = mk(256, Region::kSearch, Modality::kRgb);
    auto joined = concat_region_tokens(tape, z, x);
    CHECK(joined.length() == 320);
    CHECK(region_token_count(joined, Region::kTemplate) == 64);
    CHECK(region_token_count(joined, Region::kSearch) == 256);
  }
  SUBCASE("empty search leaves the template unchanged") {
    auto z = mk(4, Region::kTemplate, Modality::kEvent);
    auto x = mk(0, Region::kSearch, Modality::kEvent);
    auto joined = concat_region_tokens(tape, z, x);
    CHECK(joined.length() == 4);
    for (std::size_t i = 0; i < z.tokens->value.numel(); ++i)
      CHECK(joined.tokens->value[i] == z.tokens->value[i]);
  }
  SUBCASE("slicing the front recovers the template exactly") {
    auto z = mk(6, Region::kTemplate, Modality::kRgb);
    auto x = mk(10, Region::kSearch, Modality::kRgb);
    auto joined = concat_region_tokens(tape, z, x);
    auto front = ops::slice_tokens(tape, joined.tokens, 0, 6);
    for (std::size_t i = 0; i < z.tokens->value.numel(); ++i)
      CHECK(front->value[i] == z.tokens->value[i]);
  }
  SUBCASE("modality mismatch is rejected") {
    auto z = mk(4, Region::kTemplate, Modality::kRgb);
    auto x = mk(4, Region::kSearch, Modality::kEvent);
    CHECK_THROWS_AS(concat_region_tokens(tape, z, x), InputError);
  }
}
