#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "evtrack/head.hpp"
#include "support/finite_diff.hpp"

using namespace evtrack;
namespace td = evtrack::testing;

namespace {

Var<double> random_tokens(std::size_t B, std::size_t N, std::size_t C,
                          std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  NdArray<double> t({B, N, C});
  t.fill_normal(rng, 1.0);
  return make_var(std::move(t));
}

// Monte-Carlo overlap: uniform samples over the hull give the intersection
// and union fractions, from which the generalized overlap follows.
double giou_monte_carlo(const NormBox& a, const NormBox& b, std::size_t n,
                        std::uint64_t seed) {
  const double x1 = std::min(a.cx - a.w / 2, b.cx - b.w / 2);
  const double x2 = std::max(a.cx + a.w / 2, b.cx + b.w / 2);
  const double y1 = std::min(a.cy - a.h / 2, b.cy - b.h / 2);
  const double y2 = std::max(a.cy + a.h / 2, b.cy + b.h / 2);
  auto inside = [](const NormBox& box, double x, double y) {
    return x >= box.cx - box.w / 2 && x <= box.cx + box.w / 2 &&
           y >= box.cy - box.h / 2 && y <= box.cy + box.h / 2;
  };
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(x1, x2), uy(y1, y2);
  std::size_t hit_i = 0, hit_u = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double x = ux(rng), y = uy(rng);
    const bool in_a = inside(a, x, y), in_b = inside(b, x, y);
    if (in_a && in_b) ++hit_i;
    if (in_a || in_b) ++hit_u;
  }
  const double p_i = static_cast<double>(hit_i) / n;
  const double p_u = static_cast<double>(hit_u) / n;
  return p_i / p_u - (1.0 - p_u);
}

}  // namespace

TEST_CASE("zero-initialized final layers emit 0.5 maps") {
  std::mt19937_64 rng(1);
  auto head = init_tracking_head<double>(rng, 8, 16, 2);
  Tape<double> tape(false);
  auto out = head.forward(tape, random_tokens(1, 16, 8, 2),
                          random_tokens(1, 16, 8, 3));
  CHECK(out.score->value.shape() == Shape({1, 1, 4, 4}));
  CHECK(out.offset->value.shape() == Shape({1, 2, 4, 4}));
  CHECK(out.size->value.shape() == Shape({1, 2, 4, 4}));
  for (std::size_t i = 0; i < out.score->value.numel(); ++i)
    CHECK(out.score->value[i] == 0.5);
}

TEST_CASE("search grid side is the square root of the token count") {
  std::mt19937_64 rng(4);
  auto head = init_tracking_head<double>(rng, 4, 8, 1);
  Tape<double> tape(false);
  auto out = head.forward(tape, random_tokens(1, 256, 4, 5),
                          random_tokens(1, 256, 4, 6));
  CHECK(out.score->value.dim(2) == 16);
  CHECK_THROWS_AS(head.forward(tape, random_tokens(1, 15, 4, 7),
                               random_tokens(1, 15, 4, 8)),
                  ShapeError);
}

TEST_CASE("head gradients match finite differences") {
  // Tiny head (G=4, C=8) touching conv, batch norm and all three branches.
  std::mt19937_64 rng(11);
  auto head = init_tracking_head<double>(rng, 8, 12, 2);
  // Nonzero final layers so every path carries gradient.
  for (auto* sh : {&head.score, &head.offset, &head.size}) {
    sh->final_w->value.fill_normal(rng, 0.3);
    sh->final_b->value.fill_normal(rng, 0.1);
  }
  auto f_rgb = random_tokens(1, 16, 8, 12);
  auto f_event = random_tokens(1, 16, 8, 13);

  std::mt19937_64 wrng(14);
  NdArray<double> w_score({1, 1, 4, 4}), w_off({1, 2, 4, 4}),
      w_size({1, 2, 4, 4});
  w_score.fill_normal(wrng, 1.0);
  w_off.fill_normal(wrng, 1.0);
  w_size.fill_normal(wrng, 1.0);

  auto scalar = [&] {
    Tape<double> t(false);
    auto out = head.forward(t, f_rgb, f_event);
    double acc = 0;
    for (std::size_t i = 0; i < w_score.numel(); ++i)
      acc += out.score->value[i] * w_score[i];
    for (std::size_t i = 0; i < w_off.numel(); ++i)
      acc += out.offset->value[i] * w_off[i];
    for (std::size_t i = 0; i < w_size.numel(); ++i)
      acc += out.size->value[i] * w_size[i];
    return acc;
  };

  Tape<double> tape;
  auto out = head.forward(tape, f_rgb, f_event);
  out.score->grad_buffer() = w_score;
  out.offset->grad_buffer() = w_off;
  out.size->grad_buffer() = w_size;
  tape.replay();

  ParamList<double> params;
  head.collect(params);
  params.push_back({"f_rgb", f_rgb});
  params.push_back({"f_event", f_event});
  for (auto& [name, var] : params) {
    const auto res = td::check_grad(var, scalar, name);
    INFO("parameter ", name, " worst rel err ", res.max_rel_err);
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("decode_box") {
  const std::size_t G = 4;
  SUBCASE("single peak at the origin cell") {
    NdArray<double> score({1, 1, G, G});
    score.at(0, 0, 0, 0) = 0.9;
    NdArray<double> offset({1, 2, G, G});  // zero offsets
    NdArray<double> size = NdArray<double>::full({1, 2, G, G}, 0.25);
    auto d = decode_box(score, offset, size);
    CHECK(d.box.cx == 0.0);
    CHECK(d.box.cy == 0.0);
    CHECK(d.box.w == 0.25);
    CHECK(d.box.h == 0.25);
    CHECK(d.peak_score == 0.9);
  }
  SUBCASE("uniform map breaks the tie at the smallest flat index") {
    NdArray<double> score = NdArray<double>::full({1, 1, G, G}, 0.5);
    NdArray<double> offset({1, 2, G, G});
    NdArray<double> size = NdArray<double>::full({1, 2, G, G}, 0.1);
    auto d = decode_box(score, offset, size);
    CHECK(d.cell_i == 0);
    CHECK(d.cell_j == 0);
  }
  SUBCASE("random maps agree with an exhaustive argmax loop") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 20; ++trial) {
      NdArray<double> score({1, 1, G, G});
      score.fill_uniform(rng, 0.0, 1.0);
      NdArray<double> offset({1, 2, G, G});
      offset.fill_uniform(rng, 0.0, 1.0);
      NdArray<double> size({1, 2, G, G});
      size.fill_uniform(rng, 0.05, 1.0);
      auto d = decode_box(score, offset, size);

      double best = -1;
      std::size_t bi = 0, bj = 0;
      for (std::size_t i = 0; i < G; ++i)
        for (std::size_t j = 0; j < G; ++j)
          if (score.at(0, 0, i, j) > best) {
            best = score.at(0, 0, i, j);
            bi = i;
            bj = j;
          }
      CHECK(d.cell_i == bi);
      CHECK(d.cell_j == bj);
      CHECK(d.box.cx ==
            doctest::Approx((bj + offset.at(0, 0, bi, bj)) / double(G)));
      CHECK(d.box.cy ==
            doctest::Approx((bi + offset.at(0, 1, bi, bj)) / double(G)));
    }
  }
}

TEST_CASE("focal loss") {
  const std::size_t G = 8;
  auto target = gaussian_score_target<double>(G, 3, 5);
  Tape<double> tape(false);

  SUBCASE("near-perfect prediction approaches zero") {
    NdArray<double> good({1, 1, G, G});
    for (std::size_t i = 0; i < G; ++i)
      for (std::size_t j = 0; j < G; ++j)
        good.at(0, 0, i, j) = (i == 3 && j == 5) ? 1.0 - 1e-9 : 1e-9;
    auto loss = focal_loss(tape, make_var(good), target);
    CHECK(loss->value[0] < 1e-6);
  }
  SUBCASE("uniform half scores cost strictly more than zero") {
    auto loss =
        focal_loss(tape, make_var(NdArray<double>::full({1, 1, G, G}, 0.5)),
                   target);
    CHECK(loss->value[0] > 0.0);
  }
  SUBCASE("two-by-two case equals the formula by hand") {
    NdArray<double> t22({1, 1, 2, 2});
    t22.at(0, 0, 0, 0) = 1.0;
    t22.at(0, 0, 0, 1) = 0.5;
    t22.at(0, 0, 1, 0) = 0.25;
    t22.at(0, 0, 1, 1) = 0.0;
    NdArray<double> p22({1, 1, 2, 2});
    p22.at(0, 0, 0, 0) = 0.7;
    p22.at(0, 0, 0, 1) = 0.4;
    p22.at(0, 0, 1, 0) = 0.2;
    p22.at(0, 0, 1, 1) = 0.1;
    auto loss = focal_loss(tape, make_var(p22), t22);
    const double pos = std::pow(1 - 0.7, 2) * std::log(0.7);
    const double n1 = std::pow(1 - 0.5, 4) * 0.4 * 0.4 * std::log(1 - 0.4);
    const double n2 = std::pow(1 - 0.25, 4) * 0.2 * 0.2 * std::log(1 - 0.2);
    const double n3 = std::pow(1 - 0.0, 4) * 0.1 * 0.1 * std::log(1 - 0.1);
    const double want = -(pos + n1 + n2 + n3) / 4.0;
    CHECK(loss->value[0] == doctest::Approx(want).epsilon(1e-12));
  }
  SUBCASE("gradient matches finite differences") {
    std::mt19937_64 rng(31);
    NdArray<double> p({1, 1, G, G});
    p.fill_uniform(rng, 0.05, 0.95);
    auto pv = make_var(p);
    auto run = [&] {
      Tape<double> t(false);
      return focal_loss(t, pv, target)->value[0];
    };
    Tape<double> g;
    auto loss = focal_loss(g, pv, target);
    g.backward(loss);
    CHECK(td::check_grad(pv, run).max_rel_err < 1e-5);
  }
}

TEST_CASE("giou loss") {
  Tape<double> tape(false);
  SUBCASE("identical boxes cost zero") {
    NdArray<double> box({1, 4}, {0.5, 0.5, 0.2, 0.3});
    auto loss = giou_loss(tape, make_var(box), box);
    CHECK(loss->value[0] == doctest::Approx(0.0));
    CHECK(giou(NormBox{0.5, 0.5, 0.2, 0.3}, NormBox{0.5, 0.5, 0.2, 0.3}) ==
          doctest::Approx(1.0));
  }
  SUBCASE("distant disjoint boxes approach a cost of two") {
    NdArray<double> pred({1, 4}, {0.0, 0.0, 1.0, 1.0});
    NdArray<double> gt({1, 4}, {1000.0, 0.0, 1.0, 1.0});
    auto loss = giou_loss(tape, make_var(pred), gt);
    CHECK(loss->value[0] > 1.99);
    CHECK(loss->value[0] <= 2.0);
  }
  SUBCASE("symmetric in its arguments and bounded") {
    std::mt19937_64 rng(41);
    std::uniform_real_distribution<double> u(0.05, 0.95);
    for (int k = 0; k < 50; ++k) {
      NormBox a{u(rng), u(rng), u(rng), u(rng)};
      NormBox b{u(rng), u(rng), u(rng), u(rng)};
      const double ab = 1.0 - giou(a, b);
      const double ba = 1.0 - giou(b, a);
      CHECK(ab == doctest::Approx(ba).epsilon(1e-12));
      CHECK(ab >= 0.0);
      CHECK(ab <= 2.0);
    }
  }
  SUBCASE("matches Monte-Carlo area estimation") {
    std::mt19937_64 rng(43);
    std::uniform_real_distribution<double> u(0.2, 0.8);
    for (int k = 0; k < 5; ++k) {
      NormBox a{u(rng), u(rng), u(rng), u(rng)};
      NormBox b{u(rng), u(rng), u(rng), u(rng)};
      const double mc = giou_monte_carlo(a, b, 1000000, 1000 + k);
      CHECK(std::abs(giou(a, b) - mc) < 1e-2);
    }
  }
  SUBCASE("zero-area ground truth is rejected") {
    NdArray<double> pred({1, 4}, {0.5, 0.5, 0.2, 0.2});
    NdArray<double> gt({1, 4}, {0.5, 0.5, 0.0, 0.2});
    CHECK_THROWS_AS(giou_loss(tape, make_var(pred), gt), InputError);
  }
  SUBCASE("gradient matches finite differences") {
    // Coordinates chosen away from min/max ties, where the subgradient
    // would be ambiguous.
    NdArray<double> pred({2, 4},
                         {0.45, 0.52, 0.3, 0.25, 0.61, 0.4, 0.2, 0.35});
    NdArray<double> gt({2, 4}, {0.5, 0.5, 0.25, 0.3, 0.55, 0.45, 0.28, 0.2});
    auto pv = make_var(pred);
    auto run = [&] {
      Tape<double> t(false);
      return giou_loss(t, pv, gt)->value[0];
    };
    Tape<double> g;
    auto loss = giou_loss(g, pv, gt);
    g.backward(loss);
    CHECK(td::check_grad(pv, run).max_rel_err < 1e-6);
  }
}

TEST_CASE("l1 loss") {
  Tape<double> tape(false);
  NdArray<double> pred({1, 4}, {0.5, 0.5, 0.2, 0.3});
  SUBCASE("zero for identical boxes") {
    auto loss = l1_loss(tape, make_var(pred), pred);
    CHECK(loss->value[0] == 0.0);
  }
  SUBCASE("mean absolute difference") {
    NdArray<double> gt({1, 4}, {0.4, 0.7, 0.2, 0.3});
    auto loss = l1_loss(tape, make_var(pred), gt);
    CHECK(loss->value[0] == doctest::Approx((0.1 + 0.2) / 4.0));
  }
  SUBCASE("gradient matches finite differences") {
    NdArray<double> gt({1, 4}, {0.4, 0.7, 0.15, 0.35});
    auto pv = make_var(pred);
    auto run = [&] {
      Tape<double> t(false);
      return l1_loss(t, pv, gt)->value[0];
    };
    Tape<double> g;
    auto loss = l1_loss(g, pv, gt);
    g.backward(loss);
    CHECK(td::check_grad(pv, run).max_rel_err < 1e-6);
  }
}

TEST_CASE("total loss weighting") {
  SUBCASE("all-zero components give zero") {
    CHECK(total_loss(0.0, 0.0, 0.0) == 0.0);
  }
  SUBCASE("component weights are 1, 14, 1") {
    CHECK(total_loss(0.1, 0.2, 0.3) == doctest::Approx(3.2).epsilon(1e-12));
  }
  SUBCASE("monotone in each component") {
    const double base = total_loss(0.1, 0.2, 0.3);
    CHECK(total_loss(0.2, 0.2, 0.3) > base);
    CHECK(total_loss(0.1, 0.3, 0.3) > base);
    CHECK(total_loss(0.1, 0.2, 0.4) > base);
  }
  SUBCASE("gradient reaches all three sub-heads") {
    std::mt19937_64 rng(51);
    auto head = init_tracking_head<double>(rng, 4, 8, 1);
    for (auto* sh : {&head.score, &head.offset, &head.size}) {
      sh->final_w->value.fill_normal(rng, 0.3);
      sh->final_b->value.fill_normal(rng, 0.1);
    }
    auto f_rgb = random_tokens(1, 16, 4, 52);
    auto f_event = random_tokens(1, 16, 4, 53);
    Tape<double> tape;
    auto out = head.forward(tape, f_rgb, f_event);
    auto target = gaussian_score_target<double>(4, 1, 2);
    auto box = box_at_cell(tape, out, 1, 2);
    NdArray<double> gt({1, 4}, {0.55, 0.35, 0.3, 0.25});
    auto loss = total_loss(tape, focal_loss(tape, out.score, target),
                           l1_loss(tape, box, gt), giou_loss(tape, box, gt));
    tape.backward(loss);
    CHECK(max_abs(head.score.final_w->grad) > 1e-8);
    CHECK(max_abs(head.offset.final_w->grad) > 1e-8);
    CHECK(max_abs(head.size.final_w->grad) > 1e-8);
  }
}

TEST_CASE("encode-decode recovery within one grid cell") {
  const std::size_t G = 16;
  std::mt19937_64 rng(61);
  std::uniform_real_distribution<double> u(0.15, 0.85);
  for (int k = 0; k < 25; ++k) {
    NormBox want{u(rng), u(rng), 0.1 + 0.4 * u(rng), 0.1 + 0.4 * u(rng)};
    // Synthesize maps that place a peak for this box.
    const auto gj = static_cast<std::size_t>(want.cx * G);
    const auto gi = static_cast<std::size_t>(want.cy * G);
    NdArray<double> score({1, 1, G, G});
    score.at(0, 0, gi, gj) = 1.0;
    NdArray<double> offset({1, 2, G, G});
    offset.at(0, 0, gi, gj) = want.cx * G - gj;
    offset.at(0, 1, gi, gj) = want.cy * G - gi;
    NdArray<double> size({1, 2, G, G});
    size.at(0, 0, gi, gj) = want.w;
    size.at(0, 1, gi, gj) = want.h;
    auto d = decode_box(score, offset, size);
    CHECK(d.box.cx == doctest::Approx(want.cx).epsilon(1e-9));
    CHECK(d.box.cy == doctest::Approx(want.cy).epsilon(1e-9));
    CHECK(d.box.w == doctest::Approx(want.w));
    CHECK(d.box.h == doctest::Approx(want.h));
  }
}

TEST_CASE("score head and bce loss") {
  std::mt19937_64 rng(71);
  auto sh = init_score_head<double>(rng, 8);
  Tape<double> tape(false);
  auto logits = sh.forward(tape, random_tokens(2, 12, 8, 72),
                           random_tokens(2, 12, 8, 73));
  CHECK(logits->value.shape() == Shape({2, 1}));

  SUBCASE("zero logit against a positive label costs ln 2") {
    auto l = make_var(NdArray<double>::zeros({1}));
    auto loss = bce_logits_loss(tape, l, NdArray<double>({1}, {1.0}));
    CHECK(loss->value[0] == doctest::Approx(std::log(2.0)));
  }
  SUBCASE("large logit against a positive label approaches zero") {
    auto l = make_var(NdArray<double>({1}, {30.0}));
    auto loss = bce_logits_loss(tape, l, NdArray<double>({1}, {1.0}));
    CHECK(loss->value[0] < 1e-12);
  }
  SUBCASE("matches the direct formula on random pairs") {
    std::mt19937_64 r2(74);
    for (int k = 0; k < 30; ++k) {
      std::uniform_real_distribution<double> ux(-4.0, 4.0);
      const double x = ux(r2);
      const double y = (r2() & 1) ? 1.0 : 0.0;
      auto l = make_var(NdArray<double>({1}, {x}));
      auto loss = bce_logits_loss(tape, l, NdArray<double>({1}, {y}));
      const double s = 1.0 / (1.0 + std::exp(-x));
      const double want = -(y * std::log(s) + (1 - y) * std::log(1 - s));
      CHECK(loss->value[0] == doctest::Approx(want).epsilon(1e-9));
    }
  }
  SUBCASE("labels outside zero-one are rejected") {
    auto l = make_var(NdArray<double>::zeros({1}));
    CHECK_THROWS_AS(bce_logits_loss(tape, l, NdArray<double>({1}, {0.5})),
                    InputError);
  }
  SUBCASE("gradient matches finite differences") {
    auto l = make_var(NdArray<double>({3}, {0.3, -1.2, 2.0}));
    NdArray<double> labels({3}, {1.0, 0.0, 1.0});
    auto run = [&] {
      Tape<double> t(false);
      return bce_logits_loss(t, l, labels)->value[0];
    };
    Tape<double> g;
    auto loss = bce_logits_loss(g, l, labels);
    g.backward(loss);
    CHECK(td::check_grad(l, run).max_rel_err < 1e-6);
  }
}
