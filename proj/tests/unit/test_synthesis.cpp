#include <doctest.h>

#include <cmath>
#include <set>

#include "fewseg/array_io.hpp"
#include "fewseg/errors.hpp"
#include "fewseg/synthesis.hpp"
#include "support.hpp"

using namespace fewseg;

namespace {

LabeledSlice exemplar_with_box(int size, int r0, int c0, int r1, int c1, int cls, Rng& rng) {
  LabeledSlice s = testing::make_slice(size, size, rng);
  s.label.block(r0, c0, r1 - r0, c1 - c0).setConstant(cls);
  return s;
}

LabeledSlice background(int size, Rng& rng) { return testing::make_slice(size, size, rng); }

std::set<int> classes_of(const LabelMap& l) {
  std::set<int> s;
  for (Eigen::Index i = 0; i < l.size(); ++i) {
    if (l.data()[i] > 0) s.insert(l.data()[i]);
  }
  return s;
}

std::pair<double, double> centroid_of(const LabelMap& l, int cls) {
  double r = 0, c = 0, n = 0;
  for (int i = 0; i < l.rows(); ++i) {
    for (int j = 0; j < l.cols(); ++j) {
      if (l(i, j) == cls) {
        r += i;
        c += j;
        ++n;
      }
    }
  }
  return {r / n, c / n};
}

// True when `out` is the background transform plus the transformed cutout
// shifted by some offset within `jitter`.
bool is_composite(const LabeledSlice& out, const LabeledSlice& fg_transformed,
                  const LabeledSlice& bg_transformed, int jitter) {
  for (int dr = -jitter; dr <= jitter; ++dr) {
    for (int dc = -jitter; dc <= jitter; ++dc) {
      bool ok = true;
      for (int r = 0; r < out.rows() && ok; ++r) {
        for (int c = 0; c < out.cols() && ok; ++c) {
          const int sr = r - dr, sc = c - dc;
          const bool inside = sr >= 0 && sc >= 0 && sr < out.rows() && sc < out.cols();
          const int lab = inside ? fg_transformed.label(sr, sc) : 0;
          if (lab > 0) {
            ok = out.label(r, c) == lab && out.image(r, c) == fg_transformed.image(sr, sc);
          } else {
            ok = out.label(r, c) == 0 && out.image(r, c) == bg_transformed.image(r, c);
          }
        }
      }
      if (ok) return true;
    }
  }
  return false;
}

}  // namespace

TEST_CASE("sample_transform: identity ranges, determinism and bounds") {
  Rng a(11), b(11);
  CHECK(sample_transform(SynthesisConfig::identity(), a).is_identity());
  SynthesisConfig c;
  Rng x(11), y(11);
  CHECK(sample_transform(c, x) == sample_transform(c, y));
  Rng rng(2);
  double lo = 1e9, hi = -1e9;
  int flips = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto s = sample_transform(c, rng);
    lo = std::min(lo, s.rotation_deg);
    hi = std::max(hi, s.rotation_deg);
    CHECK(s.scale_factor >= 0.8);
    CHECK(s.scale_factor <= 1.2);
    CHECK(s.blur_sigma >= 0.0);
    CHECK(s.blur_sigma <= 1.5);
    flips += s.flip_h;
  }
  CHECK(lo >= -30.0);
  CHECK(hi <= 30.0);
  CHECK(hi - lo > 50.0);
  CHECK(flips > 430);
  CHECK(flips < 570);
}

TEST_CASE("apply_transform basics") {
  Rng rng(1);
  LabeledSlice s = exemplar_with_box(10, 2, 3, 5, 6, 2, rng);
  SUBCASE("identity is exact") { CHECK(apply_transform(s, TransformSpec{}) == s); }
  SUBCASE("flip twice is the identity") {
    TransformSpec f;
    f.flip_h = true;
    CHECK(apply_transform(apply_transform(s, f), f) == s);
    f.flip_v = true;
    CHECK(apply_transform(apply_transform(s, f), f) == s);
  }
  SUBCASE("a 90 degree rotation moves (2,5) to (4,2) in a 10x10 grid") {
    LabeledSlice one = s;
    one.label.setZero();
    one.label(2, 5) = 1;
    TransformSpec r;
    r.rotation_deg = 90;
    const auto out = apply_transform(one, r);
    CHECK(count_pixels(class_mask(out.label, 1)) == 1);
    CHECK(out.label(4, 2) == 1);
    CHECK(out.image(4, 2) == doctest::Approx(one.image(2, 5)).epsilon(1e-12));
  }
  SUBCASE("nearest-neighbour labels never invent classes; images stay in [0, 1]") {
    LabeledSlice two = s;
    two.label.block(6, 6, 3, 3).setConstant(5);
    TransformSpec t{1.2, 1.4, 0.3, 1.13, true, false, 17.0};
    const auto out = apply_transform(two, t);
    for (int k : classes_of(out.label)) CHECK((k == 2 || k == 5));
    CHECK(out.image.minCoeff() >= 0.0);
    CHECK(out.image.maxCoeff() <= 1.0);
  }
  SUBCASE("intensity ops touch the image only") {
    TransformSpec t;
    t.intensity_gain = 0.5;
    t.intensity_bias = 0.1;
    t.blur_sigma = 1.0;
    const auto out = apply_transform(s, t);
    CHECK(out.label == s.label);
    CHECK(out.image != s.image);
  }
}

TEST_CASE("synthesize_single with identity transforms pastes the exemplar in place") {
  Rng rng(3);
  const auto ex = exemplar_with_box(16, 4, 5, 9, 11, 1, rng);
  const auto bg = background(16, rng);
  Rng r(1);
  const auto out = synthesize_single(ex, bg, TransformSpec{}, TransformSpec{}, 0, r);
  CHECK(out.label == ex.label);
  for (int i = 0; i < 16; ++i) {
    for (int j = 0; j < 16; ++j) {
      CHECK(out.image(i, j) == (ex.label(i, j) > 0 ? ex.image(i, j) : bg.image(i, j)));
    }
  }
}

TEST_CASE("synthesis properties over random transforms") {
  Rng rng(5);
  const auto ex = exemplar_with_box(24, 6, 7, 13, 15, 1, rng);
  const auto bg = background(24, rng);
  SynthesisConfig c;
  c.position_jitter = 3;
  Rng draws(17);
  for (int t = 0; t < 25; ++t) {
    const auto fg = sample_transform(c, draws);
    const auto b = sample_transform(c, draws);
    Rng local(static_cast<std::uint64_t>(t));
    const auto out = synthesize_single(ex, bg, fg, b, c.position_jitter, local);
    // Reconstruct the cutout exactly as synthesis does: pivot at the
    // half-pixel-rounded foreground centroid.
    const auto [cr, cc] = centroid_of(ex.label, 1);
    const auto fg_t = apply_transform(ex, fg, std::pair{std::round(2 * cr) / 2, std::round(2 * cc) / 2});
    const auto bg_t = apply_transform(bg, b);
    CHECK(is_composite(out, fg_t, bg_t, c.position_jitter));
    CHECK(classes_of(out.label) == std::set<int>{1});
  }
}

TEST_CASE("foreground area scales with the square of the scale factor") {
  Rng rng(8);
  const auto ex = exemplar_with_box(48, 14, 14, 34, 34, 1, rng);
  const auto bg = background(48, rng);
  Rng draws(4);
  for (int t = 0; t < 100; ++t) {
    TransformSpec s;
    s.scale_factor = uniform(draws, 0.8, 1.2);
    Rng local(static_cast<std::uint64_t>(t));
    const auto out = synthesize_single(ex, bg, s, TransformSpec{}, 0, local);
    const double ratio = static_cast<double>(count_pixels(foreground_mask(out.label))) / 400.0;
    const double expected = s.scale_factor * s.scale_factor;
    CHECK(ratio == doctest::Approx(expected).epsilon(0.2));
  }
}

TEST_CASE("out-of-frame jitter gives up after repeated draws") {
  Rng rng(2);
  const auto ex = exemplar_with_box(10, 4, 4, 5, 5, 1, rng);
  const auto bg = background(10, rng);
  Rng r(3);
  CHECK_THROWS_AS(synthesize_single(ex, bg, TransformSpec{}, TransformSpec{}, 100000, r), SynthesisError);
  LabeledSlice dirty = bg;
  dirty.label(0, 0) = 1;
  CHECK_THROWS_AS(synthesize_single(ex, dirty, TransformSpec{}, TransformSpec{}, 0, r), InvalidInputError);
}

TEST_CASE("synthesize_multi") {
  Rng rng(6);
  auto ex = exemplar_with_box(32, 4, 4, 12, 12, 1, rng);
  const auto bg = background(32, rng);
  SUBCASE("single-class exemplars reduce to synthesize_single") {
    SynthesisConfig c;
    Rng draws(9);
    for (int t = 0; t < 20; ++t) {
      const auto fg = sample_transform(c, draws);
      const auto b = sample_transform(c, draws);
      Rng r1(static_cast<std::uint64_t>(t)), r2(static_cast<std::uint64_t>(t));
      CHECK(synthesize_multi(ex, bg, {fg}, b, 5, r1) == synthesize_single(ex, bg, fg, b, 5, r2));
    }
  }
  ex.label.block(18, 18, 8, 10).setConstant(3);
  SUBCASE("identity transforms keep the exemplar label") {
    Rng r(1);
    const auto out = synthesize_multi(ex, bg, {TransformSpec{}, TransformSpec{}}, TransformSpec{}, 0, r);
    CHECK(out.label == ex.label);
  }
  SUBCASE("independent rotations keep organs near their centroids") {
    TransformSpec rot;
    rot.rotation_deg = 10;
    const int jitter = 2;
    for (std::uint64_t t = 0; t < 10; ++t) {
      Rng r(t);
      const auto out = synthesize_multi(ex, bg, {rot, rot}, TransformSpec{}, jitter, r);
      CHECK(classes_of(out.label) == std::set<int>{1, 3});
      for (int k : {1, 3}) {
        const auto [ar, ac] = centroid_of(ex.label, k);
        const auto [br, bc] = centroid_of(out.label, k);
        CHECK(std::hypot(ar - br, ac - bc) <= std::sqrt(2.0) * jitter + 1.0);
      }
    }
  }
  SUBCASE("overlap resolves with the lower class on top by default") {
    LabeledSlice ov = ex;
    ov.label.setZero();
    ov.label.block(5, 5, 6, 6).setConstant(2);
    ov.label.block(11, 5, 6, 6).setConstant(1);
    TransformSpec grow;
    grow.scale_factor = 1.6;
    Rng r1(0), r2(0);
    const auto low = synthesize_multi(ov, bg, {grow, grow}, TransformSpec{}, 0, r1);
    const auto high = synthesize_multi(ov, bg, {grow, grow}, TransformSpec{}, 0, r2, OverlapOrder::kHigherOnTop);
    CHECK(count_pixels(class_mask(low.label, 1)) > count_pixels(class_mask(high.label, 1)));
  }
  CHECK_THROWS_AS(
      [&] {
        Rng r(0);
        synthesize_multi(ex, bg, {TransformSpec{}}, TransformSpec{}, 0, r);
      }(),
      InvalidInputError);
}

TEST_CASE("build_dataset: exact size, manifest and byte-identical reruns") {
  testing::TempDir a("synth_a"), b("synth_b");
  Rng rng(1);
  std::vector<LabeledSlice> exs{exemplar_with_box(20, 3, 3, 9, 9, 1, rng), exemplar_with_box(20, 8, 6, 14, 13, 1, rng)};
  std::vector<LabeledSlice> bgs{background(20, rng), background(20, rng), background(20, rng)};
  SynthesisConfig c;
  c.num_samples = 37;
  c.seed = 5;
  const auto m1 = build_dataset(exs, bgs, c, 1, a.path());
  const auto m2 = build_dataset(exs, bgs, c, 1, b.path());
  CHECK(m1.records.size() == 37);
  CHECK(load_manifest(a.path() / "manifest.json") == m1);
  for (std::size_t i = 0; i < m1.records.size(); ++i) {
    CHECK(file_digest(a.path() / m1.records[i].path) == file_digest(b.path() / m2.records[i].path));
    CHECK(m1.records[i].has_foreground());
  }
  CHECK(file_digest(a.path() / "manifest.json") == file_digest(b.path() / "manifest.json"));
  c = SynthesisConfig::identity();
  c.num_samples = 1;
  const auto one = synthesize_samples({exs[0]}, {bgs[0]}, c);
  REQUIRE(one.size() == 1);
  CHECK(one[0].label == exs[0].label);
  CHECK_THROWS_AS(build_dataset(std::vector<LabeledSlice>{}, bgs, c, 1, a.path() / "x"), ConfigError);
  CHECK_THROWS_AS(build_dataset(exs, {}, c, 1, a.path() / "x"), ConfigError);
}

TEST_CASE("collect_backgrounds returns exactly the empty slices") {
  testing::TempDir dir("bg");
  DatasetManifest m;
  m.root = dir.path();
  Rng rng(4);
  for (int i = 0; i < 10; ++i) {
    LabeledSlice s = testing::make_slice(8, 8, rng);
    if (i % 3 != 0) s.label(i % 8, 2) = 1;
    s.meta.slice_index = i;
    append_slice(m, s, "s" + std::to_string(i) + ".slc");
  }
  const auto bgs = collect_backgrounds(m);
  CHECK(bgs.size() == 4);
  for (const auto& s : bgs) CHECK(s.label.maxCoeff() == 0);
  DatasetManifest none = m;
  none.records = {m.records[1]};
  CHECK_THROWS_AS(collect_backgrounds(none), SelectionError);
}

TEST_CASE("synthesis config JSON round-trips and validates") {
  SynthesisConfig c;
  c.mode = SynthesisMode::kCategoryWise;
  c.rotation_deg = {-10, 12};
  c.independent_background = false;
  const nlohmann::json j = c;
  const auto back = j.get<SynthesisConfig>();
  CHECK(nlohmann::json(back) == j);
  CHECK_THROWS_AS(nlohmann::json({{"num_samples", 0}}).get<SynthesisConfig>().validate(), ConfigError);
  CHECK_THROWS_AS(nlohmann::json({{"bogus", 1}}).get<SynthesisConfig>(), ConfigError);
  CHECK_THROWS_AS(nlohmann::json({{"scale_factor", {0.0, 1.0}}}).get<SynthesisConfig>().validate(), ConfigError);
}
