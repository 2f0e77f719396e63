#include <doctest.h>

#include <cmath>
#include <fstream>

#include "fewseg/evaluation.hpp"
#include "fewseg/errors.hpp"
#include "support.hpp"

using namespace fewseg;
using testing::box_mask;
using testing::random_mask;
using testing::to_grid;

TEST_CASE("dsc hand cases") {
  const Mask a = box_mask(8, 8, 0, 0, 2, 2);
  const Mask b = box_mask(8, 8, 4, 4, 6, 6);
  CHECK(dsc(a, a) == 1.0);
  CHECK(dsc(a, b) == 0.0);
  CHECK(dsc(Mask::Zero(4, 4), Mask::Zero(4, 4)) == 1.0);
  CHECK(dsc(box_mask(4, 4, 0, 0, 1, 2), box_mask(4, 4, 0, 0, 1, 1)) == doctest::Approx(2.0 / 3.0));
  CHECK_THROWS_AS(dsc(Mask::Zero(3, 3), Mask::Zero(3, 4)), InvalidInputError);
}

TEST_CASE("hd95 hand cases") {
  SUBCASE("identical") { CHECK(hd95(box_mask(8, 8, 2, 2, 5, 5), box_mask(8, 8, 2, 2, 5, 5)) == 0.0); }
  SUBCASE("single pixels three apart") {
    Mask a = Mask::Zero(8, 8), b = Mask::Zero(8, 8);
    a(1, 1) = 1;
    b(1, 4) = 1;
    CHECK(hd95(a, b) == 3.0);
  }
  SUBCASE("disjoint boxes") {
    const Mask a = box_mask(10, 10, 0, 0, 2, 2);
    const Mask b = box_mask(10, 10, 0, 7, 2, 9);
    const double expected = oracle::brute_hd_percentile(to_grid(a), to_grid(b), 95).value;
    CHECK(hd95(a, b) == expected);
  }
  SUBCASE("empty cases") {
    CHECK(hd95(Mask::Zero(4, 4), Mask::Zero(4, 4)) == 0.0);
    CHECK(std::isnan(hd95(box_mask(4, 4, 0, 0, 1, 1), Mask::Zero(4, 4))));
  }
  SUBCASE("anisotropic spacing scales row distances") {
    Mask a = Mask::Zero(8, 8), b = Mask::Zero(8, 8);
    a(1, 1) = 1;
    b(4, 1) = 1;
    CHECK(hd95(a, b, {2.0, 1.0}) == doctest::Approx(6.0));
  }
}

TEST_CASE("hd95 matches the all-pairs oracle on random masks") {
  Rng rng(42);
  for (int t = 0; t < 100; ++t) {
    const int rows = static_cast<int>(uniform_int(rng, 1, 32));
    const int cols = static_cast<int>(uniform_int(rng, 1, 32));
    const double density = uniform(rng, 0.05, 0.6);
    const Mask a = random_mask(rows, cols, density, rng);
    const Mask b = random_mask(rows, cols, density, rng);
    const double got = hd95(a, b);
    const double want = oracle::brute_hd_percentile(to_grid(a), to_grid(b), 95).value;
    if (std::isnan(want)) {
      CHECK(std::isnan(got));
    } else {
      CHECK(got == want);
    }
    CHECK(dsc(a, b) == dsc(b, a));
  }
}

TEST_CASE("squared distance transform with spacing matches brute force") {
  Rng rng(5);
  const Mask f = random_mask(9, 13, 0.1, rng);
  const Spacing sp{1.5, 0.7};
  const auto d = squared_distance_transform(f, sp);
  for (int r = 0; r < 9; ++r) {
    for (int c = 0; c < 13; ++c) {
      double best = INFINITY;
      for (int i = 0; i < 9; ++i) {
        for (int j = 0; j < 13; ++j) {
          if (!f(i, j)) continue;
          const double dr = (r - i) * sp.row_mm, dc = (c - j) * sp.col_mm;
          best = std::min(best, dr * dr + dc * dc);
        }
      }
      CHECK(d(r, c) == doctest::Approx(best));
    }
  }
}

TEST_CASE("percentile uses linear interpolation") {
  CHECK(percentile({1, 2, 3, 4, 5}, 50) == 3.0);
  CHECK(percentile({0, 10}, 95) == doctest::Approx(9.5));
  CHECK(percentile({7}, 95) == 7.0);
  CHECK(std::isnan(percentile({}, 95)));
}

TEST_CASE("interior_point matches the distance-argmax oracle exhaustively on small masks") {
  // Every mask up to 4x4, then random masks up to 16x16.
  for (int rows = 1; rows <= 4; ++rows) {
    for (int cols = 1; cols <= 4; ++cols) {
      const int n = rows * cols;
      for (int bits = 1; bits < (1 << n); ++bits) {
        Mask m(rows, cols);
        for (int i = 0; i < n; ++i) m.data()[i] = (bits >> i) & 1;
        const auto p = interior_point(m);
        REQUIRE(p.has_value());
        const auto want = oracle::brute_distance_argmax(to_grid(m));
        CHECK(p->row == want.first);
        CHECK(p->col == want.second);
      }
    }
  }
  Rng rng(9);
  for (int t = 0; t < 400; ++t) {
    const int rows = static_cast<int>(uniform_int(rng, 1, 16));
    const int cols = static_cast<int>(uniform_int(rng, 1, 16));
    const Mask m = random_mask(rows, cols, uniform(rng, 0.2, 0.95), rng);
    if (count_pixels(m) == 0) continue;
    const auto p = interior_point(m);
    const auto want = oracle::brute_distance_argmax(to_grid(m));
    CHECK(p->row == want.first);
    CHECK(p->col == want.second);
  }
  CHECK_FALSE(interior_point(Mask::Zero(3, 3)).has_value());
}

TEST_CASE("random_point stays inside the mask") {
  Rng rng(1);
  const Mask m = box_mask(10, 10, 3, 4, 5, 8);
  for (int i = 0; i < 200; ++i) {
    const auto p = random_point(m, rng);
    REQUIRE(p);
    CHECK(m(p->row, p->col) == 1);
  }
  CHECK_FALSE(random_point(Mask::Zero(2, 2), rng).has_value());
}

namespace {

std::vector<LabeledSlice> toy_test_set() {
  std::vector<LabeledSlice> out;
  for (int v = 0; v < 2; ++v) {
    for (int s = 0; s < 3; ++s) {
      LabeledSlice sl;
      sl.image = Image::Zero(12, 12);
      sl.label = LabelMap::Zero(12, 12);
      if (s > 0) sl.label.block(2 + s, 2, 4, 5).setConstant(1);
      if (v == 1 && s == 2) sl.label.block(8, 8, 3, 3).setConstant(2);
      sl.meta = {"v" + std::to_string(v), s, {}};
      out.push_back(sl);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("evaluate: a perfect predictor scores DSC 1 and HD95 0") {
  const auto test = toy_test_set();
  const MaskPredictor oracle_predict = [&](const LabeledSlice& s, const PointPrompt& p) {
    return class_mask(s.label, p.class_id);
  };
  const auto r = evaluate(oracle_predict, test, 2, PromptStrategy::kInterior, 3);
  CHECK(r.aggregation == Aggregation::kPerVolume);
  CHECK(r.mean_dsc == 1.0);
  CHECK(r.mean_hd95 == 0.0);
  REQUIRE(r.classes.size() == 2);
  CHECK(r.classes[0].samples == 4);
  CHECK(r.classes[1].samples == 1);
  CHECK(r.absent_classes == 0);
}

TEST_CASE("evaluate: empty predictions count undefined HD95 and absent classes") {
  const auto test = toy_test_set();
  const MaskPredictor empty = [](const LabeledSlice& s, const PointPrompt&) {
    return Mask(Mask::Zero(s.rows(), s.cols()));
  };
  const auto r = evaluate(empty, test, 3, PromptStrategy::kRandom, 3, Aggregation::kPerSlice);
  CHECK(r.mean_dsc == 0.0);
  CHECK(r.hd95_undefined == 5);
  CHECK(r.absent_classes == 1);
  CHECK_FALSE(r.classes[2].present);
}

TEST_CASE("random prompts are reproducible and aggregation defaults depend on class count") {
  const auto test = toy_test_set();
  std::vector<PointPrompt> seen_a, seen_b;
  auto recorder = [](std::vector<PointPrompt>& seen) {
    return MaskPredictor([&seen](const LabeledSlice& s, const PointPrompt& p) {
      seen.push_back(p);
      return class_mask(s.label, p.class_id);
    });
  };
  evaluate(recorder(seen_a), test, 3, PromptStrategy::kRandom, 11);
  evaluate(recorder(seen_b), test, 3, PromptStrategy::kRandom, 11);
  CHECK(seen_a == seen_b);
  CHECK(default_aggregation(1) == Aggregation::kPerSlice);
  CHECK(default_aggregation(8) == Aggregation::kPerVolume);
}

TEST_CASE("report CSV round-trips, including NaN") {
  MetricsReport r;
  r.method = "m";
  r.exemplars = "3";
  r.seed = 7;
  r.config_hash = "abc";
  r.classes = {{"c1", true, 0.5, 2.25, 4, 0}, {"c2", false, 0.0, NAN, 0, 0}};
  r.mean_dsc = 0.5;
  r.mean_hd95 = 2.25;
  const auto csv = report_csv({r});
  const auto back = parse_report_csv(csv);
  REQUIRE(back.size() == 1);
  CHECK(back[0].method == "m");
  CHECK(back[0].mean_dsc == 0.5);
  CHECK(back[0].classes[0].hd95 == 2.25);
  CHECK(std::isnan(back[0].classes[1].hd95));
  CHECK(report_csv(back) == csv);
  CHECK(report_text({r}).find("50.00") != std::string::npos);
}

TEST_CASE("overlay writer emits a binary PPM") {
  testing::TempDir dir("overlay");
  const Image img = Image::Constant(6, 5, 0.5);
  write_overlay_ppm(img, box_mask(6, 5, 1, 1, 4, 4), box_mask(6, 5, 2, 2, 5, 5), dir.path() / "o.ppm");
  std::ifstream in(dir.path() / "o.ppm", std::ios::binary);
  std::string magic;
  in >> magic;
  CHECK(magic == "P6");
}
