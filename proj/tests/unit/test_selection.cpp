#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <random>

#include "fewseg/errors.hpp"
#include "fewseg/selection.hpp"
#include "support.hpp"

using namespace fewseg;

namespace {

// Synthetic manifest: `volumes` volumes of `slices` slices; foreground grows
// toward the middle slice, and every 4th slice is empty.
DatasetManifest synthetic_manifest(int volumes, int slices, int classes = 1) {
  DatasetManifest m;
  m.class_count = classes;
  for (int v = 0; v < volumes; ++v) {
    for (int s = 0; s < slices; ++s) {
      SliceRecord r;
      r.path = "v" + std::to_string(v) + "_" + std::to_string(s);
      r.volume_id = "v" + std::to_string(100 + v);
      r.slice_index = s;
      r.class_pixel_counts.assign(static_cast<std::size_t>(classes) + 1, 0);
      if (s % 4 != 0) {
        for (int k = 1; k <= classes; ++k) {
          if ((s + k) % 3 != 0) r.class_pixel_counts[static_cast<std::size_t>(k)] = 5 + s * k + v;
        }
      }
      m.records.push_back(r);
    }
  }
  return m;
}

}  // namespace

TEST_CASE("random fraction: size, eligibility and determinism") {
  const auto m = synthetic_manifest(20, 13);
  const auto pool = candidate_pool(m, 10);
  const auto set = select_random_fraction(m, 0.05, 10, 3);
  CHECK(set.entries.size() == static_cast<std::size_t>(std::lround(0.05 * pool.size())));
  for (const auto& e : set.entries) CHECK(e.foreground_pixels() >= 10);
  CHECK(select_random_fraction(m, 0.05, 10, 3) == set);
  CHECK(select_random_fraction(m, 0.05, 10, 4) != set);
  CHECK(set.strategy == kStrategyRandomFraction);

  std::set<std::string> unique;
  for (const auto& e : set.entries) unique.insert(e.path);
  CHECK(unique.size() == set.entries.size());
}

TEST_CASE("random fraction: full pool and rounding") {
  const auto m = synthetic_manifest(4, 8);
  const auto pool = candidate_pool(m, 10);
  CHECK(select_random_fraction(m, 1.0, 10, 1).entries.size() == pool.size());
  CHECK_THROWS_AS(select_random_fraction(m, 0.0, 10, 1), ConfigError);
  CHECK_THROWS_AS(select_random_fraction(m, 0.001, 10, 1), SelectionError);
  CHECK_THROWS_AS(select_random_fraction(m, 0.5, 100000, 1), SelectionError);
}

TEST_CASE("a pool of 14662 at one percent yields 147") {
  DatasetManifest m;
  for (int i = 0; i < 14662; ++i) {
    m.records.push_back({"p" + std::to_string(i), "v" + std::to_string(i / 100), i % 100, {0, 20}, {}});
  }
  CHECK(select_random_fraction(m, 0.01, 10, 0).entries.size() == 147);
}

TEST_CASE("random selection is uniform over the pool") {
  const auto m = synthetic_manifest(2, 9);
  const auto pool = candidate_pool(m, 1);
  std::map<std::string, int> hits;
  const int trials = 3000;
  for (int t = 0; t < trials; ++t) {
    for (const auto& e : select_random_count(m, 2, 1, static_cast<std::uint64_t>(t)).entries) hits[e.path]++;
  }
  const double expected = trials * 2.0 / static_cast<double>(pool.size());
  for (const auto& r : pool) CHECK(std::abs(hits[r.path] - expected) < 5.0 * std::sqrt(expected));
}

TEST_CASE("most organs: one slice per volume maximizing distinct classes") {
  const auto m = synthetic_manifest(18, 12, 3);
  const auto set = select_most_organs(m, 18, 1, 7);
  CHECK(set.entries.size() == 18);
  std::map<std::string, SliceRecord> chosen;
  for (const auto& e : set.entries) chosen[e.volume_id] = e;
  CHECK(chosen.size() == 18);
  for (const auto& [vol, e] : chosen) {
    for (const auto& r : m.records) {
      if (r.volume_id != vol) continue;
      const bool better = r.distinct_foreground_classes() > e.distinct_foreground_classes() ||
                          (r.distinct_foreground_classes() == e.distinct_foreground_classes() &&
                           r.foreground_pixels() > e.foreground_pixels());
      CHECK_FALSE(better);
    }
  }
}

TEST_CASE("most organs: half the volumes and quotas") {
  const auto m = synthetic_manifest(18, 12, 3);
  const auto half = select_most_organs(m, 9, 1, 7);
  std::set<std::string> vols;
  for (const auto& e : half.entries) vols.insert(e.volume_id);
  CHECK(half.entries.size() == 9);
  CHECK(vols.size() == 9);

  const auto three = select_most_organs(m, 36, 3, 7);
  std::map<std::string, int> per;
  for (const auto& e : three.entries) per[e.volume_id]++;
  CHECK(per.size() == 12);
  for (const auto& [v, n] : per) CHECK(n == 3);

  CHECK_THROWS_AS(select_most_organs(m, 10, 3, 7), ConfigError);
  CHECK_THROWS_AS(select_most_organs(m, 19, 1, 7), SelectionError);
  CHECK_THROWS_AS(select_most_organs(m, 18 * 12, 12, 7), SelectionError);  // empty slices excluded
}

TEST_CASE("most organs: a slice that uniquely holds all classes always wins") {
  DatasetManifest m;
  m.class_count = 3;
  for (int s = 0; s < 10; ++s) {
    SliceRecord r{"s" + std::to_string(s), "vol", s, {0, 50, 0, 0}, {}};
    if (s == 5) r.class_pixel_counts = {0, 3, 3, 3};
    m.records.push_back(r);
  }
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto set = select_most_organs(m, 1, 1, seed);
    REQUIRE(set.entries.size() == 1);
    CHECK(set.entries[0].slice_index == 5);
  }
}

TEST_CASE("most organs is invariant to manifest record order") {
  auto m = synthetic_manifest(8, 10, 2);
  const auto a = select_most_organs(m, 4, 1, 11);
  std::mt19937 shuffle(3);
  std::shuffle(m.records.begin(), m.records.end(), shuffle);
  CHECK(select_most_organs(m, 4, 1, 11) == a);
  CHECK(select_random_count(m, 5, 10, 2) == select_random_count(synthetic_manifest(8, 10, 2), 5, 10, 2));
}

TEST_CASE("exemplar lists round-trip through JSON") {
  testing::TempDir dir("exemplars");
  const auto m = synthetic_manifest(3, 6);
  auto set = select_random_count(m, 3, 1, 1);
  set.root = dir.path();
  save_exemplars(set, dir.path() / "ex.json");
  CHECK(load_exemplars(dir.path() / "ex.json") == set);

  // A dataset root elsewhere is found again from the exemplar file's location.
  set.root = dir.path() / "data";
  save_exemplars(set, dir.path() / "runs" / "ex.json");
  CHECK(nlohmann::json::parse(std::ifstream(dir.path() / "runs" / "ex.json"))["root"] == "../data");
  CHECK(load_exemplars(dir.path() / "runs" / "ex.json").root == set.root);
}
