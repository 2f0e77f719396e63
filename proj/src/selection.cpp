#include "fewseg/selection.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "fewseg/errors.hpp"
#include "fewseg/rng.hpp"

namespace fewseg {

using nlohmann::json;

namespace {

bool by_position(const SliceRecord& a, const SliceRecord& b) {
  return std::tie(a.volume_id, a.slice_index, a.path) < std::tie(b.volume_id, b.slice_index, b.path);
}

// First n entries of a seeded Fisher-Yates shuffle.
template <typename T>
std::vector<T> sample_without_replacement(std::vector<T> items, std::size_t n, Rng& rng) {
  for (std::size_t i = 0; i < n; ++i) {
    const auto j = static_cast<std::size_t>(
        uniform_int(rng, static_cast<std::int64_t>(i), static_cast<std::int64_t>(items.size()) - 1));
    std::swap(items[i], items[j]);
  }
  items.resize(n);
  return items;
}

}  // namespace

void to_json(json& j, const ExemplarSet& s) {
  json entries = json::array();
  for (const auto& r : s.entries) {
    entries.push_back({{"path", r.path},
                       {"volume_id", r.volume_id},
                       {"slice_index", r.slice_index},
                       {"class_pixel_counts", r.class_pixel_counts},
                       {"spacing", {r.spacing.row_mm, r.spacing.col_mm}}});
  }
  j = json{{"strategy", s.strategy},
           {"seed", s.seed},
           {"root", s.root.string()},
           {"entries", std::move(entries)}};
}

void from_json(const json& j, ExemplarSet& s) {
  try {
    s.strategy = j.at("strategy").get<std::string>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.root = j.value("root", std::string());
    s.entries.clear();
    for (const auto& e : j.at("entries")) {
      SliceRecord r;
      r.path = e.at("path").get<std::string>();
      r.volume_id = e.at("volume_id").get<std::string>();
      r.slice_index = e.at("slice_index").get<int>();
      r.class_pixel_counts = e.at("class_pixel_counts").get<std::vector<std::int64_t>>();
      if (e.contains("spacing")) {
        const auto sp = e.at("spacing").get<std::vector<double>>();
        if (sp.size() != 2) throw ParseError("exemplar spacing must have two entries");
        r.spacing = {sp[0], sp[1]};
      }
      s.entries.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("exemplar list: ") + e.what());
  }
}

void save_exemplars(const ExemplarSet& set, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // The root is stored relative to the exemplar file so the pair can move together.
  ExemplarSet stored = set;
  const auto here = std::filesystem::weakly_canonical(std::filesystem::absolute(path).parent_path());
  stored.root = std::filesystem::weakly_canonical(std::filesystem::absolute(set.root)).lexically_relative(here);
  if (stored.root.empty()) stored.root = ".";
  std::ofstream out(path, std::ios::trunc);
  out << json(stored).dump(2) << '\n';
  if (!out) throw IoError("cannot write " + path.string());
}

ExemplarSet load_exemplars(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  ExemplarSet s = j.get<ExemplarSet>();
  if (s.root.empty() || s.root.is_relative()) {
    const std::filesystem::path base = path.has_parent_path() ? path.parent_path() : ".";
    s.root = s.root.empty() || s.root == "." ? base : (base / s.root).lexically_normal();
  }
  return s;
}

std::vector<LabeledSlice> load_exemplar_slices(const ExemplarSet& set) {
  DatasetManifest view;
  view.root = set.root;
  std::vector<LabeledSlice> out;
  for (const auto& r : set.entries) {
    view.class_count = std::max(view.class_count, static_cast<int>(r.class_pixel_counts.size()) - 1);
    out.push_back(load_slice(view, r));
  }
  return out;
}

std::vector<SliceRecord> candidate_pool(const DatasetManifest& manifest, int min_fg_pixels) {
  std::vector<SliceRecord> pool;
  const std::int64_t threshold = std::max(1, min_fg_pixels);
  for (const auto& r : manifest.records) {
    if (r.foreground_pixels() >= threshold) pool.push_back(r);
  }
  std::sort(pool.begin(), pool.end(), by_position);
  return pool;
}

ExemplarSet select_random_count(const DatasetManifest& manifest, int count, int min_fg_pixels,
                                std::uint64_t seed) {
  if (count < 1) throw ConfigError("exemplar count must be at least 1");
  auto pool = candidate_pool(manifest, min_fg_pixels);
  if (pool.empty()) {
    throw SelectionError("no slice has at least " + std::to_string(min_fg_pixels) +
                         " foreground pixels");
  }
  if (static_cast<std::size_t>(count) > pool.size()) {
    throw SelectionError("requested " + std::to_string(count) + " exemplars from a pool of " +
                         std::to_string(pool.size()));
  }
  Rng rng(seed);
  ExemplarSet set{kStrategyRandomCount, seed, manifest.root,
                  sample_without_replacement(std::move(pool), static_cast<std::size_t>(count), rng)};
  std::sort(set.entries.begin(), set.entries.end(), by_position);
  return set;
}

ExemplarSet select_random_fraction(const DatasetManifest& manifest, double fraction,
                                   int min_fg_pixels, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("fraction must lie in (0, 1]");
  const auto pool = candidate_pool(manifest, min_fg_pixels);
  if (pool.empty()) {
    throw SelectionError("no slice has at least " + std::to_string(min_fg_pixels) +
                         " foreground pixels");
  }
  const auto n = std::lround(fraction * static_cast<double>(pool.size()));
  if (n == 0) {
    throw SelectionError("fraction " + std::to_string(fraction) + " of a pool of " +
                         std::to_string(pool.size()) + " rounds to zero exemplars");
  }
  ExemplarSet set = select_random_count(manifest, static_cast<int>(n), min_fg_pixels, seed);
  set.strategy = kStrategyRandomFraction;
  return set;
}

ExemplarSet select_most_organs(const DatasetManifest& manifest, int total, int per_volume_quota,
                               std::uint64_t seed) {
  if (per_volume_quota < 1) throw ConfigError("per-volume quota must be at least 1");
  if (total < 1 || total % per_volume_quota != 0) {
    throw ConfigError("total (" + std::to_string(total) +
                      ") must be a positive multiple of the per-volume quota (" +
                      std::to_string(per_volume_quota) + ")");
  }
  std::map<std::string, std::vector<SliceRecord>> by_volume;
  for (const auto& r : manifest.records) by_volume[r.volume_id];
  for (const auto& r : manifest.records) {
    if (r.has_foreground()) by_volume[r.volume_id].push_back(r);
  }
  std::vector<std::string> volumes;
  for (const auto& [id, _] : by_volume) volumes.push_back(id);
  const auto needed = static_cast<std::size_t>(total / per_volume_quota);
  if (needed > volumes.size()) {
    throw SelectionError("need " + std::to_string(needed) + " volumes but the manifest has " +
                         std::to_string(volumes.size()));
  }
  Rng rng(seed);
  if (needed < volumes.size()) {
    volumes = sample_without_replacement(std::move(volumes), needed, rng);
    std::sort(volumes.begin(), volumes.end());
  }

  ExemplarSet set{kStrategyMostOrgans, seed, manifest.root, {}};
  for (const auto& id : volumes) {
    auto slices = by_volume[id];
    if (static_cast<std::size_t>(per_volume_quota) > slices.size()) {
      throw SelectionError("volume " + id + " has " + std::to_string(slices.size()) +
                           " slices with foreground, fewer than the quota of " +
                           std::to_string(per_volume_quota));
    }
    std::sort(slices.begin(), slices.end(), [](const SliceRecord& a, const SliceRecord& b) {
      const int ca = a.distinct_foreground_classes();
      const int cb = b.distinct_foreground_classes();
      if (ca != cb) return ca > cb;
      const auto fa = a.foreground_pixels();
      const auto fb = b.foreground_pixels();
      if (fa != fb) return fa > fb;
      return std::tie(a.slice_index, a.path) < std::tie(b.slice_index, b.path);
    });
    slices.resize(static_cast<std::size_t>(per_volume_quota));
    set.entries.insert(set.entries.end(), slices.begin(), slices.end());
  }
  std::sort(set.entries.begin(), set.entries.end(), by_position);
  return set;
}

}  // namespace fewseg
