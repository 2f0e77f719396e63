#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "fewseg/data_io.hpp"

namespace fewseg {

inline constexpr const char* kStrategyRandomFraction = "random_fraction";
inline constexpr const char* kStrategyRandomCount = "random_count";
inline constexpr const char* kStrategyMostOrgans = "most_organs";

struct ExemplarSet {
  std::string strategy;
  std::uint64_t seed = 0;
  std::filesystem::path root;        // directory the entry paths resolve against
  std::vector<SliceRecord> entries;  // sorted by (volume_id, slice_index)
  bool operator==(const ExemplarSet&) const = default;
};

void to_json(nlohmann::json& j, const ExemplarSet& s);
void from_json(const nlohmann::json& j, ExemplarSet& s);
void save_exemplars(const ExemplarSet& set, const std::filesystem::path& path);
ExemplarSet load_exemplars(const std::filesystem::path& path);
std::vector<LabeledSlice> load_exemplar_slices(const ExemplarSet& set);

// Slices with at least min_fg_pixels foreground pixels.
std::vector<SliceRecord> candidate_pool(const DatasetManifest& manifest, int min_fg_pixels);

// round(fraction * |pool|) slices drawn uniformly without replacement.
ExemplarSet select_random_fraction(const DatasetManifest& manifest, double fraction,
                                   int min_fg_pixels, std::uint64_t seed);
ExemplarSet select_random_count(const DatasetManifest& manifest, int count, int min_fg_pixels,
                                std::uint64_t seed);

// total / per_volume_quota volumes, each contributing its quota of slices
// with the most distinct classes (ties: more foreground, then lower index).
ExemplarSet select_most_organs(const DatasetManifest& manifest, int total, int per_volume_quota,
                               std::uint64_t seed);

}  // namespace fewseg
