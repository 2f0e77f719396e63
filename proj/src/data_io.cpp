#include "fewseg/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "fewseg/array_io.hpp"
#include "fewseg/errors.hpp"
#include "fewseg/rng.hpp"

namespace fewseg {

using nlohmann::json;

namespace {

std::pair<double, double> volume_range(const Volume& volume) {
  if (volume.empty()) throw InvalidInputError("empty volume");
  double lo = INFINITY;
  double hi = -INFINITY;
  for (const auto& s : volume) {
    if (s.size() == 0) throw InvalidInputError("empty slice in volume");
    lo = std::min(lo, s.minCoeff());
    hi = std::max(hi, s.maxCoeff());
  }
  return {lo, hi};
}

Volume rescale(const Volume& volume, double lo, double hi) {
  Volume out;
  out.reserve(volume.size());
  for (const auto& s : volume) {
    if (hi == lo) {
      out.push_back(Image::Zero(s.rows(), s.cols()));
    } else {
      out.push_back(((s.array() - lo) / (hi - lo)).matrix());
    }
  }
  return out;
}

Volume clamp_volume(const Volume& volume, double lo, double hi) {
  if (!(lo < hi)) throw ConfigError("clip range requires lo < hi");
  Volume out;
  out.reserve(volume.size());
  for (const auto& s : volume) out.push_back(s.cwiseMax(lo).cwiseMin(hi));
  return out;
}

}  // namespace

Image normalize_minmax(const Image& image) {
  return normalize_minmax(Volume{image}).front();
}

Volume normalize_minmax(const Volume& volume) {
  const auto [lo, hi] = volume_range(volume);
  return rescale(volume, lo, hi);
}

Image normalize_clip_minmax(const Image& image, double lo, double hi) {
  return normalize_clip_minmax(Volume{image}, lo, hi).front();
}

Volume normalize_clip_minmax(const Volume& volume, double lo, double hi) {
  if (!(lo < hi)) throw ConfigError("clip range requires lo < hi");
  return normalize_minmax(clamp_volume(volume, lo, hi));
}

std::string clip_minmax_recipe(double lo, double hi) {
  std::ostringstream os;
  os << "clip_minmax:" << lo << ':' << hi;
  return os.str();
}

Volume apply_recipe(const Volume& volume, const std::string& recipe) {
  if (recipe == kRecipeMinMax) return normalize_minmax(volume);
  if (recipe == kRecipeNone) return volume;
  if (recipe.rfind("clip_minmax:", 0) == 0) {
    const auto rest = recipe.substr(12);
    const auto colon = rest.find(':');
    if (colon == std::string::npos) throw ConfigError("malformed recipe: " + recipe);
    try {
      return normalize_clip_minmax(volume, std::stod(rest.substr(0, colon)),
                                   std::stod(rest.substr(colon + 1)));
    } catch (const std::logic_error&) {
      throw ConfigError("malformed recipe: " + recipe);
    }
  }
  throw ConfigError("unknown normalization recipe: " + recipe);
}

// ---------------------------------------------------------------------------

std::int64_t SliceRecord::foreground_pixels() const {
  std::int64_t total = 0;
  for (std::size_t k = 1; k < class_pixel_counts.size(); ++k) total += class_pixel_counts[k];
  return total;
}

int SliceRecord::distinct_foreground_classes() const {
  int n = 0;
  for (std::size_t k = 1; k < class_pixel_counts.size(); ++k) n += class_pixel_counts[k] > 0;
  return n;
}

std::vector<std::string> DatasetManifest::volume_ids() const {
  std::set<std::string> ids;
  for (const auto& r : records) ids.insert(r.volume_id);
  return {ids.begin(), ids.end()};
}

namespace {

json record_to_json(const SliceRecord& r) {
  return json{{"path", r.path},
              {"volume_id", r.volume_id},
              {"slice_index", r.slice_index},
              {"class_pixel_counts", r.class_pixel_counts},
              {"spacing", {r.spacing.row_mm, r.spacing.col_mm}}};
}

SliceRecord record_from_json(const json& j, int class_count) {
  SliceRecord r;
  r.path = j.at("path").get<std::string>();
  r.volume_id = j.at("volume_id").get<std::string>();
  r.slice_index = j.at("slice_index").get<int>();
  r.class_pixel_counts = j.at("class_pixel_counts").get<std::vector<std::int64_t>>();
  if (r.class_pixel_counts.size() != static_cast<std::size_t>(class_count) + 1) {
    throw ParseError("class_pixel_counts must have class_count + 1 entries");
  }
  if (j.contains("spacing")) {
    const auto sp = j.at("spacing").get<std::vector<double>>();
    if (sp.size() != 2 || !(sp[0] > 0.0) || !(sp[1] > 0.0)) {
      throw ParseError("spacing must be two positive numbers");
    }
    r.spacing = {sp[0], sp[1]};
  }
  return r;
}

}  // namespace

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  DatasetManifest m;
  try {
    m.version = doc.at("version").get<int>();
    m.class_count = doc.at("class_count").get<int>();
    m.normalization = doc.at("normalization").get<std::string>();
    m.split = doc.value("split", std::string("all"));
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": header: " + e.what());
  }
  if (m.version != 1) throw ParseError(path.string() + ": unsupported manifest version");
  if (m.class_count < 1) throw ParseError(path.string() + ": class_count must be >= 1");
  const auto& recs = doc.at("records");
  if (!recs.is_array()) throw ParseError(path.string() + ": records must be an array");
  for (std::size_t i = 0; i < recs.size(); ++i) {
    try {
      m.records.push_back(record_from_json(recs[i], m.class_count));
    } catch (const std::exception& e) {
      throw ParseError(path.string() + ": record " + std::to_string(i) + ": " + e.what());
    }
  }
  m.root = path.parent_path();
  return m;
}

void save_manifest(DatasetManifest& manifest, const std::filesystem::path& path) {
  json recs = json::array();
  for (const auto& r : manifest.records) recs.push_back(record_to_json(r));
  const json doc{{"version", manifest.version},
                 {"class_count", manifest.class_count},
                 {"normalization", manifest.normalization},
                 {"split", manifest.split},
                 {"records", std::move(recs)}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest: " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
  manifest.root = path.parent_path();
}

LabeledSlice load_slice(const DatasetManifest& manifest, const SliceRecord& record) {
  auto [image, label] = read_slice_file(manifest.root / record.path);
  LabeledSlice s{std::move(image), std::move(label),
                 SliceMeta{record.volume_id, record.slice_index, record.spacing}};
  return s;
}

std::vector<LabeledSlice> load_all_slices(const DatasetManifest& manifest) {
  std::vector<LabeledSlice> out;
  out.reserve(manifest.records.size());
  for (const auto& r : manifest.records) out.push_back(load_slice(manifest, r));
  return out;
}

void validate_manifest(const DatasetManifest& manifest) {
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    const std::string where = "record " + std::to_string(i) + " (" + r.path + ")";
    const auto file = manifest.root / r.path;
    if (!std::filesystem::exists(file)) throw ValidationError(where + ": file missing");
    LabeledSlice s;
    try {
      s = load_slice(manifest, r);
      check_slice(s, manifest.class_count);
    } catch (const Error& e) {
      throw ValidationError(where + ": " + e.what());
    }
    if (class_pixel_counts(s.label, manifest.class_count) != r.class_pixel_counts) {
      throw ValidationError(where + ": class pixel counts disagree with label file");
    }
  }
}

void append_slice(DatasetManifest& manifest, const LabeledSlice& slice,
                  const std::string& relative_path) {
  check_slice(slice, manifest.class_count);
  write_slice_file(manifest.root / relative_path, slice.image, slice.label);
  manifest.records.push_back(SliceRecord{relative_path, slice.meta.volume_id,
                                         slice.meta.slice_index,
                                         class_pixel_counts(slice.label, manifest.class_count),
                                         slice.meta.spacing});
}

std::pair<DatasetManifest, DatasetManifest> split_dataset(const DatasetManifest& manifest,
                                                          double train_fraction,
                                                          std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw InvalidInputError("train_fraction must lie in (0, 1)");
  }
  auto volumes = manifest.volume_ids();
  if (volumes.size() < 2) throw InvalidInputError("split requires at least 2 volumes");
  Rng rng(seed);
  for (std::size_t i = volumes.size() - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(i)));
    std::swap(volumes[i], volumes[j]);
  }
  const auto n = static_cast<long>(volumes.size());
  const long n_train = std::clamp(std::lround(train_fraction * static_cast<double>(n)), 1L, n - 1);
  const std::set<std::string> train_ids(volumes.begin(), volumes.begin() + n_train);

  DatasetManifest train = manifest;
  DatasetManifest test = manifest;
  train.records.clear();
  test.records.clear();
  train.split = "train";
  test.split = "test";
  for (const auto& r : manifest.records) {
    (train_ids.contains(r.volume_id) ? train : test).records.push_back(r);
  }
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------

namespace {

// Source coordinate for output index i under half-pixel-centre alignment.
void source_index(int i, int in_size, int out_size, int& i0, int& i1, double& frac) {
  double x = (i + 0.5) * static_cast<double>(in_size) / out_size - 0.5;
  x = std::max(x, 0.0);
  i0 = std::min(static_cast<int>(std::floor(x)), in_size - 1);
  i1 = std::min(i0 + 1, in_size - 1);
  frac = x - i0;
}

template <typename M>
M nearest(const M& in, int rows, int cols) {
  M out(rows, cols);
  for (int r = 0; r < rows; ++r) {
    const int sr = std::min(static_cast<int>((r + 0.5) * in.rows() / rows), static_cast<int>(in.rows()) - 1);
    for (int c = 0; c < cols; ++c) {
      const int sc = std::min(static_cast<int>((c + 0.5) * in.cols() / cols), static_cast<int>(in.cols()) - 1);
      out(r, c) = in(sr, sc);
    }
  }
  return out;
}

}  // namespace

Image resize_bilinear(const Image& image, int rows, int cols) {
  if (image.rows() == rows && image.cols() == cols) return image;
  Image out(rows, cols);
  for (int r = 0; r < rows; ++r) {
    int r0, r1;
    double fr;
    source_index(r, static_cast<int>(image.rows()), rows, r0, r1, fr);
    for (int c = 0; c < cols; ++c) {
      int c0, c1;
      double fc;
      source_index(c, static_cast<int>(image.cols()), cols, c0, c1, fc);
      const double top = image(r0, c0) * (1 - fc) + image(r0, c1) * fc;
      const double bot = image(r1, c0) * (1 - fc) + image(r1, c1) * fc;
      out(r, c) = top * (1 - fr) + bot * fr;
    }
  }
  return out;
}

LabelMap resize_nearest(const LabelMap& label, int rows, int cols) {
  if (label.rows() == rows && label.cols() == cols) return label;
  return nearest(label, rows, cols);
}

Mask resize_nearest(const Mask& mask, int rows, int cols) {
  if (mask.rows() == rows && mask.cols() == cols) return mask;
  return nearest(mask, rows, cols);
}

}  // namespace fewseg
