#include "fewseg/synthesis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>

#include "fewseg/errors.hpp"

namespace fewseg {

using nlohmann::json;

namespace {

constexpr int kJitterAttempts = 10;

double snap(double v) {
  const double r = std::round(v);
  return std::abs(v - r) < 1e-9 ? r : v;
}

void check_range(const Range& r, const char* name, double min_lo) {
  if (!(r.lo <= r.hi)) throw ConfigError(std::string("synthesis config: ") + name + " range is inverted");
  if (r.lo < min_lo) {
    throw ConfigError(std::string("synthesis config: ") + name + " range must not go below " +
                      std::to_string(min_lo));
  }
}

json range_json(const Range& r) { return json::array({r.lo, r.hi}); }

Range range_from(const json& j, const char* name) {
  if (!j.is_array() || j.size() != 2) {
    throw ConfigError(std::string("synthesis config: ") + name + " must be [lo, hi]");
  }
  return {j[0].get<double>(), j[1].get<double>()};
}

Image gaussian_blur(const Image& image, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[static_cast<std::size_t>(i + radius)];
  }
  for (auto& v : k) v /= sum;
  const auto h = image.rows();
  const auto w = image.cols();
  Image tmp(h, w);
  Image out(h, w);
  for (Eigen::Index r = 0; r < h; ++r) {
    for (Eigen::Index c = 0; c < w; ++c) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const auto cc = std::clamp<Eigen::Index>(c + i, 0, w - 1);
        acc += k[static_cast<std::size_t>(i + radius)] * image(r, cc);
      }
      tmp(r, c) = acc;
    }
  }
  for (Eigen::Index r = 0; r < h; ++r) {
    for (Eigen::Index c = 0; c < w; ++c) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const auto rr = std::clamp<Eigen::Index>(r + i, 0, h - 1);
        acc += k[static_cast<std::size_t>(i + radius)] * tmp(rr, c);
      }
      out(r, c) = acc;
    }
  }
  return out;
}

std::pair<double, double> centroid(const LabelMap& label) {
  double sr = 0.0, sc = 0.0;
  std::int64_t n = 0;
  for (Eigen::Index r = 0; r < label.rows(); ++r) {
    for (Eigen::Index c = 0; c < label.cols(); ++c) {
      if (label(r, c) > 0) {
        sr += static_cast<double>(r);
        sc += static_cast<double>(c);
        ++n;
      }
    }
  }
  // Half-pixel grid keeps flips exact index permutations.
  return {std::round(2.0 * sr / n) / 2.0, std::round(2.0 * sc / n) / 2.0};
}

struct Cutout {
  LabeledSlice transformed;
  int dr = 0;
  int dc = 0;
};

Cutout make_cutout(const LabeledSlice& exemplar, const LabelMap& label, const TransformSpec& spec,
                   int jitter, Rng& rng) {
  LabeledSlice part{exemplar.image, label, exemplar.meta};
  Cutout cut{apply_transform(part, spec, centroid(label)), 0, 0};
  const auto& t = cut.transformed.label;
  const auto h = t.rows();
  const auto w = t.cols();
  std::vector<Pixel> fg;
  for (Eigen::Index r = 0; r < h; ++r) {
    for (Eigen::Index c = 0; c < w; ++c) {
      if (t(r, c) > 0) fg.push_back({static_cast<int>(r), static_cast<int>(c)});
    }
  }
  for (int attempt = 0; attempt < kJitterAttempts; ++attempt) {
    const auto dr = static_cast<int>(uniform_int(rng, -jitter, jitter));
    const auto dc = static_cast<int>(uniform_int(rng, -jitter, jitter));
    for (const auto& p : fg) {
      const int r = p.row + dr;
      const int c = p.col + dc;
      if (r >= 0 && c >= 0 && r < h && c < w) {
        cut.dr = dr;
        cut.dc = dc;
        return cut;
      }
    }
  }
  throw SynthesisError("transformed foreground left the frame after " +
                       std::to_string(kJitterAttempts) + " jitter draws");
}

void paint(LabeledSlice& canvas, const Cutout& cut) {
  const auto& t = cut.transformed;
  for (Eigen::Index r = 0; r < t.label.rows(); ++r) {
    for (Eigen::Index c = 0; c < t.label.cols(); ++c) {
      if (t.label(r, c) <= 0) continue;
      const auto rr = r + cut.dr;
      const auto cc = c + cut.dc;
      if (rr < 0 || cc < 0 || rr >= canvas.rows() || cc >= canvas.cols()) continue;
      canvas.image(rr, cc) = t.image(r, c);
      canvas.label(rr, cc) = t.label(r, c);
    }
  }
}

void check_pair(const LabeledSlice& exemplar, const LabeledSlice& background) {
  if (exemplar.rows() != background.rows() || exemplar.cols() != background.cols()) {
    throw InvalidInputError("exemplar and background sizes differ");
  }
  if (!(exemplar.label.array() > 0).any()) throw InvalidInputError("exemplar has no foreground");
  if ((background.label.array() != 0).any()) {
    throw InvalidInputError("background slice contains labeled foreground");
  }
}

std::vector<int> present_classes(const LabelMap& label) {
  std::set<int> s;
  for (Eigen::Index i = 0; i < label.size(); ++i) {
    if (label.data()[i] > 0) s.insert(label.data()[i]);
  }
  return {s.begin(), s.end()};
}

}  // namespace

bool TransformSpec::is_identity() const {
  return blur_sigma == 0.0 && intensity_gain == 1.0 && intensity_bias == 0.0 &&
         scale_factor == 1.0 && !flip_h && !flip_v && rotation_deg == 0.0;
}

void SynthesisConfig::validate() const {
  if (num_samples < 1) throw ConfigError("synthesis config: num_samples must be positive");
  if (position_jitter < 0) throw ConfigError("synthesis config: position_jitter must be >= 0");
  check_range(blur_sigma, "blur_sigma", 0.0);
  check_range(intensity_gain, "intensity_gain", 0.0);
  check_range(intensity_bias, "intensity_bias", -1.0);
  check_range(scale_factor, "scale_factor", 0.0);
  check_range(rotation_deg, "rotation_deg", -180.0);
  if (intensity_gain.lo <= 0.0) throw ConfigError("synthesis config: intensity_gain must be > 0");
  if (scale_factor.lo <= 0.0) throw ConfigError("synthesis config: scale_factor must be > 0");
  if (rotation_deg.hi >= 180.0) throw ConfigError("synthesis config: rotation_deg must be < 180");
  for (double p : {flip_h_prob, flip_v_prob}) {
    if (p < 0.0 || p > 1.0) throw ConfigError("synthesis config: flip probabilities must lie in [0, 1]");
  }
}

SynthesisConfig SynthesisConfig::identity() {
  SynthesisConfig c;
  c.blur_sigma = {0.0, 0.0};
  c.intensity_gain = {1.0, 1.0};
  c.intensity_bias = {0.0, 0.0};
  c.scale_factor = {1.0, 1.0};
  c.rotation_deg = {0.0, 0.0};
  c.flip_h_prob = 0.0;
  c.flip_v_prob = 0.0;
  c.position_jitter = 0;
  return c;
}

std::string to_string(SynthesisMode m) {
  return m == SynthesisMode::kSingleClass ? "single_class" : "category_wise";
}

SynthesisMode parse_synthesis_mode(const std::string& s) {
  if (s == "single_class") return SynthesisMode::kSingleClass;
  if (s == "category_wise") return SynthesisMode::kCategoryWise;
  throw ConfigError("unknown synthesis mode '" + s + "' (expected single_class or category_wise)");
}

void to_json(json& j, const SynthesisConfig& c) {
  j = json{{"num_samples", c.num_samples},
           {"blur_sigma", range_json(c.blur_sigma)},
           {"intensity_gain", range_json(c.intensity_gain)},
           {"intensity_bias", range_json(c.intensity_bias)},
           {"scale_factor", range_json(c.scale_factor)},
           {"rotation_deg", range_json(c.rotation_deg)},
           {"flip_h_prob", c.flip_h_prob},
           {"flip_v_prob", c.flip_v_prob},
           {"position_jitter", c.position_jitter},
           {"mode", to_string(c.mode)},
           {"independent_background", c.independent_background},
           {"overlap", c.overlap == OverlapOrder::kLowerOnTop ? "lower_on_top" : "higher_on_top"},
           {"seed", c.seed}};
}

void from_json(const json& j, SynthesisConfig& c) {
  if (!j.is_object()) throw ConfigError("synthesis config must be a JSON object");
  static const std::set<std::string> known = {
      "num_samples", "blur_sigma",  "intensity_gain",  "intensity_bias", "scale_factor",
      "rotation_deg", "flip_h_prob", "flip_v_prob",    "position_jitter", "mode",
      "independent_background", "overlap", "seed"};
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw ConfigError("synthesis config: unknown field '" + k + "'");
  }
  try {
    if (j.contains("num_samples")) c.num_samples = j.at("num_samples").get<int>();
    if (j.contains("blur_sigma")) c.blur_sigma = range_from(j.at("blur_sigma"), "blur_sigma");
    if (j.contains("intensity_gain")) c.intensity_gain = range_from(j.at("intensity_gain"), "intensity_gain");
    if (j.contains("intensity_bias")) c.intensity_bias = range_from(j.at("intensity_bias"), "intensity_bias");
    if (j.contains("scale_factor")) c.scale_factor = range_from(j.at("scale_factor"), "scale_factor");
    if (j.contains("rotation_deg")) c.rotation_deg = range_from(j.at("rotation_deg"), "rotation_deg");
    if (j.contains("flip_h_prob")) c.flip_h_prob = j.at("flip_h_prob").get<double>();
    if (j.contains("flip_v_prob")) c.flip_v_prob = j.at("flip_v_prob").get<double>();
    if (j.contains("position_jitter")) c.position_jitter = j.at("position_jitter").get<int>();
    if (j.contains("mode")) c.mode = parse_synthesis_mode(j.at("mode").get<std::string>());
    if (j.contains("independent_background")) {
      c.independent_background = j.at("independent_background").get<bool>();
    }
    if (j.contains("overlap")) {
      const auto o = j.at("overlap").get<std::string>();
      if (o == "lower_on_top") {
        c.overlap = OverlapOrder::kLowerOnTop;
      } else if (o == "higher_on_top") {
        c.overlap = OverlapOrder::kHigherOnTop;
      } else {
        throw ConfigError("synthesis config: overlap must be lower_on_top or higher_on_top");
      }
    }
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("synthesis config: ") + e.what());
  }
}

TransformSpec sample_transform(const SynthesisConfig& config, Rng& rng) {
  TransformSpec s;
  s.blur_sigma = uniform(rng, config.blur_sigma.lo, config.blur_sigma.hi);
  s.intensity_gain = uniform(rng, config.intensity_gain.lo, config.intensity_gain.hi);
  s.intensity_bias = uniform(rng, config.intensity_bias.lo, config.intensity_bias.hi);
  s.scale_factor = uniform(rng, config.scale_factor.lo, config.scale_factor.hi);
  s.flip_h = bernoulli(rng, config.flip_h_prob);
  s.flip_v = bernoulli(rng, config.flip_v_prob);
  s.rotation_deg = uniform(rng, config.rotation_deg.lo, config.rotation_deg.hi);
  return s;
}

LabeledSlice apply_transform(const LabeledSlice& slice, const TransformSpec& spec,
                             std::optional<std::pair<double, double>> pivot) {
  if (spec.is_identity()) return slice;
  const auto h = slice.rows();
  const auto w = slice.cols();
  const auto [pr, pc] = pivot.value_or(std::pair{(h - 1) / 2.0, (w - 1) / 2.0});
  LabeledSlice out = slice;

  const double theta = spec.rotation_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(theta);
  const double sn = std::sin(theta);
  const double inv_scale = 1.0 / spec.scale_factor;
  const double fx = spec.flip_h ? -1.0 : 1.0;
  const double fy = spec.flip_v ? -1.0 : 1.0;
  auto pixel = [&](Eigen::Index r, Eigen::Index c) -> double {
    return (r >= 0 && c >= 0 && r < h && c < w) ? slice.image(r, c) : 0.0;
  };
  for (Eigen::Index r = 0; r < h; ++r) {
    for (Eigen::Index c = 0; c < w; ++c) {
      // Inverse map: undo scale and rotation, then the flips.
      const double y = static_cast<double>(r) - pr;
      const double x = static_cast<double>(c) - pc;
      const double sx = fx * (x * cs - y * sn) * inv_scale;
      const double sy = fy * (x * sn + y * cs) * inv_scale;
      const double src_r = snap(pr + sy);
      const double src_c = snap(pc + sx);

      const auto r0 = static_cast<Eigen::Index>(std::floor(src_r));
      const auto c0 = static_cast<Eigen::Index>(std::floor(src_c));
      const double ar = src_r - static_cast<double>(r0);
      const double ac = src_c - static_cast<double>(c0);
      double v = (1 - ar) * (1 - ac) * pixel(r0, c0);
      if (ac > 0) v += (1 - ar) * ac * pixel(r0, c0 + 1);
      if (ar > 0) v += ar * (1 - ac) * pixel(r0 + 1, c0);
      if (ar > 0 && ac > 0) v += ar * ac * pixel(r0 + 1, c0 + 1);
      out.image(r, c) = v;

      const auto nr = static_cast<Eigen::Index>(std::lround(src_r));
      const auto nc = static_cast<Eigen::Index>(std::lround(src_c));
      out.label(r, c) = (nr >= 0 && nc >= 0 && nr < h && nc < w) ? slice.label(nr, nc) : 0;
    }
  }
  if (spec.blur_sigma > 0.0) out.image = gaussian_blur(out.image, spec.blur_sigma);
  out.image = (out.image.array() * spec.intensity_gain + spec.intensity_bias).cwiseMax(0.0).cwiseMin(1.0);
  return out;
}

LabeledSlice synthesize_single(const LabeledSlice& exemplar, const LabeledSlice& background,
                               const TransformSpec& spec_fg, const TransformSpec& spec_bg,
                               int position_jitter, Rng& rng) {
  check_pair(exemplar, background);
  const Cutout cut = make_cutout(exemplar, exemplar.label, spec_fg, position_jitter, rng);
  LabeledSlice out = apply_transform(background, spec_bg);
  out.label.setZero();
  paint(out, cut);
  return out;
}

LabeledSlice synthesize_multi(const LabeledSlice& exemplar, const LabeledSlice& background,
                              const std::vector<TransformSpec>& specs,
                              const TransformSpec& spec_bg, int position_jitter, Rng& rng,
                              OverlapOrder overlap) {
  check_pair(exemplar, background);
  const auto classes = present_classes(exemplar.label);
  if (specs.size() != classes.size()) {
    throw InvalidInputError("expected " + std::to_string(classes.size()) +
                            " transform specs, one per present class, got " +
                            std::to_string(specs.size()));
  }
  std::vector<Cutout> cuts;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const LabelMap only = (exemplar.label.array() == classes[i]).select(exemplar.label, 0);
    cuts.push_back(make_cutout(exemplar, only, specs[i], position_jitter, rng));
  }
  LabeledSlice out = apply_transform(background, spec_bg);
  out.label.setZero();
  if (overlap == OverlapOrder::kLowerOnTop) {
    for (auto it = cuts.rbegin(); it != cuts.rend(); ++it) paint(out, *it);
  } else {
    for (const auto& c : cuts) paint(out, c);
  }
  return out;
}

LabeledSlice synthesize_sample(const std::vector<LabeledSlice>& exemplars,
                               const std::vector<LabeledSlice>& backgrounds,
                               const SynthesisConfig& config, int index) {
  if (exemplars.empty()) throw ConfigError("synthesis needs at least one exemplar");
  if (backgrounds.empty()) throw ConfigError("synthesis needs at least one background slice");
  Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(index)));
  const auto& ex = exemplars[static_cast<std::size_t>(
      uniform_int(rng, 0, static_cast<std::int64_t>(exemplars.size()) - 1))];
  const auto& bg = backgrounds[static_cast<std::size_t>(
      uniform_int(rng, 0, static_cast<std::int64_t>(backgrounds.size()) - 1))];
  LabeledSlice out;
  if (config.mode == SynthesisMode::kSingleClass) {
    const TransformSpec fg = sample_transform(config, rng);
    const TransformSpec b = config.independent_background ? sample_transform(config, rng) : fg;
    out = synthesize_single(ex, bg, fg, b, config.position_jitter, rng);
  } else {
    std::vector<TransformSpec> specs;
    for (std::size_t k = 0; k < present_classes(ex.label).size(); ++k) {
      specs.push_back(sample_transform(config, rng));
    }
    const TransformSpec b =
        config.independent_background ? sample_transform(config, rng) : specs.front();
    out = synthesize_multi(ex, bg, specs, b, config.position_jitter, rng, config.overlap);
  }
  out.meta.volume_id = "synth";
  out.meta.slice_index = index;
  out.meta.spacing = ex.meta.spacing;
  return out;
}

std::vector<LabeledSlice> synthesize_samples(const std::vector<LabeledSlice>& exemplars,
                                             const std::vector<LabeledSlice>& backgrounds,
                                             const SynthesisConfig& config) {
  config.validate();
  std::vector<LabeledSlice> out;
  out.reserve(static_cast<std::size_t>(config.num_samples));
  for (int i = 0; i < config.num_samples; ++i) {
    out.push_back(synthesize_sample(exemplars, backgrounds, config, i));
  }
  return out;
}

DatasetManifest build_dataset(const std::vector<LabeledSlice>& exemplars,
                              const std::vector<LabeledSlice>& backgrounds,
                              const SynthesisConfig& config, int class_count,
                              const std::filesystem::path& out_dir) {
  config.validate();
  if (exemplars.empty()) throw ConfigError("synthesis needs at least one exemplar");
  if (backgrounds.empty()) throw ConfigError("synthesis needs at least one background slice");
  std::filesystem::create_directories(out_dir);
  DatasetManifest manifest;
  manifest.class_count = class_count;
  manifest.normalization = kRecipeNone;
  manifest.split = "synthesized";
  manifest.root = out_dir;
  for (int i = 0; i < config.num_samples; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "synth_%06d.slc", i);
    append_slice(manifest, synthesize_sample(exemplars, backgrounds, config, i), name);
  }
  save_manifest(manifest, out_dir / "manifest.json");
  std::ofstream cfg(out_dir / "synthesis_config.json", std::ios::trunc);
  cfg << json(config).dump(2) << '\n';
  return manifest;
}

DatasetManifest build_dataset(const ExemplarSet& exemplars,
                              const std::vector<LabeledSlice>& backgrounds,
                              const SynthesisConfig& config, int class_count,
                              const std::filesystem::path& out_dir) {
  return build_dataset(load_exemplar_slices(exemplars), backgrounds, config, class_count, out_dir);
}

std::vector<LabeledSlice> collect_backgrounds(const DatasetManifest& manifest) {
  std::vector<LabeledSlice> out;
  for (const auto& r : manifest.records) {
    LabeledSlice s = load_slice(manifest, r);
    if (!(s.label.array() != 0).any()) out.push_back(std::move(s));
  }
  if (out.empty()) throw SelectionError("manifest has no slice without foreground");
  return out;
}

}  // namespace fewseg
