#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "fewseg/data_io.hpp"
#include "fewseg/errors.hpp"
#include "fewseg/rng.hpp"

namespace fewseg {
namespace {

constexpr double kPi = std::numbers::pi;

struct Layout {
  double center;     // body centre (row and col)
  double body_radius;
  double half_side;  // half side of the square organ region inscribed in the body
  int grid;          // organ cells per side
  double cell;       // cell side length
};

Layout layout_for(const PhantomConfig& cfg) {
  Layout l{};
  l.center = (cfg.image_size - 1) / 2.0;
  l.body_radius = 0.42 * cfg.image_size;
  l.half_side = l.body_radius / std::numbers::sqrt2;
  l.grid = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(cfg.class_count))));
  l.cell = 2.0 * l.half_side / l.grid;
  return l;
}

// Smooth low-frequency texture shared by all slices of a volume.
struct Texture {
  double fr[3], fc[3], ph[3], amp[3];
  double at(double r, double c, double z) const {
    double v = 0.0;
    for (int i = 0; i < 3; ++i) v += amp[i] * std::sin(fr[i] * r + fc[i] * c + ph[i] + 0.3 * z);
    return v;
  }
};

Texture make_texture(Rng& rng, double amplitude) {
  Texture t{};
  for (int i = 0; i < 3; ++i) {
    t.fr[i] = uniform(rng, 0.05, 0.35);
    t.fc[i] = uniform(rng, 0.05, 0.35);
    t.ph[i] = uniform(rng, 0.0, 2 * kPi);
    t.amp[i] = amplitude * uniform(rng, 0.5, 1.0);
  }
  return t;
}

struct OrganPlan {
  int class_id;
  ShapeKind kind;
  double row, col;      // anchor
  double aspect;        // radius_col / radius_row
  double angle;
  int first, last;      // slice range (inclusive)
  std::vector<double> vertex_scale;
};

double class_intensity(const PhantomConfig& cfg, int k) {
  if (cfg.style == "ct") return 80.0 + 22.0 * (k - 1);
  return 0.75 + 0.02 * (k - 1);
}

}  // namespace

bool PhantomShape::contains(double row, double col) const {
  if (kind == ShapeKind::kEllipse) {
    const double dr = row - center_row;
    const double dc = col - center_col;
    const double ca = std::cos(angle_rad);
    const double sa = std::sin(angle_rad);
    const double u = (ca * dr + sa * dc) / radius_row;
    const double v = (-sa * dr + ca * dc) / radius_col;
    return u * u + v * v <= 1.0;
  }
  // Even-odd ray casting.
  bool inside = false;
  const std::size_t n = vertices.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const auto [ri, ci] = vertices[i];
    const auto [rj, cj] = vertices[j];
    if ((ri > row) != (rj > row)) {
      const double c_cross = ci + (row - ri) * (cj - ci) / (rj - ri);
      if (col < c_cross) inside = !inside;
    }
  }
  return inside;
}

void validate_phantom_config(const PhantomConfig& cfg) {
  if (cfg.image_size < 32) throw ConfigError("phantom image_size must be >= 32");
  if (cfg.class_count < 1 || cfg.class_count > 8) {
    throw ConfigError("phantom class_count must lie in [1, 8]");
  }
  if (cfg.volumes < 1 || cfg.slices_per_volume < 1) {
    throw ConfigError("phantom volume and slice counts must be >= 1");
  }
  if (!(cfg.foreground_extent > 0.0 && cfg.foreground_extent <= 1.0)) {
    throw ConfigError("foreground_extent must lie in (0, 1]");
  }
  if (!(cfg.min_radius >= 1.0 && cfg.min_radius <= cfg.max_radius)) {
    throw ConfigError("phantom radii must satisfy 1 <= min_radius <= max_radius");
  }
  if (cfg.noise_std < 0.0) throw ConfigError("noise_std must be >= 0");
  if (cfg.style != "mri" && cfg.style != "ct") throw ConfigError("style must be mri or ct");
  const Layout l = layout_for(cfg);
  if (2.0 * cfg.max_radius + 2.0 > l.cell) {
    throw ConfigError("infeasible phantom layout: shapes of radius " +
                      std::to_string(cfg.max_radius) + " do not fit " +
                      std::to_string(cfg.class_count) + " classes in a " +
                      std::to_string(cfg.image_size) + " px image");
  }
}

std::vector<PhantomSlice> render_phantom_volume(const PhantomConfig& cfg, int volume_index,
                                                std::uint64_t seed) {
  validate_phantom_config(cfg);
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(volume_index)));
  const Layout l = layout_for(cfg);
  const bool ct = cfg.style == "ct";
  const int n = cfg.slices_per_volume;

  const double body_rr = l.body_radius * uniform(rng, 0.95, 1.0);
  const double body_rc = l.body_radius * uniform(rng, 0.85, 1.0);
  const Texture texture = make_texture(rng, ct ? 20.0 : 0.06);
  const Texture organ_texture = make_texture(rng, ct ? 10.0 : 0.04);

  const int span = std::max(1, static_cast<int>(std::lround(cfg.foreground_extent * n)));
  const int fg_first = (n - span) / 2;
  const int fg_last = fg_first + span - 1;

  std::vector<OrganPlan> organs;
  const double slack = l.cell / 2.0 - cfg.max_radius - 1.0;
  for (int k = 1; k <= cfg.class_count; ++k) {
    OrganPlan p{};
    p.class_id = k;
    const int cell_r = (k - 1) / l.grid;
    const int cell_c = (k - 1) % l.grid;
    const double anchor_r = l.center - l.half_side + (cell_r + 0.5) * l.cell;
    const double anchor_c = l.center - l.half_side + (cell_c + 0.5) * l.cell;
    p.row = anchor_r + uniform(rng, -slack, slack);
    p.col = anchor_c + uniform(rng, -slack, slack);
    p.kind = bernoulli(rng, 0.5) ? ShapeKind::kPolygon : ShapeKind::kEllipse;
    p.aspect = uniform(rng, 0.7, 1.0);
    p.angle = uniform(rng, 0.0, kPi);
    if (cfg.class_count == 1) {
      p.first = fg_first;
      p.last = fg_last;
    } else {
      const int min_len = std::max(1, span / 2);
      const int len = static_cast<int>(uniform_int(rng, min_len, span));
      p.first = static_cast<int>(uniform_int(rng, fg_first, fg_last - len + 1));
      p.last = p.first + len - 1;
    }
    for (int v = 0; v < 7; ++v) p.vertex_scale.push_back(uniform(rng, 0.7, 1.0));
    organs.push_back(std::move(p));
  }

  std::vector<PhantomSlice> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int z = 0; z < n; ++z) {
    PhantomSlice ps;
    for (const auto& p : organs) {
      if (z < p.first || z > p.last) continue;
      const double t = (z - p.first + 1.0) / (p.last - p.first + 2.0);
      const double radius = cfg.min_radius + (cfg.max_radius - cfg.min_radius) * std::sin(kPi * t);
      PhantomShape s;
      s.class_id = p.class_id;
      s.kind = p.kind;
      s.center_row = p.row;
      s.center_col = p.col;
      s.radius_row = radius;
      s.radius_col = std::max(1.0, radius * p.aspect);
      s.angle_rad = p.angle;
      if (s.kind == ShapeKind::kPolygon) {
        for (int v = 0; v < 7; ++v) {
          const double a = p.angle + 2 * kPi * v / 7.0;
          const double rr = radius * p.vertex_scale[static_cast<std::size_t>(v)];
          s.vertices.emplace_back(p.row + rr * std::sin(a), p.col + rr * std::cos(a));
        }
      }
      ps.shapes.push_back(std::move(s));
    }

    const int size = cfg.image_size;
    Image image(size, size);
    LabelMap label = LabelMap::Zero(size, size);
    const double noise_scale = ct ? cfg.noise_std * 375.0 : cfg.noise_std;
    for (int r = 0; r < size; ++r) {
      for (int c = 0; c < size; ++c) {
        const double u = (r - l.center) / body_rr;
        const double v = (c - l.center) / body_rc;
        const bool in_body = u * u + v * v <= 1.0;
        double value = ct ? -1000.0 : 0.0;
        if (in_body) value = (ct ? 0.0 : 0.35) + texture.at(r, c, z);
        for (const auto& s : ps.shapes) {
          if (s.contains(r, c)) {
            label(r, c) = s.class_id;
            value = class_intensity(cfg, s.class_id) + organ_texture.at(r, c, z);
            break;
          }
        }
        if (in_body || label(r, c) > 0) value += noise_scale * standard_normal(rng);
        image(r, c) = value;
      }
    }
    char vol[32];
    std::snprintf(vol, sizeof vol, "vol%03d", volume_index);
    ps.slice = LabeledSlice{std::move(image), std::move(label), SliceMeta{vol, z, {}}};
    out.push_back(std::move(ps));
  }
  return out;
}

DatasetManifest generate_phantom_dataset(const PhantomConfig& cfg, std::uint64_t seed,
                                         const std::filesystem::path& out_dir) {
  validate_phantom_config(cfg);
  DatasetManifest m;
  m.class_count = cfg.class_count;
  m.normalization = cfg.style == "ct" ? clip_minmax_recipe(-125, 275) : kRecipeMinMax;
  m.root = out_dir;
  std::filesystem::create_directories(out_dir);
  for (int v = 0; v < cfg.volumes; ++v) {
    auto slices = render_phantom_volume(cfg, v, seed);
    Volume raw;
    for (const auto& s : slices) raw.push_back(s.slice.image);
    const Volume norm = apply_recipe(raw, m.normalization);
    for (std::size_t z = 0; z < slices.size(); ++z) {
      LabeledSlice s = slices[z].slice;
      s.image = norm[z];
      char rel[64];
      std::snprintf(rel, sizeof rel, "%s/slice%03zu.slc", s.meta.volume_id.c_str(), z);
      append_slice(m, s, rel);
    }
  }
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

}  // namespace fewseg
