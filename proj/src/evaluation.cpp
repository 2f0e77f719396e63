#include "fewseg/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include "fewseg/errors.hpp"

namespace fewseg {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void require_same_shape(const Mask& a, const Mask& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InvalidInputError("mask shapes differ");
  }
}

// One-dimensional lower envelope of parabolas w*(q-p)^2 + f[p].
void envelope_1d(const std::vector<double>& f, double w, std::vector<double>& d,
                 std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  d.assign(static_cast<std::size_t>(n), kInf);
  v.assign(static_cast<std::size_t>(n), 0);
  z.assign(static_cast<std::size_t>(n) + 1, 0.0);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (!std::isfinite(f[static_cast<std::size_t>(q)])) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    double s = 0.0;
    while (true) {
      const int p = v[static_cast<std::size_t>(k)];
      s = ((f[static_cast<std::size_t>(q)] + w * q * q) - (f[static_cast<std::size_t>(p)] + w * p * p)) /
          (2.0 * w * (q - p));
      if (s <= z[static_cast<std::size_t>(k)] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    if (s <= z[static_cast<std::size_t>(k)]) {
      // Only reachable with k == 0: the new parabola dominates everywhere.
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = s;
    z[static_cast<std::size_t>(k) + 1] = kInf;
  }
  if (k < 0) return;
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<std::size_t>(j) + 1] < q) ++j;
    const int p = v[static_cast<std::size_t>(j)];
    const double dq = q - p;
    d[static_cast<std::size_t>(q)] = w * dq * dq + f[static_cast<std::size_t>(p)];
  }
}

std::vector<Pixel> pixels_of(const Mask& m) {
  std::vector<Pixel> out;
  for (int r = 0; r < m.rows(); ++r) {
    for (int c = 0; c < m.cols(); ++c) {
      if (m(r, c)) out.push_back({r, c});
    }
  }
  return out;
}

}  // namespace

double dsc(const Mask& pred, const Mask& gt) {
  require_same_shape(pred, gt);
  std::int64_t inter = 0, np = 0, ng = 0;
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    const bool p = pred.data()[i] != 0;
    const bool g = gt.data()[i] != 0;
    np += p;
    ng += g;
    inter += p && g;
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

Mask boundary(const Mask& mask) {
  const int rows = static_cast<int>(mask.rows());
  const int cols = static_cast<int>(mask.cols());
  Mask out = Mask::Zero(rows, cols);
  auto in = [&](int r, int c) {
    return r >= 0 && c >= 0 && r < rows && c < cols && mask(r, c) != 0;
  };
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      if (!mask(r, c)) continue;
      if (!in(r - 1, c) || !in(r + 1, c) || !in(r, c - 1) || !in(r, c + 1)) out(r, c) = 1;
    }
  }
  return out;
}

Eigen::MatrixXd squared_distance_transform(const Mask& features, Spacing spacing) {
  const int rows = static_cast<int>(features.rows());
  const int cols = static_cast<int>(features.cols());
  Eigen::MatrixXd g(rows, cols);
  std::vector<double> f, d, z;
  std::vector<int> v;
  const double wr = spacing.row_mm * spacing.row_mm;
  const double wc = spacing.col_mm * spacing.col_mm;
  f.resize(static_cast<std::size_t>(rows));
  for (int c = 0; c < cols; ++c) {
    for (int r = 0; r < rows; ++r) f[static_cast<std::size_t>(r)] = features(r, c) ? 0.0 : kInf;
    envelope_1d(f, wr, d, v, z);
    for (int r = 0; r < rows; ++r) g(r, c) = d[static_cast<std::size_t>(r)];
  }
  f.resize(static_cast<std::size_t>(cols));
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) f[static_cast<std::size_t>(c)] = g(r, c);
    envelope_1d(f, wc, d, v, z);
    for (int c = 0; c < cols; ++c) g(r, c) = d[static_cast<std::size_t>(c)];
  }
  return g;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) return kNaN;
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

double hd95(const Mask& pred, const Mask& gt, Spacing spacing) {
  require_same_shape(pred, gt);
  const bool pred_empty = pred.cast<int>().sum() == 0;
  const bool gt_empty = gt.cast<int>().sum() == 0;
  if (pred_empty && gt_empty) return 0.0;
  if (pred_empty || gt_empty) return kNaN;
  const Mask pb = boundary(pred);
  const Mask gb = boundary(gt);
  const Eigen::MatrixXd to_gt = squared_distance_transform(gb, spacing);
  const Eigen::MatrixXd to_pred = squared_distance_transform(pb, spacing);
  std::vector<double> pooled;
  for (int r = 0; r < pred.rows(); ++r) {
    for (int c = 0; c < pred.cols(); ++c) {
      if (pb(r, c)) pooled.push_back(std::sqrt(to_gt(r, c)));
      if (gb(r, c)) pooled.push_back(std::sqrt(to_pred(r, c)));
    }
  }
  return percentile(std::move(pooled), 95.0);
}

std::optional<Pixel> interior_point(const Mask& mask) {
  const int rows = static_cast<int>(mask.rows());
  const int cols = static_cast<int>(mask.cols());
  Mask background = Mask::Ones(rows + 2, cols + 2);
  background.block(1, 1, rows, cols) = (mask.array() == 0).cast<std::uint8_t>().matrix();
  const Eigen::MatrixXd dist = squared_distance_transform(background);
  std::optional<Pixel> best;
  double best_d = -1.0;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      if (!mask(r, c)) continue;
      const double d = dist(r + 1, c + 1);
      if (d > best_d) {
        best_d = d;
        best = Pixel{r, c};
      }
    }
  }
  return best;
}

std::optional<Pixel> random_point(const Mask& mask, Rng& rng) {
  const auto pixels = pixels_of(mask);
  if (pixels.empty()) return std::nullopt;
  const auto i = uniform_int(rng, 0, static_cast<std::int64_t>(pixels.size()) - 1);
  return pixels[static_cast<std::size_t>(i)];
}

std::string to_string(PromptStrategy s) {
  return s == PromptStrategy::kInterior ? "interior" : "random";
}

PromptStrategy parse_prompt_strategy(const std::string& s) {
  if (s == "interior") return PromptStrategy::kInterior;
  if (s == "random") return PromptStrategy::kRandom;
  throw ConfigError("prompt strategy must be interior or random, got " + s);
}

std::string to_string(Aggregation a) {
  return a == Aggregation::kPerSlice ? "per-slice" : "per-volume";
}

Aggregation parse_aggregation(const std::string& s) {
  if (s == "per-slice") return Aggregation::kPerSlice;
  if (s == "per-volume") return Aggregation::kPerVolume;
  throw ConfigError("aggregation must be per-slice or per-volume, got " + s);
}

Aggregation default_aggregation(int class_count) {
  return class_count > 1 ? Aggregation::kPerVolume : Aggregation::kPerSlice;
}

std::optional<PointPrompt> make_prompt(const Mask& gt, int class_id, PromptStrategy strategy,
                                       Rng& rng) {
  const auto px = strategy == PromptStrategy::kInterior ? interior_point(gt) : random_point(gt, rng);
  if (!px) return std::nullopt;
  return PointPrompt{px->row, px->col, class_id};
}

MetricsReport evaluate(const MaskPredictor& predict, const std::vector<LabeledSlice>& test,
                       int class_count, PromptStrategy strategy, std::uint64_t seed,
                       std::optional<Aggregation> aggregation,
                       const std::vector<std::string>& class_names) {
  if (class_count < 1) throw InvalidInputError("class_count must be >= 1");
  if (!class_names.empty() && class_names.size() != static_cast<std::size_t>(class_count)) {
    throw InvalidInputError("class_names must have class_count entries");
  }
  MetricsReport rep;
  rep.prompt = strategy;
  rep.aggregation = aggregation.value_or(default_aggregation(class_count));
  rep.seed = seed;

  struct Sample {
    double dsc;
    double hd95;
  };
  // class -> group key (volume id or slice position) -> samples
  std::vector<std::map<std::string, std::vector<Sample>>> groups(
      static_cast<std::size_t>(class_count) + 1);

  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& slice = test[i];
    check_slice(slice, class_count);
    for (int k = 1; k <= class_count; ++k) {
      const Mask gt = class_mask(slice.label, k);
      Rng rng(derive_seed(derive_seed(seed, static_cast<std::uint64_t>(i)),
                          static_cast<std::uint64_t>(k)));
      const auto prompt = make_prompt(gt, k, strategy, rng);
      if (!prompt) continue;
      const Mask pred = predict(slice, *prompt);
      Sample s{dsc(pred, gt), hd95(pred, gt, slice.meta.spacing)};
      char key[32];
      std::snprintf(key, sizeof key, "%012zu", i);
      const std::string group =
          rep.aggregation == Aggregation::kPerVolume ? slice.meta.volume_id : std::string(key);
      groups[static_cast<std::size_t>(k)][group].push_back(s);
    }
  }

  double dsc_sum = 0.0, hd_sum = 0.0;
  int dsc_n = 0, hd_n = 0;
  for (int k = 1; k <= class_count; ++k) {
    ClassMetrics cm;
    cm.name = class_names.empty() ? "class" + std::to_string(k)
                                  : class_names[static_cast<std::size_t>(k) - 1];
    const auto& g = groups[static_cast<std::size_t>(k)];
    cm.present = !g.empty();
    if (!cm.present) {
      cm.dsc = kNaN;
      cm.hd95 = kNaN;
      ++rep.absent_classes;
      rep.classes.push_back(cm);
      continue;
    }
    double group_dsc = 0.0, group_hd = 0.0;
    int hd_groups = 0;
    for (const auto& [key, samples] : g) {
      double d = 0.0, h = 0.0;
      int hn = 0;
      for (const auto& s : samples) {
        d += s.dsc;
        ++cm.samples;
        if (std::isnan(s.hd95)) {
          ++cm.hd95_undefined;
        } else {
          h += s.hd95;
          ++hn;
        }
      }
      group_dsc += d / static_cast<double>(samples.size());
      if (hn > 0) {
        group_hd += h / hn;
        ++hd_groups;
      }
    }
    cm.dsc = group_dsc / static_cast<double>(g.size());
    cm.hd95 = hd_groups > 0 ? group_hd / hd_groups : kNaN;
    rep.hd95_undefined += cm.hd95_undefined;
    dsc_sum += cm.dsc;
    ++dsc_n;
    if (!std::isnan(cm.hd95)) {
      hd_sum += cm.hd95;
      ++hd_n;
    }
    rep.classes.push_back(cm);
  }
  rep.mean_dsc = dsc_n > 0 ? dsc_sum / dsc_n : kNaN;
  rep.mean_hd95 = hd_n > 0 ? hd_sum / hd_n : kNaN;
  return rep;
}

// ---------------------------------------------------------------------------

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

double parse_num(const std::string& s) {
  if (s == "nan") return kNaN;
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::logic_error&) {
    throw ReportError("not a number: " + s);
  }
  if (used != s.size()) throw ReportError("not a number: " + s);
  return v;
}

void check_compatible(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw ReportError("no reports");
  for (const auto& r : reports) {
    if (r.classes.size() != reports.front().classes.size()) {
      throw ReportError("reports have mismatched class lists");
    }
    for (std::size_t k = 0; k < r.classes.size(); ++k) {
      if (r.classes[k].name != reports.front().classes[k].name) {
        throw ReportError("reports have mismatched class lists");
      }
    }
  }
}

constexpr int kFixedColumns = 9;

}  // namespace

std::string report_csv(const std::vector<MetricsReport>& reports) {
  check_compatible(reports);
  std::ostringstream os;
  os << "method,exemplars,prompt,aggregation,seed,config_hash,mean_dsc,mean_hd95,hd95_undefined";
  for (const auto& c : reports.front().classes) os << ",dsc_" << c.name;
  for (const auto& c : reports.front().classes) os << ",hd95_" << c.name;
  os << '\n';
  for (const auto& r : reports) {
    os << r.method << ',' << r.exemplars << ',' << to_string(r.prompt) << ','
       << to_string(r.aggregation) << ',' << r.seed << ',' << r.config_hash << ','
       << num(r.mean_dsc) << ',' << num(r.mean_hd95) << ',' << r.hd95_undefined;
    for (const auto& c : r.classes) os << ',' << num(c.dsc);
    for (const auto& c : r.classes) os << ',' << num(c.hd95);
    os << '\n';
  }
  return os.str();
}

std::vector<MetricsReport> parse_report_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line)) throw ReportError("empty report CSV");
  const auto header = split_csv_line(line);
  if (header.size() < kFixedColumns || (header.size() - kFixedColumns) % 2 != 0 ||
      header[0] != "method") {
    throw ReportError("unrecognized report CSV header");
  }
  const std::size_t k = (header.size() - kFixedColumns) / 2;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < k; ++i) {
    const auto& h = header[kFixedColumns + i];
    if (h.rfind("dsc_", 0) != 0) throw ReportError("bad class column: " + h);
    names.push_back(h.substr(4));
  }
  std::vector<MetricsReport> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != header.size()) throw ReportError("report row has wrong column count");
    MetricsReport r;
    r.method = f[0];
    r.exemplars = f[1];
    r.prompt = parse_prompt_strategy(f[2]);
    r.aggregation = parse_aggregation(f[3]);
    r.seed = std::stoull(f[4]);
    r.config_hash = f[5];
    r.mean_dsc = parse_num(f[6]);
    r.mean_hd95 = parse_num(f[7]);
    r.hd95_undefined = std::stoi(f[8]);
    for (std::size_t i = 0; i < k; ++i) {
      ClassMetrics c;
      c.name = names[i];
      c.dsc = parse_num(f[kFixedColumns + i]);
      c.hd95 = parse_num(f[kFixedColumns + k + i]);
      c.present = !std::isnan(c.dsc);
      r.classes.push_back(c);
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::string report_text(const std::vector<MetricsReport>& reports) {
  check_compatible(reports);
  std::ostringstream os;
  auto pct = [](double v) {
    if (std::isnan(v)) return std::string("n/a");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };
  const bool per_class = reports.front().classes.size() > 1;
  os << std::left << std::setw(18) << "Method" << std::setw(12) << "Exemplars" << std::setw(10)
     << "Prompt" << std::right << std::setw(9) << "DSC" << std::setw(9) << "HD95";
  if (per_class) {
    for (const auto& c : reports.front().classes) os << std::setw(12) << c.name;
  }
  os << '\n';
  for (const auto& r : reports) {
    os << std::left << std::setw(18) << r.method << std::setw(12) << r.exemplars << std::setw(10)
       << to_string(r.prompt) << std::right << std::setw(9) << pct(100.0 * r.mean_dsc)
       << std::setw(9) << pct(r.mean_hd95);
    if (per_class) {
      for (const auto& c : r.classes) os << std::setw(12) << pct(100.0 * c.dsc);
    }
    os << '\n';
  }
  os << "DSC in percent, HD95 in mm. Prompts are derived from ground-truth masks.\n";
  for (const auto& r : reports) {
    if (r.hd95_undefined > 0 || r.absent_classes > 0) {
      os << r.method << " [" << r.exemplars << "]: " << r.hd95_undefined
         << " HD95 samples undefined (empty prediction) and " << r.absent_classes
         << " absent classes excluded from means.\n";
    }
  }
  return os.str();
}

void write_report(const std::vector<MetricsReport>& reports, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream out(out_dir / "report.csv", std::ios::trunc);
    out << report_csv(reports);
    if (!out) throw IoError("cannot write report.csv in " + out_dir.string());
  }
  std::ofstream out(out_dir / "report.txt", std::ios::trunc);
  out << report_text(reports);
  if (!out) throw IoError("cannot write report.txt in " + out_dir.string());
}

void write_overlay_ppm(const Image& image, const Mask& gt, const Mask& pred,
                       const std::filesystem::path& path) {
  require_same_shape(gt, pred);
  if (image.rows() != gt.rows() || image.cols() != gt.cols()) {
    throw InvalidInputError("overlay image and mask shapes differ");
  }
  const Mask gb = boundary(gt);
  const Mask pb = boundary(pred);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write overlay " + path.string());
  out << "P6\n" << image.cols() << ' ' << image.rows() << "\n255\n";
  for (int r = 0; r < image.rows(); ++r) {
    for (int c = 0; c < image.cols(); ++c) {
      const auto g = static_cast<unsigned char>(std::lround(255.0 * std::clamp(image(r, c), 0.0, 1.0)));
      unsigned char px[3] = {g, g, g};
      if (gb(r, c)) px[0] = 0, px[1] = 255, px[2] = 0;
      if (pb(r, c)) px[0] = 255, px[1] = 0, px[2] = 0;
      out.write(reinterpret_cast<const char*>(px), 3);
    }
  }
}

}  // namespace fewseg
