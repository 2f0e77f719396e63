#pragma once

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <string>

#include "fewseg/rng.hpp"
#include "fewseg/types.hpp"
#include "oracles/oracles.hpp"

namespace testing {

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("fewseg_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline fewseg::Mask random_mask(int rows, int cols, double density, fewseg::Rng& rng) {
  fewseg::Mask m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = fewseg::bernoulli(rng, density) ? 1 : 0;
  return m;
}

// A filled axis-aligned rectangle.
inline fewseg::Mask box_mask(int rows, int cols, int r0, int c0, int r1, int c1) {
  fewseg::Mask m = fewseg::Mask::Zero(rows, cols);
  m.block(r0, c0, r1 - r0, c1 - c0).setOnes();
  return m;
}

inline oracle::Grid to_grid(const fewseg::Mask& m) {
  oracle::Grid g{static_cast<int>(m.rows()), static_cast<int>(m.cols()), {}};
  g.cells.assign(m.data(), m.data() + m.size());
  return g;
}

inline fewseg::LabeledSlice make_slice(int rows, int cols, fewseg::Rng& rng) {
  fewseg::LabeledSlice s;
  s.image.resize(rows, cols);
  for (Eigen::Index i = 0; i < s.image.size(); ++i) s.image.data()[i] = fewseg::uniform(rng, 0.0, 1.0);
  s.label = fewseg::LabelMap::Zero(rows, cols);
  s.meta = {"vol", 0, {}};
  return s;
}

}  // namespace testing
