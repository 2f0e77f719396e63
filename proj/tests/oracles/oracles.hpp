#pragma once

// Brute-force references used only by the tests. Nothing here calls into the
// production metric, loss or adapter code.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace oracle {

// Row-major binary grid.
struct Grid {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> cells;
  bool at(int r, int c) const { return cells[static_cast<std::size_t>(r * cols + c)] != 0; }
};

struct Result {
  double value = 0.0;
  std::string method = "brute-force";
  std::uint64_t input_digest = 0;
};

// All-pairs boundary distances (4-connected boundary, outside the frame is
// background), pooled over both directions, q-th percentile with linear
// interpolation. NaN when exactly one mask is empty, 0 when both are.
Result brute_hd_percentile(const Grid& pred, const Grid& gt, double q, double row_mm = 1.0,
                           double col_mm = 1.0);

// Foreground pixel farthest from any background pixel (the frame border
// counts as background), lowest (row, col) on ties.
std::pair<int, int> brute_distance_argmax(const Grid& mask);

// Dense (W + scale * B A) x for a row-major W (out x in), A (r x in), B (out x r).
std::vector<double> dense_lora_forward(const std::vector<double>& w, const std::vector<double>& a,
                                       const std::vector<double>& b, const std::vector<double>& x,
                                       int in, int out, int rank, double scale = 1.0);

// lambda_ce * mean two-class cross-entropy + lambda_dice * soft Dice on the
// target-channel softmax, straight from the formulas.
double naive_combined_loss(const std::vector<double>& background_logits,
                           const std::vector<double>& target_logits,
                           const std::vector<int>& target, double lambda_ce, double lambda_dice);
double naive_cross_entropy(const std::vector<double>& background_logits,
                           const std::vector<double>& target_logits, const std::vector<int>& target);
double naive_soft_dice(const std::vector<double>& probs, const std::vector<int>& target);

}  // namespace oracle
