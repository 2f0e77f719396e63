#pragma once

#include <stdexcept>

#include "fewseg/params.hpp"
#include "fewseg/rng.hpp"

namespace fewseg {

struct LoraConfig {
  int rank = 4;
  bool query = true;   // adapt query projections
  bool value = true;   // adapt value projections
  bool image_encoder = true;
  bool mask_decoder = true;
  double init_std = 0.02;  // std of the Gaussian A initialization
  double scale = 1.0;      // multiplier on BA; 1 gives W + BA

  // Throws ConfigError unless 1 <= rank < min(c_in, c_out).
  void validate_for(Eigen::Index c_in, Eigen::Index c_out) const;
};

// Non-owning view of a frozen projection W (C_out x C_in) and its bypass
// factors A (r x C_in) and B (C_out x r).
struct LoraView {
  const Matrix& base;
  const Matrix& a;
  const Matrix& b;
  double scale = 1.0;
};

// Rows of x are inputs: returns x W^T + scale (x A^T) B^T without forming BA.
Matrix lora_forward(const LoraView& v, const Matrix& x);

// Accumulates dA and dB for upstream gradient dy and returns dx. The base W
// receives no gradient.
Matrix lora_backward(const LoraView& v, const Matrix& x, const Matrix& dy, Matrix& grad_a,
                     Matrix& grad_b);

// W + scale * B A.
Matrix lora_merge(const LoraView& v);

// A trainable low-rank bypass around one frozen projection.
class LoraAdapter {
 public:
  const Matrix& base() const { return *base_; }
  const Matrix& a() const { return a_; }
  const Matrix& b() const { return b_; }
  Matrix& a() { return a_; }
  Matrix& b() { return b_; }
  double scale() const { return scale_; }
  int rank() const { return static_cast<int>(a_.rows()); }
  bool trainable() const { return true; }
  std::int64_t trainable_scalars() const { return a_.size() + b_.size(); }

  LoraView view() const { return {*base_, a_, b_, scale_}; }

 private:
  friend LoraAdapter wrap_projection(const Matrix& w, const LoraConfig& config, Rng& rng);
  const Matrix* base_ = nullptr;
  Matrix a_;
  Matrix b_;
  double scale_ = 1.0;
};

// A ~ N(0, init_std^2), B = 0. The adapter refers to w, which must outlive it.
LoraAdapter wrap_projection(const Matrix& w, const LoraConfig& config, Rng& rng);

// x holds one input per row (or a single row vector); throws InvalidInputError
// when x has the wrong feature count.
Matrix adapted_forward(const LoraAdapter& adapter, const Matrix& x);
Matrix merge(const LoraAdapter& adapter);

}  // namespace fewseg
