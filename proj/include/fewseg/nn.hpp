#pragma once

// Layers with explicit forward/backward passes. Forward passes are const and
// write whatever backward needs into a caller-owned cache, so inference is
// re-entrant; backward accumulates into the store's gradients for trainable
// parameters only.

#include <optional>
#include <string>
#include <vector>

#include "fewseg/lora.hpp"
#include "fewseg/params.hpp"
#include "fewseg/rng.hpp"

namespace fewseg::nn {

struct LinearCache {
  Matrix x;
};

class Linear {
 public:
  Linear() = default;
  // Weight ~ N(0, init_std^2), bias zero.
  Linear(ParameterStore& store, const std::string& name, int in, int out, ParamGroup group,
         Rng& rng, double init_std, bool bias = true);

  void attach_lora(ParameterStore& store, const LoraConfig& config, Rng& rng);
  bool has_lora() const { return lora_a_.has_value(); }
  // Replaces W by W + sBA and detaches the adapter.
  void fold_lora(ParameterStore& store);

  Matrix forward(const ParameterStore& store, const Matrix& x, LinearCache* cache) const;
  Matrix backward(ParameterStore& store, const Matrix& dy, const LinearCache& cache,
                  bool need_dx = true) const;

  int in() const { return in_; }
  int out() const { return out_; }
  ParamId weight() const { return weight_; }
  std::optional<ParamId> lora_a() const { return lora_a_; }
  std::optional<ParamId> lora_b() const { return lora_b_; }

 private:
  int in_ = 0;
  int out_ = 0;
  std::string name_;
  ParamId weight_ = 0;
  std::optional<ParamId> bias_;
  std::optional<ParamId> lora_a_;
  std::optional<ParamId> lora_b_;
  double lora_scale_ = 1.0;
};

struct LayerNormCache {
  Matrix xhat;
  Eigen::VectorXd inv_std;
};

// Normalizes each row over its features.
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, int dim, ParamGroup group);
  Matrix forward(const ParameterStore& store, const Matrix& x, LayerNormCache* cache) const;
  Matrix backward(ParameterStore& store, const Matrix& dy, const LayerNormCache& cache) const;

 private:
  ParamId gamma_ = 0;
  ParamId beta_ = 0;
  static constexpr double kEps = 1e-5;
};

// Exact (erf) GELU.
Matrix gelu(const Matrix& x);
Matrix gelu_backward(const Matrix& x, const Matrix& dy);

struct MlpCache {
  std::vector<LinearCache> linear;
  std::vector<Matrix> pre_act;  // inputs to each GELU
};

// Linear layers with GELU between them (none after the last).
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParameterStore& store, const std::string& name, int in, int hidden, int out, int layers,
      ParamGroup group, Rng& rng);
  Matrix forward(const ParameterStore& store, const Matrix& x, MlpCache* cache) const;
  Matrix backward(ParameterStore& store, const Matrix& dy, const MlpCache& cache) const;

 private:
  std::vector<Linear> layers_;
};

struct AttentionCache {
  LinearCache q, k, v, o;
  Matrix query, key, value;  // projected
  std::vector<Matrix> probs;  // per head, Nq x Nk
  Matrix mixed;               // concatenated head outputs, Nq x D
};

struct AttentionGrads {
  Matrix dq;
  Matrix dk;
  Matrix dv;
};

// Multi-head scaled dot-product attention with separate q/k/v/out projections.
// LoRA attaches to the query and value projections.
class Attention {
 public:
  Attention() = default;
  Attention(ParameterStore& store, const std::string& name, int dim, int heads, ParamGroup group,
            Rng& rng);
  void attach_lora(ParameterStore& store, const LoraConfig& config, Rng& rng);
  void fold_lora(ParameterStore& store);

  Matrix forward(const ParameterStore& store, const Matrix& q, const Matrix& k, const Matrix& v,
                 AttentionCache* cache) const;
  AttentionGrads backward(ParameterStore& store, const Matrix& dout,
                          const AttentionCache& cache) const;

  const Linear& q_proj() const { return q_; }
  const Linear& v_proj() const { return v_; }

 private:
  int dim_ = 0;
  int heads_ = 1;
  Linear q_, k_, v_, o_;
};

}  // namespace fewseg::nn
