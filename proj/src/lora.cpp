#include "fewseg/lora.hpp"

#include <algorithm>
#include <string>

#include "fewseg/errors.hpp"

namespace fewseg {

void LoraConfig::validate_for(Eigen::Index c_in, Eigen::Index c_out) const {
  const auto limit = std::min(c_in, c_out);
  if (rank < 1 || rank >= limit) {
    throw ConfigError("LoRA rank " + std::to_string(rank) + " must satisfy 1 <= r < min(C_in, C_out) = " +
                      std::to_string(limit));
  }
  if (!(init_std >= 0.0)) throw ConfigError("LoRA init_std must be >= 0");
}

Matrix lora_forward(const LoraView& v, const Matrix& x) {
  if (x.cols() != v.base.cols()) {
    throw InvalidInputError("LoRA input has " + std::to_string(x.cols()) + " features, expected " +
                            std::to_string(v.base.cols()));
  }
  Matrix y = x * v.base.transpose();
  const Matrix ax = x * v.a.transpose();
  y.noalias() += v.scale * (ax * v.b.transpose());
  return y;
}

Matrix lora_backward(const LoraView& v, const Matrix& x, const Matrix& dy, Matrix& grad_a,
                     Matrix& grad_b) {
  const Matrix ax = x * v.a.transpose();   // N x r
  const Matrix dyb = dy * v.b;             // N x r
  grad_b.noalias() += v.scale * (dy.transpose() * ax);
  grad_a.noalias() += v.scale * (dyb.transpose() * x);
  Matrix dx = dy * v.base;
  dx.noalias() += v.scale * (dyb * v.a);
  return dx;
}

Matrix lora_merge(const LoraView& v) {
  Matrix w = v.base;
  w.noalias() += v.scale * (v.b * v.a);
  return w;
}

LoraAdapter wrap_projection(const Matrix& w, const LoraConfig& config, Rng& rng) {
  config.validate_for(w.cols(), w.rows());
  LoraAdapter ad;
  ad.base_ = &w;
  ad.scale_ = config.scale;
  ad.a_ = Matrix(config.rank, w.cols());
  for (Eigen::Index i = 0; i < ad.a_.size(); ++i) {
    ad.a_.data()[i] = config.init_std * standard_normal(rng);
  }
  ad.b_ = Matrix::Zero(w.rows(), config.rank);
  return ad;
}

Matrix adapted_forward(const LoraAdapter& adapter, const Matrix& x) {
  return lora_forward(adapter.view(), x);
}

Matrix merge(const LoraAdapter& adapter) {
  return lora_merge(adapter.view());
}

}  // namespace fewseg
