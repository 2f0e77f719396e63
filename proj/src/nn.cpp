#include "fewseg/nn.hpp"

#include <cmath>
#include <numbers>

#include "fewseg/errors.hpp"

namespace fewseg::nn {
namespace {

void fill_normal(Parameter& p, Rng& rng, double std) {
  if (p.value.size() == 0) return;
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = std * standard_normal(rng);
}

}  // namespace

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(ParameterStore& store, const std::string& name, int in, int out, ParamGroup group,
               Rng& rng, double init_std, bool bias)
    : in_(in), out_(out), name_(name) {
  weight_ = store.add(name + ".weight", group, out, in);
  fill_normal(store[weight_], rng, init_std);
  if (bias) bias_ = store.add(name + ".bias", group, 1, out);
}

void Linear::attach_lora(ParameterStore& store, const LoraConfig& config, Rng& rng) {
  config.validate_for(in_, out_);
  lora_a_ = store.add(name_ + ".lora_a", ParamGroup::kLora, config.rank, in_);
  lora_b_ = store.add(name_ + ".lora_b", ParamGroup::kLora, out_, config.rank);
  fill_normal(store[*lora_a_], rng, config.init_std);
  lora_scale_ = config.scale;
}

void Linear::fold_lora(ParameterStore& store) {
  if (!has_lora()) return;
  auto& w = store[weight_].value;
  w = lora_merge({w, store[*lora_a_].value, store[*lora_b_].value, lora_scale_});
  lora_a_.reset();
  lora_b_.reset();
}

Matrix Linear::forward(const ParameterStore& store, const Matrix& x, LinearCache* cache) const {
  if (x.cols() != in_) {
    throw InvalidInputError(name_ + ": input has " + std::to_string(x.cols()) +
                            " features, expected " + std::to_string(in_));
  }
  const auto& w = store[weight_].value;
  Matrix y = has_lora()
                 ? lora_forward({w, store[*lora_a_].value, store[*lora_b_].value, lora_scale_}, x)
                 : Matrix(x * w.transpose());
  if (bias_) y.rowwise() += store[*bias_].value.row(0);
  if (cache) cache->x = x;
  return y;
}

Matrix Linear::backward(ParameterStore& store, const Matrix& dy, const LinearCache& cache,
                        bool need_dx) const {
  auto& w = store[weight_];
  if (w.trainable()) w.grad.noalias() += dy.transpose() * cache.x;
  if (bias_ && store[*bias_].trainable()) store[*bias_].grad.row(0) += dy.colwise().sum();
  if (has_lora()) {
    auto& a = store[*lora_a_];
    auto& b = store[*lora_b_];
    return lora_backward({w.value, a.value, b.value, lora_scale_}, cache.x, dy, a.grad, b.grad);
  }
  if (!need_dx) return {};
  return dy * w.value;
}

// ---------------------------------------------------------------------------
// LayerNorm

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, int dim, ParamGroup group) {
  gamma_ = store.add(name + ".gamma", group, 1, dim);
  beta_ = store.add(name + ".beta", group, 1, dim);
  if (store.materialized()) store[gamma_].value.setOnes();
}

Matrix LayerNorm::forward(const ParameterStore& store, const Matrix& x,
                          LayerNormCache* cache) const {
  const auto d = static_cast<double>(x.cols());
  const Eigen::VectorXd mean = x.rowwise().mean();
  Matrix xc = x.colwise() - mean;
  const Eigen::VectorXd inv_std =
      ((xc.array().square().rowwise().sum() / d) + kEps).rsqrt().matrix();
  Matrix xhat = xc.array().colwise() * inv_std.array();
  Matrix y = xhat.array().rowwise() * store[gamma_].value.row(0).array();
  y.rowwise() += store[beta_].value.row(0);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = inv_std;
  }
  return y;
}

Matrix LayerNorm::backward(ParameterStore& store, const Matrix& dy,
                           const LayerNormCache& cache) const {
  auto& gamma = store[gamma_];
  auto& beta = store[beta_];
  if (gamma.trainable()) {
    gamma.grad.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
    beta.grad.row(0) += dy.colwise().sum();
  }
  const Matrix dxhat = dy.array().rowwise() * gamma.value.row(0).array();
  const Eigen::VectorXd mean_dxhat = dxhat.rowwise().mean();
  const Eigen::VectorXd mean_dxhat_xhat = (dxhat.array() * cache.xhat.array()).rowwise().mean();
  Matrix dx = dxhat.colwise() - mean_dxhat;
  dx.array() -= cache.xhat.array().colwise() * mean_dxhat_xhat.array();
  dx.array().colwise() *= cache.inv_std.array();
  return dx;
}

// ---------------------------------------------------------------------------
// GELU

Matrix gelu(const Matrix& x) {
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2)); });
}

Matrix gelu_backward(const Matrix& x, const Matrix& dy) {
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  Matrix d = x.unaryExpr([&](double v) {
    const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2));
    const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
    return cdf + v * pdf;
  });
  return d.cwiseProduct(dy);
}

// ---------------------------------------------------------------------------
// Mlp

Mlp::Mlp(ParameterStore& store, const std::string& name, int in, int hidden, int out, int layers,
         ParamGroup group, Rng& rng) {
  if (layers < 1) throw ConfigError("MLP needs at least one layer");
  for (int i = 0; i < layers; ++i) {
    const int a = i == 0 ? in : hidden;
    const int b = i == layers - 1 ? out : hidden;
    layers_.emplace_back(store, name + ".layer" + std::to_string(i), a, b, group, rng,
                         1.0 / std::sqrt(static_cast<double>(a)));
  }
}

Matrix Mlp::forward(const ParameterStore& store, const Matrix& x, MlpCache* cache) const {
  if (cache) {
    cache->linear.assign(layers_.size(), {});
    cache->pre_act.assign(layers_.size() > 0 ? layers_.size() - 1 : 0, {});
  }
  Matrix h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i].forward(store, h, cache ? &cache->linear[i] : nullptr);
    if (i + 1 < layers_.size()) {
      if (cache) cache->pre_act[i] = h;
      h = gelu(h);
    }
  }
  return h;
}

Matrix Mlp::backward(ParameterStore& store, const Matrix& dy, const MlpCache& cache) const {
  Matrix d = dy;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    d = layers_[i].backward(store, d, cache.linear[i]);
    if (i > 0) d = gelu_backward(cache.pre_act[i - 1], d);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Attention

Attention::Attention(ParameterStore& store, const std::string& name, int dim, int heads,
                     ParamGroup group, Rng& rng)
    : dim_(dim), heads_(heads) {
  if (heads < 1 || dim % heads != 0) {
    throw ConfigError(name + ": dim " + std::to_string(dim) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const double std = 1.0 / std::sqrt(static_cast<double>(dim));
  q_ = Linear(store, name + ".q_proj", dim, dim, group, rng, std);
  k_ = Linear(store, name + ".k_proj", dim, dim, group, rng, std);
  v_ = Linear(store, name + ".v_proj", dim, dim, group, rng, std);
  o_ = Linear(store, name + ".out_proj", dim, dim, group, rng, std);
}

void Attention::attach_lora(ParameterStore& store, const LoraConfig& config, Rng& rng) {
  if (config.query) q_.attach_lora(store, config, rng);
  if (config.value) v_.attach_lora(store, config, rng);
}

void Attention::fold_lora(ParameterStore& store) {
  q_.fold_lora(store);
  v_.fold_lora(store);
}

Matrix Attention::forward(const ParameterStore& store, const Matrix& q, const Matrix& k,
                          const Matrix& v, AttentionCache* cache) const {
  if (k.rows() != v.rows()) throw InvalidInputError("attention keys and values differ in length");
  Matrix query = q_.forward(store, q, cache ? &cache->q : nullptr);
  Matrix key = k_.forward(store, k, cache ? &cache->k : nullptr);
  Matrix value = v_.forward(store, v, cache ? &cache->v : nullptr);
  const int dh = dim_ / heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix mixed(q.rows(), dim_);
  if (cache) cache->probs.assign(static_cast<std::size_t>(heads_), {});
  for (int h = 0; h < heads_; ++h) {
    Matrix s = scale * (query.middleCols(h * dh, dh) * key.middleCols(h * dh, dh).transpose());
    const Eigen::VectorXd row_max = s.rowwise().maxCoeff();
    s = (s.colwise() - row_max).array().exp();
    const Eigen::VectorXd row_sum = s.rowwise().sum();
    s.array().colwise() /= row_sum.array();
    mixed.middleCols(h * dh, dh).noalias() = s * value.middleCols(h * dh, dh);
    if (cache) cache->probs[static_cast<std::size_t>(h)] = std::move(s);
  }
  Matrix out = o_.forward(store, mixed, cache ? &cache->o : nullptr);
  if (cache) {
    cache->query = std::move(query);
    cache->key = std::move(key);
    cache->value = std::move(value);
    cache->mixed = std::move(mixed);
  }
  return out;
}

AttentionGrads Attention::backward(ParameterStore& store, const Matrix& dout,
                                   const AttentionCache& cache) const {
  const Matrix dmixed = o_.backward(store, dout, cache.o);
  const int dh = dim_ / heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix dquery(cache.query.rows(), dim_);
  Matrix dkey(cache.key.rows(), dim_);
  Matrix dvalue(cache.value.rows(), dim_);
  for (int h = 0; h < heads_; ++h) {
    const Matrix& p = cache.probs[static_cast<std::size_t>(h)];
    const auto dmh = dmixed.middleCols(h * dh, dh);
    dvalue.middleCols(h * dh, dh).noalias() = p.transpose() * dmh;
    Matrix dp = dmh * cache.value.middleCols(h * dh, dh).transpose();
    const Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
    Matrix ds = p.array() * (dp.colwise() - row_dot).array();
    ds *= scale;
    dquery.middleCols(h * dh, dh).noalias() = ds * cache.key.middleCols(h * dh, dh);
    dkey.middleCols(h * dh, dh).noalias() = ds.transpose() * cache.query.middleCols(h * dh, dh);
  }
  AttentionGrads g;
  g.dq = q_.backward(store, dquery, cache.q);
  g.dk = k_.backward(store, dkey, cache.k);
  g.dv = v_.backward(store, dvalue, cache.v);
  return g;
}

}  // namespace fewseg::nn
