#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace fewseg {

// Row-major so that token matrices (tokens x features) are contiguous per token.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ParamId = std::size_t;

enum class ParamGroup {
  kFrozen,  // pre-trained base weights
  kLora,    // low-rank adapter factors
  kPrompt,  // prompt embeddings
  kHead,    // mask-decoder output heads
};

std::string to_string(ParamGroup g);

struct Parameter {
  std::string name;
  ParamGroup group = ParamGroup::kFrozen;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Matrix value;  // empty for shape-only stores
  Matrix grad;   // allocated by zero_grad() for trainable parameters

  bool trainable() const { return group != ParamGroup::kFrozen; }
  std::int64_t size() const { return static_cast<std::int64_t>(rows) * cols; }
};

// Owns every parameter of a model. Layers refer to entries by id so models
// stay copyable.
class ParameterStore {
 public:
  explicit ParameterStore(bool materialize = true) : materialize_(materialize) {}

  ParamId add(std::string name, ParamGroup group, Eigen::Index rows, Eigen::Index cols);
  Parameter& operator[](ParamId id) { return params_[id]; }
  const Parameter& operator[](ParamId id) const { return params_[id]; }
  std::size_t size() const { return params_.size(); }
  bool materialized() const { return materialize_; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  const Parameter* find(const std::string& name) const;
  Parameter* find(const std::string& name);

  void zero_grad();

 private:
  bool materialize_;
  std::deque<Parameter> params_;
};

struct ParamCount {
  std::int64_t trainable = 0;
  std::int64_t total = 0;
  double fraction = 0.0;
  std::map<std::string, std::int64_t> by_group;  // group name -> scalars
};

ParamCount count_parameters(const ParameterStore& store);

// Multi-line table: per-group scalars, LoRA-only and all-trainable totals.
std::string format_param_count(const ParamCount& count);

// FNV-1a over the bytes of every frozen parameter, in store order.
std::uint64_t frozen_checksum(const ParameterStore& store);

}  // namespace fewseg
