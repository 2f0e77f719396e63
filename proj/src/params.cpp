#include "fewseg/params.hpp"

#include <cstdio>
#include <string_view>

#include "fewseg/errors.hpp"
#include "fewseg/rng.hpp"

namespace fewseg {

std::string to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::kFrozen: return "frozen";
    case ParamGroup::kLora: return "lora";
    case ParamGroup::kPrompt: return "prompt";
    case ParamGroup::kHead: return "head";
  }
  return "unknown";
}

ParamId ParameterStore::add(std::string name, ParamGroup group, Eigen::Index rows,
                            Eigen::Index cols) {
  if (find(name) != nullptr) throw InvalidInputError("duplicate parameter name " + name);
  Parameter p;
  p.name = std::move(name);
  p.group = group;
  p.rows = rows;
  p.cols = cols;
  if (materialize_) p.value = Matrix::Zero(rows, cols);
  params_.push_back(std::move(p));
  return params_.size() - 1;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

Parameter* ParameterStore::find(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) {
    if (!p.trainable()) continue;
    if (p.grad.rows() != p.rows || p.grad.cols() != p.cols) {
      p.grad = Matrix::Zero(p.rows, p.cols);
    } else {
      p.grad.setZero();
    }
  }
}

ParamCount count_parameters(const ParameterStore& store) {
  ParamCount c;
  for (const auto& g : {ParamGroup::kFrozen, ParamGroup::kLora, ParamGroup::kPrompt, ParamGroup::kHead}) {
    c.by_group[to_string(g)] = 0;
  }
  for (const auto& p : store) {
    c.total += p.size();
    if (p.trainable()) c.trainable += p.size();
    c.by_group[to_string(p.group)] += p.size();
  }
  c.fraction = c.total > 0 ? static_cast<double>(c.trainable) / static_cast<double>(c.total) : 0.0;
  return c;
}

std::string format_param_count(const ParamCount& count) {
  std::string out;
  char line[128];
  auto row = [&](const char* label, std::int64_t n) {
    const double pct = count.total > 0 ? 100.0 * static_cast<double>(n) / count.total : 0.0;
    std::snprintf(line, sizeof line, "%-22s %14lld %9.4f%%\n", label, static_cast<long long>(n), pct);
    out += line;
  };
  for (const auto& [group, n] : count.by_group) row(("group " + group).c_str(), n);
  const auto lora = count.by_group.contains("lora") ? count.by_group.at("lora") : 0;
  row("lora only", lora);
  row("trainable (all groups)", count.trainable);
  row("total", count.total);
  return out;
}

std::uint64_t frozen_checksum(const ParameterStore& store) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : store) {
    if (p.trainable()) continue;
    h = fnv1a64(p.name, h);
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(p.value.data()),
                                 static_cast<std::size_t>(p.value.size()) * sizeof(double)),
                h);
  }
  return h;
}

}  // namespace fewseg
