#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "fewseg/model.hpp"
#include "fewseg/training.hpp"

namespace testing {

struct GradEntry {
  std::string param;
  Eigen::Index index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheck {
  std::vector<GradEntry> entries;
  double worst = 0.0;
  int encoder_lora = 0;
  int decoder_lora = 0;
  int prompt = 0;
};

// Central differences of combined_loss on the toy model at randomly chosen
// trainable scalars, per_kind from each of encoder adapters, decoder adapters
// and prompt embeddings. Relative error uses max(|analytic|, |numeric|, floor)
// as denominator.
inline GradCheck run_gradient_check(std::uint64_t seed, int per_kind = 8, double step = 1e-5,
                                    double floor = 1e-6) {
  using namespace fewseg;
  const auto cfg = ModelConfig::toy();
  SegmentationModel model(cfg, seed);
  Rng rng(derive_seed(seed, "gradcheck"));
  // Non-zero B factors so every adapter scalar carries gradient.
  for (auto& p : model.params()) {
    if (!p.trainable()) continue;
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += 0.05 * standard_normal(rng);
  }
  const int n = cfg.input_size;
  Image image(n, n);
  for (Eigen::Index i = 0; i < image.size(); ++i) image.data()[i] = uniform(rng, 0.0, 1.0);
  Mask target = Mask::Zero(n, n);
  target.block(9, 11, 12, 10).setOnes();
  const PointPrompt prompt{15, 16, 1};
  TrainConfig tc;
  tc.ce_weight = 1.0;
  tc.dice_weight = 0.8;

  model.params().zero_grad();
  ForwardCache cache;
  const auto logits = model.forward(image, prompt, &cache);
  model.backward(combined_loss(logits, target, tc).grad, cache);
  auto loss = [&] { return combined_loss(model.forward(image, prompt), target, tc).total; };

  std::vector<Parameter*> enc, dec, pro;
  for (auto& p : model.params()) {
    if (p.group == ParamGroup::kLora) (p.name.rfind("encoder.", 0) == 0 ? enc : dec).push_back(&p);
    if (p.group == ParamGroup::kPrompt) pro.push_back(&p);
  }
  GradCheck out;
  auto probe = [&](std::vector<Parameter*>& pool, int& counter) {
    for (int k = 0; k < per_kind; ++k) {
      Parameter& p = *pool[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(pool.size()) - 1))];
      const auto idx = static_cast<Eigen::Index>(uniform_int(rng, 0, p.value.size() - 1));
      const double saved = p.value.data()[idx];
      p.value.data()[idx] = saved + step;
      const double up = loss();
      p.value.data()[idx] = saved - step;
      const double down = loss();
      p.value.data()[idx] = saved;
      GradEntry e{p.name, idx, p.grad.data()[idx], (up - down) / (2 * step), 0.0};
      e.rel_error = std::abs(e.analytic - e.numeric) /
                    std::max({std::abs(e.analytic), std::abs(e.numeric), floor});
      out.worst = std::max(out.worst, e.rel_error);
      out.entries.push_back(e);
      ++counter;
    }
  };
  probe(enc, out.encoder_lora);
  probe(dec, out.decoder_lora);
  probe(pro, out.prompt);
  return out;
}

}  // namespace testing
