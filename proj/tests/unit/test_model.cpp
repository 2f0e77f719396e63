#include <doctest.h>

#include <set>

#include "fewseg/errors.hpp"
#include "fewseg/model.hpp"
#include "support.hpp"

using namespace fewseg;

namespace {

Image random_image(int n, Rng& rng) {
  Image im(n, n);
  for (Eigen::Index i = 0; i < im.size(); ++i) im.data()[i] = uniform(rng, 0.0, 1.0);
  return im;
}

void perturb_trainable(SegmentationModel& m, Rng& rng, double sd) {
  for (auto& p : m.params()) {
    if (!p.trainable()) continue;
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += sd * standard_normal(rng);
  }
}

}  // namespace

TEST_CASE("forward produces full-resolution finite logits") {
  const auto cfg = ModelConfig::toy();
  SegmentationModel m(cfg, 1);
  const auto out = m.forward(Image::Zero(cfg.input_size, cfg.input_size), {5, 7, 1});
  CHECK(out.target.rows() == cfg.input_size);
  CHECK(out.target.cols() == cfg.input_size);
  CHECK(out.background.rows() == cfg.input_size);
  CHECK(out.target.allFinite());
  CHECK(out.background.allFinite());
  const Matrix emb = m.encode_image(Image::Zero(cfg.input_size, cfg.input_size));
  CHECK(emb.rows() == cfg.tokens());
  CHECK(emb.cols() == cfg.decoder_dim);
  CHECK_THROWS_AS(m.forward(Image::Zero(16, 16), {1, 1, 1}), InvalidInputError);
  CHECK_THROWS_AS(m.encode_point({cfg.input_size, 0, 1}), InvalidInputError);
  CHECK_THROWS_AS(m.encode_point({0, -1, 1}), InvalidInputError);
}

TEST_CASE("without positional embeddings the encoder is patch-translation equivariant") {
  auto cfg = ModelConfig::toy();
  cfg.use_pos_embed = false;
  SegmentationModel m(cfg, 2);
  Rng rng(3);
  const int n = cfg.input_size, p = cfg.patch_size, g = cfg.grid();
  Image im = random_image(n, rng);
  Image shifted = Image::Zero(n, n);
  // Circular shift by one patch column.
  for (int c = 0; c < n; ++c) shifted.col((c + p) % n) = im.col(c);
  const Matrix a = m.encode_image(im);
  const Matrix b = m.encode_image(shifted);
  for (int r = 0; r < g; ++r) {
    for (int c = 0; c < g; ++c) {
      const Matrix diff = a.row(r * g + c) - b.row(r * g + (c + 1) % g);
      CHECK(diff.norm() <= 1e-9 * (1 + a.row(r * g + c).norm()));
    }
  }
}

TEST_CASE("distinct points get distinct embeddings") {
  SegmentationModel m(ModelConfig::toy(), 4);
  std::vector<Matrix> embs;
  for (int r = 0; r < 32; r += 2) {
    for (int c = 0; c < 32; c += 2) embs.push_back(m.encode_point({r, c, 1}));
  }
  double closest = 1e9;
  for (std::size_t i = 0; i < embs.size(); ++i) {
    for (std::size_t j = i + 1; j < embs.size(); ++j) closest = std::min(closest, (embs[i] - embs[j]).norm());
  }
  CHECK(closest > 1e-6);
  // The class id carried by a prompt is not an input.
  CHECK(m.encode_point({3, 4, 1}) == m.encode_point({3, 4, 7}));
}

TEST_CASE("two-channel softmax normalizes and predict_mask is the argmax") {
  SegmentationModel m(ModelConfig::toy(), 5);
  Rng rng(6);
  perturb_trainable(m, rng, 0.05);
  const Image im = random_image(32, rng);
  const auto logits = m.forward(im, {10, 20, 1});
  const Matrix diff = logits.target - logits.background;
  const Matrix pt = (1.0 / (1.0 + (-diff.array()).exp())).matrix();
  const Matrix pb = (1.0 / (1.0 + diff.array().exp())).matrix();
  CHECK(((pt + pb).array() - 1.0).abs().maxCoeff() < 1e-12);
  const Mask mask = m.predict_mask(im, {10, 20, 1});
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    CHECK(mask.data()[i] == (logits.target.data()[i] > logits.background.data()[i] ? 1 : 0));
  }
}

TEST_CASE("gradient of the mean target logit with respect to adapter factors") {
  auto cfg = ModelConfig::toy();
  SegmentationModel m(cfg, 7);
  Rng rng(8);
  perturb_trainable(m, rng, 0.05);
  const Image im = random_image(32, rng);
  const PointPrompt pt{12, 9, 1};
  const double n = static_cast<double>(cfg.input_size * cfg.input_size);
  m.params().zero_grad();
  ForwardCache cache;
  const auto out = m.forward(im, pt, &cache);
  MaskLogits g{Matrix::Zero(out.background.rows(), out.background.cols()),
               Matrix::Constant(out.target.rows(), out.target.cols(), 1.0 / n)};
  m.backward(g, cache);
  auto objective = [&] { return m.forward(im, pt).target.mean(); };
  int checked = 0;
  for (auto& p : m.params()) {
    if (p.group != ParamGroup::kLora || p.name.find("lora_a") == std::string::npos) continue;
    const double h = 1e-5;
    const double saved = p.value(0, 0);
    p.value(0, 0) = saved + h;
    const double up = objective();
    p.value(0, 0) = saved - h;
    const double down = objective();
    p.value(0, 0) = saved;
    const double fd = (up - down) / (2 * h);
    CHECK(std::abs(p.grad(0, 0) - fd) <= 1e-4 * std::max(std::abs(fd), 1e-6) + 1e-9);
    ++checked;
  }
  CHECK(checked >= 4);
}

TEST_CASE("folding adapters gives the same masks") {
  SegmentationModel m(ModelConfig::toy(), 9);
  Rng rng(10);
  perturb_trainable(m, rng, 0.05);
  const auto folded = m.merged();
  CHECK(count_parameters(folded.params()).by_group.at("lora") == 0);
  int agree = 0, total = 0;
  for (int i = 0; i < 50; ++i) {
    const Image im = random_image(32, rng);
    const PointPrompt pt{static_cast<int>(uniform_int(rng, 0, 31)), static_cast<int>(uniform_int(rng, 0, 31)), 1};
    const auto a = m.forward(im, pt);
    const auto b = folded.forward(im, pt);
    CHECK((a.target - b.target).cwiseAbs().maxCoeff() <= 1e-9 * (1 + a.target.cwiseAbs().maxCoeff()));
    const Mask ma = m.predict_mask(im, pt);
    const Mask mb = folded.predict_mask(im, pt);
    agree += static_cast<int>((ma.array() == mb.array()).count());
    total += static_cast<int>(ma.size());
  }
  CHECK(agree == total);
}

TEST_CASE("construction is deterministic in the seed") {
  SegmentationModel a(ModelConfig::toy(), 11), b(ModelConfig::toy(), 11), c(ModelConfig::toy(), 12);
  CHECK(frozen_checksum(a.params()) == frozen_checksum(b.params()));
  CHECK(frozen_checksum(a.params()) != frozen_checksum(c.params()));
  // Base weights do not depend on the adapter rank.
  auto cfg = ModelConfig::toy();
  cfg.lora.rank = 2;
  SegmentationModel d(cfg, 11);
  CHECK(frozen_checksum(a.params()) == frozen_checksum(d.params()));
}

TEST_CASE("checkpoints round-trip") {
  testing::TempDir dir("ckpt");
  SegmentationModel m(ModelConfig::toy(), 13);
  Rng rng(14);
  perturb_trainable(m, rng, 0.05);
  m.save(dir.path());
  for (const char* f : {"model.json", "base.fsa", "adapters.fsa", "heads.fsa"}) {
    CHECK(std::filesystem::exists(dir.path() / f));
  }
  const auto back = SegmentationModel::load(dir.path());
  const Image im = random_image(32, rng);
  CHECK(back.forward(im, {3, 3, 1}).target == m.forward(im, {3, 3, 1}).target);
  CHECK(frozen_checksum(back.params()) == frozen_checksum(m.params()));
  std::filesystem::remove(dir.path() / "adapters.fsa");
  CHECK_THROWS_AS(SegmentationModel::load(dir.path()), Error);
}

TEST_CASE("model config JSON") {
  const nlohmann::json j = ModelConfig::small();
  CHECK(j.get<ModelConfig>().input_size == 64);
  auto bad = j;
  bad["mystery"] = 1;
  CHECK_THROWS_AS(bad.get<ModelConfig>(), ConfigError);
  auto cfg = ModelConfig::toy();
  cfg.patch_size = 5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("a folded model saves and reloads without re-applying adapters") {
  testing::TempDir dir("folded");
  SegmentationModel m(ModelConfig::toy(), 15);
  Rng rng(16);
  perturb_trainable(m, rng, 0.05);
  const auto folded = m.merged();
  folded.save(dir.path());
  const auto back = SegmentationModel::load(dir.path());
  const Image im = random_image(32, rng);
  CHECK(back.forward(im, {8, 8, 1}).target == folded.forward(im, {8, 8, 1}).target);
}
