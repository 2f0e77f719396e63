#include "fewseg/model.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "fewseg/errors.hpp"
#include "fewseg/rng.hpp"

namespace fewseg {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (patch_size < 1 || input_size < patch_size) fail("input_size must be >= patch_size >= 1");
  if (input_size % patch_size != 0) fail("input_size must be divisible by patch_size");
  if (embed_dim < 1 || num_heads < 1 || embed_dim % num_heads != 0) {
    fail("embed_dim must be divisible by num_heads");
  }
  if (depth < 0 || decoder_depth < 1) fail("depth must be >= 0 and decoder_depth >= 1");
  if (mlp_ratio < 1 || decoder_mlp_dim < 1) fail("MLP widths must be positive");
  if (decoder_dim < 2 || decoder_dim % 2 != 0) fail("decoder_dim must be even");
  if (decoder_heads < 1 || decoder_dim % decoder_heads != 0) {
    fail("decoder_dim must be divisible by decoder_heads");
  }
  if (upscale_stages < 1 || upscale_stages > 4) fail("upscale_stages must lie in [1, 4]");
  if (decoder_dim % (1 << (upscale_stages + 1)) != 0) {
    fail("decoder_dim must be divisible by 2^(upscale_stages + 1)");
  }
  if (patch_size % (1 << upscale_stages) != 0) {
    fail("patch_size must be divisible by 2^upscale_stages");
  }
  if (lora.image_encoder && (lora.query || lora.value)) lora.validate_for(embed_dim, embed_dim);
  if (lora.mask_decoder && (lora.query || lora.value)) lora.validate_for(decoder_dim, decoder_dim);
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::small() {
  ModelConfig c;
  c.input_size = 64;
  c.patch_size = 8;
  c.embed_dim = 64;
  c.depth = 2;
  c.num_heads = 4;
  c.decoder_dim = 64;
  c.decoder_heads = 4;
  c.decoder_mlp_dim = 128;
  return c;
}

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.input_size = 32;
  c.patch_size = 8;
  c.embed_dim = 32;
  c.depth = 2;
  c.num_heads = 2;
  c.decoder_dim = 32;
  c.decoder_depth = 2;
  c.decoder_heads = 2;
  c.decoder_mlp_dim = 64;
  return c;
}

ModelConfig ModelConfig::base_like() {
  ModelConfig c;
  c.input_size = 1024;
  c.patch_size = 16;
  c.embed_dim = 768;
  c.depth = 12;
  c.num_heads = 12;
  c.decoder_dim = 256;
  c.decoder_depth = 2;
  c.decoder_heads = 8;
  c.decoder_mlp_dim = 2048;
  return c;
}

namespace {

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void reject_unknown(const json& j, const std::set<std::string>& known, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw ConfigError(std::string(what) + ": unknown field '" + k + "'");
  }
}

}  // namespace

void to_json(json& j, const LoraConfig& c) {
  j = json{{"rank", c.rank},
           {"query", c.query},
           {"value", c.value},
           {"image_encoder", c.image_encoder},
           {"mask_decoder", c.mask_decoder},
           {"init_std", c.init_std},
           {"scale", c.scale}};
}

void from_json(const json& j, LoraConfig& c) {
  reject_unknown(j, {"rank", "query", "value", "image_encoder", "mask_decoder", "init_std", "scale"},
                 "lora config");
  try {
    read_field(j, "rank", c.rank);
    read_field(j, "query", c.query);
    read_field(j, "value", c.value);
    read_field(j, "image_encoder", c.image_encoder);
    read_field(j, "mask_decoder", c.mask_decoder);
    read_field(j, "init_std", c.init_std);
    read_field(j, "scale", c.scale);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("lora config: ") + e.what());
  }
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"input_size", c.input_size},
           {"patch_size", c.patch_size},
           {"embed_dim", c.embed_dim},
           {"depth", c.depth},
           {"num_heads", c.num_heads},
           {"mlp_ratio", c.mlp_ratio},
           {"use_pos_embed", c.use_pos_embed},
           {"decoder_dim", c.decoder_dim},
           {"decoder_depth", c.decoder_depth},
           {"decoder_heads", c.decoder_heads},
           {"decoder_mlp_dim", c.decoder_mlp_dim},
           {"upscale_stages", c.upscale_stages},
           {"lora", c.lora}};
}

void from_json(const json& j, ModelConfig& c) {
  reject_unknown(j,
                 {"input_size", "patch_size", "embed_dim", "depth", "num_heads", "mlp_ratio",
                  "use_pos_embed", "decoder_dim", "decoder_depth", "decoder_heads",
                  "decoder_mlp_dim", "upscale_stages", "lora"},
                 "model config");
  try {
    read_field(j, "input_size", c.input_size);
    read_field(j, "patch_size", c.patch_size);
    read_field(j, "embed_dim", c.embed_dim);
    read_field(j, "depth", c.depth);
    read_field(j, "num_heads", c.num_heads);
    read_field(j, "mlp_ratio", c.mlp_ratio);
    read_field(j, "use_pos_embed", c.use_pos_embed);
    read_field(j, "decoder_dim", c.decoder_dim);
    read_field(j, "decoder_depth", c.decoder_depth);
    read_field(j, "decoder_heads", c.decoder_heads);
    read_field(j, "decoder_mlp_dim", c.decoder_mlp_dim);
    read_field(j, "upscale_stages", c.upscale_stages);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  if (j.contains("lora")) c.lora = j.at("lora").get<LoraConfig>();
}

// ---------------------------------------------------------------------------
// Construction

namespace {

// Bilinear interpolation matrix (out x in) with half-pixel centres.
Matrix interpolation_matrix(int out, int in) {
  Matrix m = Matrix::Zero(out, in);
  for (int i = 0; i < out; ++i) {
    double x = (i + 0.5) * static_cast<double>(in) / out - 0.5;
    x = std::max(x, 0.0);
    const int i0 = std::min(static_cast<int>(std::floor(x)), in - 1);
    const int i1 = std::min(i0 + 1, in - 1);
    const double f = x - i0;
    m(i, i0) += 1.0 - f;
    m(i, i1) += f;
  }
  return m;
}

// (side^2 x 4C) token rows -> ((2 side)^2 x C) pixel rows: each token's
// channels split into a 2x2 block, as a stride-2 transposed convolution.
Matrix pixel_shuffle(const Matrix& y, int side) {
  const auto c = y.cols() / 4;
  Matrix out(4 * y.rows(), c);
  const int big = 2 * side;
  for (int i = 0; i < side; ++i) {
    for (int j = 0; j < side; ++j) {
      const auto t = i * side + j;
      for (int a = 0; a < 2; ++a) {
        for (int b = 0; b < 2; ++b) {
          out.row((2 * i + a) * big + 2 * j + b) = y.row(t).segment((a * 2 + b) * c, c);
        }
      }
    }
  }
  return out;
}

Matrix pixel_unshuffle(const Matrix& d, int side) {
  const auto c = d.cols();
  Matrix out(static_cast<Eigen::Index>(side) * side, 4 * c);
  const int big = 2 * side;
  for (int i = 0; i < side; ++i) {
    for (int j = 0; j < side; ++j) {
      const auto t = i * side + j;
      for (int a = 0; a < 2; ++a) {
        for (int b = 0; b < 2; ++b) {
          out.row(t).segment((a * 2 + b) * c, c) = d.row((2 * i + a) * big + 2 * j + b);
        }
      }
    }
  }
  return out;
}

void fill_normal(ParameterStore& store, ParamId id, Rng& rng, double std) {
  auto& v = store[id].value;
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = std * standard_normal(rng);
}

}  // namespace

SegmentationModel::SegmentationModel(const ModelConfig& config, std::uint64_t seed)
    : SegmentationModel(config, seed, true) {}

SegmentationModel SegmentationModel::shapes_only(const ModelConfig& config) {
  return SegmentationModel(config, 0, false);
}

SegmentationModel::SegmentationModel(const ModelConfig& config, std::uint64_t seed,
                                     bool materialize)
    : config_(config), seed_(seed), store_(materialize) {
  config_.validate();
  build();
}

void SegmentationModel::build() {
  const auto& c = config_;
  Rng base(derive_seed(seed_, "base"));
  Rng lora(derive_seed(seed_, "lora"));
  Rng heads(derive_seed(seed_, "heads"));
  const bool real = store_.materialized();
  const int p2 = c.patch_size * c.patch_size;
  const int d = c.embed_dim;
  const int dd = c.decoder_dim;
  auto inv_sqrt = [](int n) { return 1.0 / std::sqrt(static_cast<double>(n)); };

  patch_embed_ = nn::Linear(store_, "encoder.patch_embed", p2, d, ParamGroup::kFrozen, base, inv_sqrt(p2));
  if (c.use_pos_embed) {
    pos_embed_ = store_.add("encoder.pos_embed", ParamGroup::kFrozen, c.tokens(), d);
    if (real) fill_normal(store_, pos_embed_, base, 0.02);
  }
  for (int b = 0; b < c.depth; ++b) {
    const std::string name = "encoder.block" + std::to_string(b);
    Block blk;
    blk.ln1 = nn::LayerNorm(store_, name + ".norm1", d, ParamGroup::kFrozen);
    blk.attn = nn::Attention(store_, name + ".attn", d, c.num_heads, ParamGroup::kFrozen, base);
    blk.ln2 = nn::LayerNorm(store_, name + ".norm2", d, ParamGroup::kFrozen);
    blk.mlp = nn::Mlp(store_, name + ".mlp", d, d * c.mlp_ratio, d, 2, ParamGroup::kFrozen, base);
    blocks_.push_back(std::move(blk));
  }
  neck_ = nn::Linear(store_, "encoder.neck", d, dd, ParamGroup::kFrozen, base, inv_sqrt(d));
  neck_norm_ = nn::LayerNorm(store_, "encoder.neck_norm", dd, ParamGroup::kFrozen);

  gaussian_ = store_.add("prompt.gaussian", ParamGroup::kFrozen, 2, dd / 2);
  if (real) fill_normal(store_, gaussian_, base, 1.0);
  point_embed_ = store_.add("prompt.point_embed", ParamGroup::kPrompt, 1, dd);
  no_mask_embed_ = store_.add("prompt.no_mask_embed", ParamGroup::kPrompt, 1, dd);
  if (real) {
    fill_normal(store_, point_embed_, heads, 1.0);
    fill_normal(store_, no_mask_embed_, heads, 1.0);
  }

  mask_tokens_ = store_.add("decoder.mask_tokens", ParamGroup::kHead, 2, dd);
  if (real) fill_normal(store_, mask_tokens_, heads, 1.0);
  for (int l = 0; l < c.decoder_depth; ++l) {
    const std::string name = "decoder.layer" + std::to_string(l);
    DecoderLayer layer;
    layer.self_attn = nn::Attention(store_, name + ".self_attn", dd, c.decoder_heads, ParamGroup::kFrozen, base);
    layer.norm1 = nn::LayerNorm(store_, name + ".norm1", dd, ParamGroup::kFrozen);
    layer.token_to_image = nn::Attention(store_, name + ".token_to_image", dd, c.decoder_heads, ParamGroup::kFrozen, base);
    layer.norm2 = nn::LayerNorm(store_, name + ".norm2", dd, ParamGroup::kFrozen);
    layer.mlp = nn::Mlp(store_, name + ".mlp", dd, c.decoder_mlp_dim, dd, 2, ParamGroup::kFrozen, base);
    layer.norm3 = nn::LayerNorm(store_, name + ".norm3", dd, ParamGroup::kFrozen);
    layer.image_to_token = nn::Attention(store_, name + ".image_to_token", dd, c.decoder_heads, ParamGroup::kFrozen, base);
    layer.norm4 = nn::LayerNorm(store_, name + ".norm4", dd, ParamGroup::kFrozen);
    decoder_layers_.push_back(std::move(layer));
  }
  final_attn_ = nn::Attention(store_, "decoder.final_attn", dd, c.decoder_heads, ParamGroup::kFrozen, base);
  final_norm_ = nn::LayerNorm(store_, "decoder.final_norm", dd, ParamGroup::kFrozen);

  int ch = dd;
  for (int s = 0; s < c.upscale_stages; ++s) {
    const int out = dd >> (s + 2);
    upscale_.emplace_back(store_, "decoder.upscale" + std::to_string(s), ch, 4 * out,
                          ParamGroup::kHead, heads, inv_sqrt(ch));
    if (s + 1 < c.upscale_stages) {
      upscale_norm_.emplace_back(store_, "decoder.upscale_norm" + std::to_string(s), out, ParamGroup::kHead);
    }
    ch = out;
  }
  for (int i = 0; i < 2; ++i) {
    hyper_.emplace_back(store_, "decoder.hyper" + std::to_string(i), dd, dd, ch, 3, ParamGroup::kHead, heads);
  }

  // Adapters last so the frozen base does not depend on the LoRA settings.
  if (c.lora.image_encoder) {
    for (auto& blk : blocks_) blk.attn.attach_lora(store_, c.lora, lora);
  }
  if (c.lora.mask_decoder) {
    for (auto& layer : decoder_layers_) {
      layer.self_attn.attach_lora(store_, c.lora, lora);
      layer.token_to_image.attach_lora(store_, c.lora, lora);
      layer.image_to_token.attach_lora(store_, c.lora, lora);
    }
    final_attn_.attach_lora(store_, c.lora, lora);
  }

  if (real) {
    const int g = c.grid();
    image_pe_ = Matrix(c.tokens(), dd);
    for (int i = 0; i < g; ++i) {
      for (int j = 0; j < g; ++j) image_pe_.row(i * g + j) = fourier((j + 0.5) / g, (i + 0.5) / g);
    }
    upsample_ = interpolation_matrix(c.input_size, c.low_res());
  }
}

Matrix SegmentationModel::fourier(double x, double y) const {
  const auto& g = store_[gaussian_].value;
  const double cx = 2.0 * x - 1.0;
  const double cy = 2.0 * y - 1.0;
  const Eigen::Index half = g.cols();
  Matrix out(1, 2 * half);
  for (Eigen::Index k = 0; k < half; ++k) {
    const double proj = 2.0 * std::numbers::pi * (cx * g(0, k) + cy * g(1, k));
    out(0, k) = std::sin(proj);
    out(0, half + k) = std::cos(proj);
  }
  return out;
}

bool SegmentationModel::encoder_trainable() const {
  for (const auto& p : store_) {
    if (p.trainable() && p.name.rfind("encoder.", 0) == 0) return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Forward

Matrix SegmentationModel::encode_image(const Image& image, EncoderCache* cache) const {
  const auto& c = config_;
  if (image.rows() != c.input_size || image.cols() != c.input_size) {
    throw InvalidInputError("image is " + std::to_string(image.rows()) + "x" +
                            std::to_string(image.cols()) + ", model expects " +
                            std::to_string(c.input_size) + "x" + std::to_string(c.input_size));
  }
  const int g = c.grid();
  const int p = c.patch_size;
  Matrix patches(c.tokens(), p * p);
  for (int i = 0; i < g; ++i) {
    for (int j = 0; j < g; ++j) {
      for (int a = 0; a < p; ++a) {
        for (int b = 0; b < p; ++b) patches(i * g + j, a * p + b) = image(i * p + a, j * p + b);
      }
    }
  }
  Matrix tok = patch_embed_.forward(store_, patches, nullptr);
  if (c.use_pos_embed) tok += store_[pos_embed_].value;
  if (cache) cache->blocks.assign(blocks_.size(), {});
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    auto* bc = cache ? &cache->blocks[b] : nullptr;
    const auto& blk = blocks_[b];
    const Matrix h = blk.ln1.forward(store_, tok, bc ? &bc->ln1 : nullptr);
    tok += blk.attn.forward(store_, h, h, h, bc ? &bc->attn : nullptr);
    const Matrix h2 = blk.ln2.forward(store_, tok, bc ? &bc->ln2 : nullptr);
    tok += blk.mlp.forward(store_, h2, bc ? &bc->mlp : nullptr);
  }
  const Matrix n = neck_.forward(store_, tok, cache ? &cache->neck : nullptr);
  return neck_norm_.forward(store_, n, cache ? &cache->neck_norm : nullptr);
}

Matrix SegmentationModel::encode_point(const PointPrompt& prompt) const {
  const int s = config_.input_size;
  if (prompt.row < 0 || prompt.col < 0 || prompt.row >= s || prompt.col >= s) {
    throw InvalidInputError("point (" + std::to_string(prompt.row) + ", " +
                            std::to_string(prompt.col) + ") outside the " + std::to_string(s) +
                            " px input");
  }
  Matrix e = fourier((prompt.col + 0.5) / s, (prompt.row + 0.5) / s);
  e += store_[point_embed_].value;
  return e;
}

MaskLogits SegmentationModel::decode_masks(const Matrix& image_embedding,
                                           const Matrix& prompt_embedding,
                                           DecoderCache* cache) const {
  const auto& c = config_;
  const int dd = c.decoder_dim;
  if (image_embedding.rows() != c.tokens() || image_embedding.cols() != dd) {
    throw InvalidInputError("image embedding shape does not match the model config");
  }
  if (prompt_embedding.rows() != 1 || prompt_embedding.cols() != dd) {
    throw InvalidInputError("prompt embedding shape does not match the model config");
  }
  Matrix tokens(3, dd);
  tokens.topRows(2) = store_[mask_tokens_].value;
  tokens.row(2) = prompt_embedding.row(0);
  Matrix keys = image_embedding.rowwise() + store_[no_mask_embed_].value.row(0);
  const Matrix& qpe = tokens;
  const Matrix& kpe = image_pe_;
  Matrix queries = tokens;

  if (cache) cache->layers.assign(decoder_layers_.size(), {});
  for (std::size_t l = 0; l < decoder_layers_.size(); ++l) {
    const auto& layer = decoder_layers_[l];
    auto* lc = cache ? &cache->layers[l] : nullptr;
    if (l == 0) {
      queries = layer.self_attn.forward(store_, queries, queries, queries, lc ? &lc->self_attn : nullptr);
    } else {
      const Matrix qq = queries + qpe;
      queries += layer.self_attn.forward(store_, qq, qq, queries, lc ? &lc->self_attn : nullptr);
    }
    queries = layer.norm1.forward(store_, queries, lc ? &lc->norm1 : nullptr);
    {
      const Matrix qq = queries + qpe;
      const Matrix kk = keys + kpe;
      queries += layer.token_to_image.forward(store_, qq, kk, keys, lc ? &lc->token_to_image : nullptr);
      queries = layer.norm2.forward(store_, queries, lc ? &lc->norm2 : nullptr);
    }
    queries += layer.mlp.forward(store_, queries, lc ? &lc->mlp : nullptr);
    queries = layer.norm3.forward(store_, queries, lc ? &lc->norm3 : nullptr);
    {
      const Matrix qq = queries + qpe;
      const Matrix kk = keys + kpe;
      keys += layer.image_to_token.forward(store_, kk, qq, queries, lc ? &lc->image_to_token : nullptr);
      keys = layer.norm4.forward(store_, keys, lc ? &lc->norm4 : nullptr);
    }
  }
  {
    const Matrix qq = queries + qpe;
    const Matrix kk = keys + kpe;
    queries += final_attn_.forward(store_, qq, kk, keys, cache ? &cache->final_attn : nullptr);
    queries = final_norm_.forward(store_, queries, cache ? &cache->final_norm : nullptr);
  }

  // Output heads.
  Matrix x = keys;
  int side = c.grid();
  if (cache) {
    cache->upscale.assign(upscale_.size(), {});
    cache->upscale_norm.assign(upscale_norm_.size(), {});
    cache->upscale_pre_gelu.assign(upscale_.size(), {});
    cache->hyper.assign(hyper_.size(), {});
  }
  for (std::size_t s = 0; s < upscale_.size(); ++s) {
    x = pixel_shuffle(upscale_[s].forward(store_, x, cache ? &cache->upscale[s] : nullptr), side);
    side *= 2;
    if (s < upscale_norm_.size()) x = upscale_norm_[s].forward(store_, x, cache ? &cache->upscale_norm[s] : nullptr);
    if (cache) cache->upscale_pre_gelu[s] = x;
    x = nn::gelu(x);
  }
  Matrix hyper_in(2, x.cols());
  for (int i = 0; i < 2; ++i) {
    hyper_in.row(i) = hyper_[static_cast<std::size_t>(i)].forward(
        store_, queries.row(i), cache ? &cache->hyper[static_cast<std::size_t>(i)] : nullptr);
  }
  const Matrix low = x * hyper_in.transpose();  // low_res^2 x 2
  MaskLogits out;
  for (int ch = 0; ch < 2; ++ch) {
    const Matrix map = low.col(ch).reshaped<Eigen::RowMajor>(side, side);
    Matrix up = upsample_ * map * upsample_.transpose();
    (ch == 0 ? out.background : out.target) = std::move(up);
  }
  if (cache) {
    cache->hyper_in = std::move(hyper_in);
    cache->upscaled = std::move(x);
  }
  return out;
}

MaskLogits SegmentationModel::forward(const Image& image, const PointPrompt& prompt,
                                      ForwardCache* cache) const {
  const Matrix emb = encode_image(image, cache ? &cache->encoder : nullptr);
  return decode_masks(emb, encode_point(prompt), cache ? &cache->decoder : nullptr);
}

// ---------------------------------------------------------------------------
// Backward

void SegmentationModel::backward(const MaskLogits& grad, const ForwardCache& cache) {
  const auto& c = config_;
  const auto& dc = cache.decoder;
  const int side = c.low_res();

  // Logits -> low-resolution maps -> head inputs.
  Matrix dlow(static_cast<Eigen::Index>(side) * side, 2);
  for (int ch = 0; ch < 2; ++ch) {
    const Matrix dmap = upsample_.transpose() * (ch == 0 ? grad.background : grad.target) * upsample_;
    dlow.col(ch) = dmap.reshaped<Eigen::RowMajor>();
  }
  Matrix dx = dlow * dc.hyper_in;                         // low_res^2 x C
  const Matrix dhyper = dlow.transpose() * dc.upscaled;   // 2 x C

  Matrix dq = Matrix::Zero(3, c.decoder_dim);
  for (int i = 0; i < 2; ++i) {
    dq.row(i) = hyper_[static_cast<std::size_t>(i)].backward(store_, dhyper.row(i),
                                                             dc.hyper[static_cast<std::size_t>(i)]);
  }
  int s_side = side;
  for (std::size_t s = upscale_.size(); s-- > 0;) {
    dx = nn::gelu_backward(dc.upscale_pre_gelu[s], dx);
    if (s < upscale_norm_.size()) dx = upscale_norm_[s].backward(store_, dx, dc.upscale_norm[s]);
    s_side /= 2;
    dx = upscale_[s].backward(store_, pixel_unshuffle(dx, s_side), dc.upscale[s]);
  }
  Matrix dk = std::move(dx);
  Matrix dqpe = Matrix::Zero(3, c.decoder_dim);

  {
    const Matrix dpre = final_norm_.backward(store_, dq, dc.final_norm);
    const auto g = final_attn_.backward(store_, dpre, dc.final_attn);
    dq = dpre + g.dq;
    dqpe += g.dq;
    dk += g.dk + g.dv;
  }
  for (std::size_t l = decoder_layers_.size(); l-- > 0;) {
    const auto& layer = decoder_layers_[l];
    const auto& lc = dc.layers[l];
    {
      const Matrix dpre = layer.norm4.backward(store_, dk, lc.norm4);
      const auto g = layer.image_to_token.backward(store_, dpre, lc.image_to_token);
      dk = dpre + g.dq;
      dq += g.dk + g.dv;
      dqpe += g.dk;
    }
    {
      const Matrix dpre = layer.norm3.backward(store_, dq, lc.norm3);
      dq = dpre + layer.mlp.backward(store_, dpre, lc.mlp);
    }
    {
      const Matrix dpre = layer.norm2.backward(store_, dq, lc.norm2);
      const auto g = layer.token_to_image.backward(store_, dpre, lc.token_to_image);
      dq = dpre + g.dq;
      dqpe += g.dq;
      dk += g.dk + g.dv;
    }
    const Matrix dpre = layer.norm1.backward(store_, dq, lc.norm1);
    const auto g = layer.self_attn.backward(store_, dpre, lc.self_attn);
    if (l == 0) {
      dq = g.dq + g.dk + g.dv;
    } else {
      dq = dpre + g.dq + g.dk + g.dv;
      dqpe += g.dq + g.dk;
    }
  }
  const Matrix dtokens = dq + dqpe;
  auto& mask_tokens = store_[mask_tokens_];
  if (mask_tokens.trainable()) mask_tokens.grad += dtokens.topRows(2);
  auto& point = store_[point_embed_];
  if (point.trainable()) point.grad.row(0) += dtokens.row(2);
  auto& dense = store_[no_mask_embed_];
  if (dense.trainable()) dense.grad.row(0) += dk.colwise().sum();

  if (!encoder_trainable()) return;
  const auto& ec = cache.encoder;
  Matrix d = neck_norm_.backward(store_, dk, ec.neck_norm);
  d = neck_.backward(store_, d, ec.neck);
  for (std::size_t b = blocks_.size(); b-- > 0;) {
    const auto& blk = blocks_[b];
    const auto& bc = ec.blocks[b];
    d += blk.ln2.backward(store_, blk.mlp.backward(store_, d, bc.mlp), bc.ln2);
    const auto g = blk.attn.backward(store_, d, bc.attn);
    d += blk.ln1.backward(store_, g.dq + g.dk + g.dv, bc.ln1);
  }
}

Mask SegmentationModel::predict_mask(const Image& image, const PointPrompt& prompt) const {
  const MaskLogits l = forward(image, prompt);
  return (l.target.array() > l.background.array()).cast<std::uint8_t>().matrix();
}

SegmentationModel SegmentationModel::merged() const {
  SegmentationModel m = *this;
  for (auto& blk : m.blocks_) blk.attn.fold_lora(m.store_);
  for (auto& layer : m.decoder_layers_) {
    layer.self_attn.fold_lora(m.store_);
    layer.token_to_image.fold_lora(m.store_);
    layer.image_to_token.fold_lora(m.store_);
  }
  m.final_attn_.fold_lora(m.store_);

  // Rebuild without adapter slots so the folded model saves and reloads as a
  // plain model.
  ModelConfig plain = config_;
  plain.lora.image_encoder = false;
  plain.lora.mask_decoder = false;
  SegmentationModel out(plain, seed_);
  out.import_arrays(m.export_group([](ParamGroup g) { return g != ParamGroup::kLora; }));
  out.image_pe_ = m.image_pe_;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

NamedArrays SegmentationModel::export_group(const std::function<bool(ParamGroup)>& keep) const {
  NamedArrays out;
  for (const auto& p : store_) {
    if (keep(p.group)) out.emplace_back(p.name, p.value);
  }
  return out;
}

void SegmentationModel::import_arrays(const NamedArrays& arrays) {
  for (const auto& [name, value] : arrays) {
    Parameter* p = store_.find(name);
    if (p == nullptr) throw ParseError("checkpoint has unknown parameter " + name);
    if (value.rows() != p->rows || value.cols() != p->cols) {
      throw ParseError("checkpoint parameter " + name + " has the wrong shape");
    }
    p->value = value;
  }
}

void SegmentationModel::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "model.json", std::ios::trunc);
    out << json{{"config", config_}, {"seed", seed_}}.dump(2) << '\n';
    if (!out) throw IoError("cannot write " + (dir / "model.json").string());
  }
  write_named_arrays(dir / "base.fsa", export_group([](ParamGroup g) { return g == ParamGroup::kFrozen; }));
  write_named_arrays(dir / "adapters.fsa", export_group([](ParamGroup g) { return g == ParamGroup::kLora; }));
  write_named_arrays(dir / "heads.fsa", export_group([](ParamGroup g) {
                       return g == ParamGroup::kPrompt || g == ParamGroup::kHead;
                     }));
}

SegmentationModel SegmentationModel::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "model.json");
  if (!in) throw IoError("cannot open " + (dir / "model.json").string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError((dir / "model.json").string() + ": " + e.what());
  }
  SegmentationModel m(doc.at("config").get<ModelConfig>(), doc.at("seed").get<std::uint64_t>());
  for (const char* f : {"base.fsa", "adapters.fsa", "heads.fsa"}) {
    if (!std::filesystem::exists(dir / f)) throw IoError("checkpoint is missing " + (dir / f).string());
    m.import_arrays(read_named_arrays(dir / f));
  }
  // image_pe_ derives from the (possibly imported) Fourier frequencies.
  const int g = m.config_.grid();
  for (int i = 0; i < g; ++i) {
    for (int j = 0; j < g; ++j) m.image_pe_.row(i * g + j) = m.fourier((j + 0.5) / g, (i + 0.5) / g);
  }
  return m;
}

}  // namespace fewseg
