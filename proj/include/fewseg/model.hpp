#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include <json.hpp>

#include "fewseg/array_io.hpp"
#include "fewseg/lora.hpp"
#include "fewseg/nn.hpp"
#include "fewseg/params.hpp"
#include "fewseg/types.hpp"

namespace fewseg {

struct ModelConfig {
  int input_size = 128;  // square model input; slices are resized upstream
  int patch_size = 8;
  int embed_dim = 96;
  int depth = 4;
  int num_heads = 4;
  int mlp_ratio = 4;
  bool use_pos_embed = true;
  int decoder_dim = 64;
  int decoder_depth = 2;
  int decoder_heads = 4;
  int decoder_mlp_dim = 128;
  int upscale_stages = 2;  // each doubles the token grid
  LoraConfig lora;

  void validate() const;
  int grid() const { return input_size / patch_size; }
  int tokens() const { return grid() * grid(); }
  int low_res() const { return grid() << upscale_stages; }
  int head_channels() const { return decoder_dim >> (upscale_stages + 1); }

  static ModelConfig desk();       // 128 px, ViT depth 4, width 96
  static ModelConfig small();      // 64 px variant used for CPU experiment runs
  static ModelConfig toy();        // 32 px configuration for finite-difference checks
  static ModelConfig base_like();  // ViT-B image encoder widths, for parameter accounting only
};

void to_json(nlohmann::json& j, const LoraConfig& c);
void from_json(const nlohmann::json& j, LoraConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Two-channel logits at input resolution: channel 0 background, channel 1 the
// prompted target.
struct MaskLogits {
  Matrix background;
  Matrix target;
};

struct EncoderBlockCache {
  nn::LayerNormCache ln1, ln2;
  nn::AttentionCache attn;
  nn::MlpCache mlp;
};

struct EncoderCache {
  std::vector<EncoderBlockCache> blocks;
  nn::LinearCache neck;
  nn::LayerNormCache neck_norm;
};

struct DecoderLayerCache {
  nn::AttentionCache self_attn, token_to_image, image_to_token;
  nn::LayerNormCache norm1, norm2, norm3, norm4;
  nn::MlpCache mlp;
};

struct DecoderCache {
  std::vector<DecoderLayerCache> layers;
  nn::AttentionCache final_attn;
  nn::LayerNormCache final_norm;
  std::vector<nn::LinearCache> upscale;
  std::vector<nn::LayerNormCache> upscale_norm;
  std::vector<Matrix> upscale_pre_gelu;
  std::vector<nn::MlpCache> hyper;
  Matrix hyper_in;   // 2 x head_channels
  Matrix upscaled;   // low_res^2 x head_channels
};

struct ForwardCache {
  EncoderCache encoder;
  DecoderCache decoder;
};

// Point-promptable segmenter: ViT image encoder, Fourier-feature point
// encoder and a two-way-transformer mask decoder with two output tokens.
class SegmentationModel {
 public:
  // Frozen base weights come from derive_seed(seed, "base"), so they do not
  // depend on the LoRA configuration.
  SegmentationModel(const ModelConfig& config, std::uint64_t seed);
  // Parameter shapes without storage, for accounting on large configs.
  static SegmentationModel shapes_only(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }

  // Image of input_size^2 -> tokens x decoder_dim embedding grid.
  Matrix encode_image(const Image& image, EncoderCache* cache = nullptr) const;
  // 1 x decoder_dim sparse embedding; the class id is not encoded.
  Matrix encode_point(const PointPrompt& prompt) const;
  MaskLogits decode_masks(const Matrix& image_embedding, const Matrix& prompt_embedding,
                          DecoderCache* cache = nullptr) const;

  MaskLogits forward(const Image& image, const PointPrompt& prompt,
                     ForwardCache* cache = nullptr) const;
  // Accumulates parameter gradients of a scalar loss given dloss/dlogits.
  void backward(const MaskLogits& grad, const ForwardCache& cache);

  // Per-pixel argmax of the two channels (ties go to background).
  Mask predict_mask(const Image& image, const PointPrompt& prompt) const;

  // Copy with every adapter folded into its base projection.
  SegmentationModel merged() const;

  // Checkpoint directory: model.json, base.fsa (frozen), adapters.fsa (LoRA
  // factors), heads.fsa (prompt embeddings and output heads).
  void save(const std::filesystem::path& dir) const;
  static SegmentationModel load(const std::filesystem::path& dir);
  NamedArrays export_group(const std::function<bool(ParamGroup)>& keep) const;
  // Overwrites parameters by name; unknown names or shape mismatches throw.
  void import_arrays(const NamedArrays& arrays);

 private:
  SegmentationModel(const ModelConfig& config, std::uint64_t seed, bool materialize);
  void build();
  Matrix fourier(double x, double y) const;  // coordinates in [0, 1]
  bool encoder_trainable() const;

  ModelConfig config_;
  std::uint64_t seed_ = 0;
  ParameterStore store_;

  // Image encoder.
  nn::Linear patch_embed_;
  ParamId pos_embed_ = 0;
  struct Block {
    nn::LayerNorm ln1, ln2;
    nn::Attention attn;
    nn::Mlp mlp;
  };
  std::vector<Block> blocks_;
  nn::Linear neck_;
  nn::LayerNorm neck_norm_;

  // Prompt encoder.
  ParamId gaussian_ = 0;       // 2 x decoder_dim/2 Fourier frequencies
  ParamId point_embed_ = 0;    // learned positive-point vector
  ParamId no_mask_embed_ = 0;  // dense prompt embedding added to image tokens
  Matrix image_pe_;            // tokens x decoder_dim

  // Mask decoder.
  ParamId mask_tokens_ = 0;  // 2 x decoder_dim
  struct DecoderLayer {
    nn::Attention self_attn, token_to_image, image_to_token;
    nn::LayerNorm norm1, norm2, norm3, norm4;
    nn::Mlp mlp;
  };
  std::vector<DecoderLayer> decoder_layers_;
  nn::Attention final_attn_;
  nn::LayerNorm final_norm_;
  std::vector<nn::Linear> upscale_;
  std::vector<nn::LayerNorm> upscale_norm_;
  std::vector<nn::Mlp> hyper_;
  Matrix upsample_;  // input_size x low_res bilinear interpolation
};

}  // namespace fewseg
