#pragma once

#include <optional>
#include <string>
#include <vector>

#include "xattn/attention.hpp"
#include "xattn/encoders.hpp"
#include "xattn/losses.hpp"
#include "xattn/params.hpp"
#include "xattn/tensor.hpp"

namespace xattn {

enum class FusionMode {
  kBidirectional,
  kImgToMeta,
  kMetaToImg,
  kConcat,
  kImageOnly,
  kMetadataOnly,
};

enum class LossKind { kWeightedSmoothL1, kMse, kHuber };

inline std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::kBidirectional: return "bidirectional";
    case FusionMode::kImgToMeta: return "img_to_meta";
    case FusionMode::kMetaToImg: return "meta_to_img";
    case FusionMode::kConcat: return "concat";
    case FusionMode::kImageOnly: return "image_only";
    case FusionMode::kMetadataOnly: return "metadata_only";
  }
  return "?";
}

inline FusionMode fusion_mode_from_string(const std::string& s) {
  for (auto m : {FusionMode::kBidirectional, FusionMode::kImgToMeta, FusionMode::kMetaToImg,
                 FusionMode::kConcat, FusionMode::kImageOnly, FusionMode::kMetadataOnly})
    if (to_string(m) == s) return m;
  throw ParamError("unknown fusion_mode: " + s);
}

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::kWeightedSmoothL1: return "weighted_smooth_l1";
    case LossKind::kMse: return "mse";
    case LossKind::kHuber: return "huber";
  }
  return "?";
}

inline LossKind loss_kind_from_string(const std::string& s) {
  for (auto k : {LossKind::kWeightedSmoothL1, LossKind::kMse, LossKind::kHuber})
    if (to_string(k) == s) return k;
  throw ParamError("unknown loss: " + s);
}

struct OptimizerConfig {
  double lr = 1e-4;
  double weight_decay = 3e-5;
  double l1 = 5e-7;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (lr < 0 || weight_decay < 0 || l1 < 0) throw ParamError("optimizer: rates must be >= 0");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw ParamError("optimizer: betas in [0,1)");
  }
};

struct TrainingConfig {
  int epochs = 400;
  int train_batch = 32;
  int eval_batch = 8;

  void validate() const {
    if (epochs < 1 || train_batch < 1 || eval_batch < 1)
      throw ParamError("training: epochs and batch sizes must be positive");
  }
};

// Every architectural and training hyperparameter; single source of truth.
struct FusionModelConfig {
  ImageEncoderConfig image_encoder;
  MetadataEncoderConfig metadata_encoder;  // field_spec comes from the dataset schema
  CrossAttentionBranchConfig attention;    // dims are filled per branch at build time
  FusionMode fusion_mode = FusionMode::kBidirectional;
  LossKind loss = LossKind::kWeightedSmoothL1;
  WeightedSmoothL1Config loss_cfg;
  OptimizerConfig optimizer;
  TrainingConfig training;
  double head_dropout_p = 0.05;
  std::uint64_t seed = 42;

  bool uses_images() const {
    return fusion_mode != FusionMode::kMetadataOnly;
  }
  bool uses_metadata() const {
    return fusion_mode != FusionMode::kImageOnly;
  }

  int head_input_dim() const {
    const int di = image_encoder.projection_dim;
    const int dm = metadata_encoder.embed_dim;
    switch (fusion_mode) {
      case FusionMode::kBidirectional:
      case FusionMode::kConcat: return di + dm;
      case FusionMode::kImgToMeta:
      case FusionMode::kImageOnly: return di;
      case FusionMode::kMetaToImg:
      case FusionMode::kMetadataOnly: return dm;
    }
    return di + dm;
  }

  void validate() const {
    image_encoder.validate();
    if (uses_metadata()) metadata_encoder.validate();
    optimizer.validate();
    training.validate();
    loss_cfg.validate();
    if (head_dropout_p < 0 || head_dropout_p >= 1) throw ParamError("head dropout in [0,1)");
    if (image_encoder.projection_dim % attention.n_heads != 0 ||
        metadata_encoder.embed_dim % attention.n_heads != 0)
      throw ParamError("embedding dims must be divisible by n_heads");
  }
};

struct BidirectionalTrace {
  AttentionTrace img_to_meta;  // keys are metadata fields
  AttentionTrace meta_to_img;  // keys are image tokens
};

template <typename T>
class FusionModel {
 public:
  FusionModel(const FusionModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    cfg_.seed = seed;
    if (cfg_.uses_images()) {
      img_params_.emplace();
      img_params_->init(cfg_.image_encoder, derive_seed(seed, "image_encoder"));
    }
    if (cfg_.uses_metadata()) {
      meta_params_.emplace();
      meta_params_->init(cfg_.metadata_encoder, derive_seed(seed, "metadata_encoder"));
    }
    const bool wants_i2m =
        cfg_.fusion_mode == FusionMode::kBidirectional || cfg_.fusion_mode == FusionMode::kImgToMeta;
    const bool wants_m2i =
        cfg_.fusion_mode == FusionMode::kBidirectional || cfg_.fusion_mode == FusionMode::kMetaToImg;
    if (wants_i2m) {
      i2m_cfg_ = cfg_.attention;
      i2m_cfg_.query_dim = cfg_.image_encoder.projection_dim;
      i2m_cfg_.kv_dim = cfg_.metadata_encoder.embed_dim;
      i2m_params_.emplace();
      i2m_params_->init(i2m_cfg_, derive_seed(seed, "img_to_meta"));
    }
    if (wants_m2i) {
      m2i_cfg_ = cfg_.attention;
      m2i_cfg_.query_dim = cfg_.metadata_encoder.embed_dim;
      m2i_cfg_.kv_dim = cfg_.image_encoder.projection_dim;
      m2i_params_.emplace();
      m2i_params_->init(m2i_cfg_, derive_seed(seed, "meta_to_img"));
    }
    Rng rng(derive_seed(seed, "head"));
    head_w_ = Tensor<T>::zeros({cfg_.head_input_dim(), 1}, true);
    init_uniform_fanin(head_w_, cfg_.head_input_dim(), rng);
    head_b_ = Tensor<T>::zeros({1}, true);
  }

  // images [b,1,H,W] (ignored in metadata_only mode), meta [b, input_dim].
  // Returns predictions [b].
  Tensor<T> forward(const Tensor<T>& images, const Tensor<T>& meta, Mode mode, Rng& dropout_rng,
                    BidirectionalTrace* trace = nullptr) {
    Tensor<T> img_tokens, meta_tokens;
    int batch = -1;
    if (cfg_.uses_images()) {
      img_tokens = encode_image(images, cfg_.image_encoder, *img_params_, mode, dropout_rng);
      batch = img_tokens.dim(0);
    }
    if (cfg_.uses_metadata()) {
      meta_tokens =
          encode_metadata(meta, cfg_.metadata_encoder, *meta_params_, mode, dropout_rng).tokens;
      if (batch >= 0 && meta_tokens.dim(0) != batch)
        throw ShapeError("forward: image batch " + std::to_string(batch) + " vs metadata batch " +
                         std::to_string(meta_tokens.dim(0)));
      batch = meta_tokens.dim(0);
    }

    Tensor<T> features;
    switch (cfg_.fusion_mode) {
      case FusionMode::kBidirectional:
        features = fuse_bidirectional(img_tokens, meta_tokens, i2m_cfg_, *i2m_params_, m2i_cfg_,
                                      *m2i_params_, mode, dropout_rng,
                                      trace ? &trace->img_to_meta : nullptr,
                                      trace ? &trace->meta_to_img : nullptr);
        break;
      case FusionMode::kImgToMeta:
        features = branch_forward(img_tokens, meta_tokens, i2m_cfg_, *i2m_params_, mode,
                                  dropout_rng, trace ? &trace->img_to_meta : nullptr);
        break;
      case FusionMode::kMetaToImg:
        features = branch_forward(meta_tokens, img_tokens, m2i_cfg_, *m2i_params_, mode,
                                  dropout_rng, trace ? &trace->meta_to_img : nullptr);
        break;
      case FusionMode::kConcat:
        features = concat<T>({mean_axis(img_tokens, 1), mean_axis(meta_tokens, 1)}, 1);
        break;
      case FusionMode::kImageOnly:
        features = mean_axis(img_tokens, 1);
        break;
      case FusionMode::kMetadataOnly:
        features = mean_axis(meta_tokens, 1);
        break;
    }
    auto dropped = dropout(features, cfg_.head_dropout_p, mode, dropout_rng);
    auto pred = add_bias(linear(dropped, head_w_), head_b_);  // [b, 1]
    return reshape(pred, {batch});
  }

  ParamRegistry<T> parameters() {
    ParamRegistry<T> out;
    if (img_params_) img_params_->collect("img", out);
    if (meta_params_) meta_params_->collect("meta", out, cfg_.metadata_encoder);
    if (i2m_params_) i2m_params_->collect("img_to_meta", out);
    if (m2i_params_) m2i_params_->collect("meta_to_img", out);
    out.push_back({"head.w", &head_w_, ParamKind::kWeight});
    out.push_back({"head.b", &head_b_, ParamKind::kBias});
    return out;
  }

  std::int64_t num_params() {
    std::int64_t n = 0;
    for (const auto& p : parameters()) n += p.tensor->numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor->zero_grad();
  }

  const FusionModelConfig& config() const { return cfg_; }

 private:
  FusionModelConfig cfg_;
  std::optional<ImageEncoderParams<T>> img_params_;
  std::optional<MetadataEncoderParams<T>> meta_params_;
  CrossAttentionBranchConfig i2m_cfg_, m2i_cfg_;
  std::optional<BranchParameters<T>> i2m_params_;
  std::optional<BranchParameters<T>> m2i_params_;
  Tensor<T> head_w_, head_b_;
};

// Loss dispatch on the configured kind.
template <typename T>
Tensor<T> model_loss(LossKind kind, const Tensor<T>& pred, const std::vector<T>& targets,
                     const WeightedSmoothL1Config& cfg) {
  switch (kind) {
    case LossKind::kWeightedSmoothL1: return weighted_smooth_l1(pred, targets, cfg);
    case LossKind::kMse: return mse_loss(pred, targets);
    case LossKind::kHuber: return huber_loss(pred, targets, cfg.beta);
  }
  throw ParamError("model_loss: bad kind");
}

}  // namespace xattn
