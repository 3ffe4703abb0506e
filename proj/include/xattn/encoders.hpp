#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "xattn/params.hpp"
#include "xattn/rng.hpp"
#include "xattn/tensor.hpp"

namespace xattn {

struct SchemaError : std::runtime_error {
  explicit SchemaError(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// Image encoder: small strided CNN -> grid-pooled tokens -> shared projection
// ---------------------------------------------------------------------------

struct ImageEncoderConfig {
  int image_size = 64;  // square grayscale input
  std::vector<int> conv_channels{8, 16, 32};
  int kernel_size = 3;
  int stride = 2;
  int pooled_feature_dim = 32;  // channels entering the token projection
  int projection_dim = 64;      // d_i
  double dropout_p = 0.2;
  int token_count = 4;  // perfect-square grid of pooled regions

  int grid_side() const {
    const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(token_count))));
    return g;
  }

  void validate() const {
    if (conv_channels.empty()) throw ParamError("image encoder: need at least one conv block");
    if (pooled_feature_dim != conv_channels.back())
      throw ParamError("image encoder: pooled_feature_dim must equal last conv width");
    if (token_count < 1 || grid_side() * grid_side() != token_count)
      throw ParamError("image encoder: token_count must be a perfect square >= 1");
    if (dropout_p < 0 || dropout_p >= 1) throw ParamError("image encoder: dropout_p in [0,1)");
    int side = image_size;
    for (size_t i = 0; i < conv_channels.size(); ++i) {
      if (side < kernel_size)
        throw ParamError("image encoder: feature map shrinks below kernel size");
      side = (side - kernel_size) / stride + 1;
    }
    if (side < grid_side()) throw ParamError("image encoder: final map smaller than token grid");
  }
};

template <typename T>
struct ImageEncoderParams {
  std::vector<Tensor<T>> conv_w, conv_b;
  Tensor<T> proj_w, proj_b;

  void init(const ImageEncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    conv_w.clear();
    conv_b.clear();
    int in_ch = 1;
    for (size_t i = 0; i < cfg.conv_channels.size(); ++i) {
      const int out_ch = cfg.conv_channels[i];
      Rng rng(derive_seed(seed, "img_conv", static_cast<int>(i)));
      auto w = Tensor<T>::zeros({out_ch, in_ch, cfg.kernel_size, cfg.kernel_size}, true);
      init_uniform_fanin(w, in_ch * cfg.kernel_size * cfg.kernel_size, rng);
      conv_w.push_back(w);
      conv_b.push_back(Tensor<T>::zeros({out_ch}, true));
      in_ch = out_ch;
    }
    Rng rng(derive_seed(seed, "img_proj"));
    proj_w = Tensor<T>::zeros({cfg.pooled_feature_dim, cfg.projection_dim}, true);
    init_uniform_fanin(proj_w, cfg.pooled_feature_dim, rng);
    proj_b = Tensor<T>::zeros({cfg.projection_dim}, true);
  }

  void collect(const std::string& prefix, ParamRegistry<T>& out) {
    for (size_t i = 0; i < conv_w.size(); ++i) {
      out.push_back({prefix + ".conv" + std::to_string(i) + ".w", &conv_w[i], ParamKind::kWeight});
      out.push_back({prefix + ".conv" + std::to_string(i) + ".b", &conv_b[i], ParamKind::kBias});
    }
    out.push_back({prefix + ".proj.w", &proj_w, ParamKind::kWeight});
    out.push_back({prefix + ".proj.b", &proj_b, ParamKind::kBias});
  }
};

// images [b,1,H,W] -> tokens [b, token_count, projection_dim]
template <typename T>
Tensor<T> encode_image(const Tensor<T>& images, const ImageEncoderConfig& cfg,
                       ImageEncoderParams<T>& params, Mode mode, Rng& dropout_rng) {
  if (images.ndim() != 4 || images.dim(1) != 1 || images.dim(2) != cfg.image_size ||
      images.dim(3) != cfg.image_size)
    throw ShapeError("encode_image: expected [b,1," + std::to_string(cfg.image_size) + "," +
                     std::to_string(cfg.image_size) + "], got " + shape_str(images.shape()));
  Tensor<T> h = images;
  for (size_t i = 0; i < params.conv_w.size(); ++i)
    h = relu(conv2d(h, params.conv_w[i], params.conv_b[i], cfg.stride));
  const int g = cfg.grid_side();
  auto tokens = grid_pool(h, g, g);  // [b, N, C]
  auto projected = relu(add_bias(linear(tokens, params.proj_w), params.proj_b));
  return dropout(projected, cfg.dropout_p, mode, dropout_rng);
}

// ---------------------------------------------------------------------------
// Metadata encoder: per-field embeddings refined by a shared two-layer MLP
// ---------------------------------------------------------------------------

struct FieldSpec {
  std::string name;
  int width = 1;  // columns this field occupies in the input matrix
};

struct MetadataEncoderConfig {
  std::vector<FieldSpec> field_spec;
  int hidden_dim = 128;
  int embed_dim = 64;  // d_m
  double dropout_p = 0.2;

  int input_dim() const {
    int d = 0;
    for (const auto& f : field_spec) d += f.width;
    return d;
  }

  void validate() const {
    if (field_spec.empty()) throw ParamError("metadata encoder: empty field_spec");
    for (const auto& f : field_spec)
      if (f.width < 1) throw ParamError("metadata encoder: field width must be >= 1");
    for (size_t i = 0; i < field_spec.size(); ++i)
      for (size_t j = i + 1; j < field_spec.size(); ++j)
        if (field_spec[i].name == field_spec[j].name)
          throw ParamError("metadata encoder: duplicate field name " + field_spec[i].name);
    if (dropout_p < 0 || dropout_p >= 1) throw ParamError("metadata encoder: dropout_p in [0,1)");
  }
};

template <typename T>
struct MetadataEncoderParams {
  std::vector<Tensor<T>> field_w, field_b;  // aligned with field_spec
  Tensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;

  // Field embeddings are seeded by field name so that reordering fields in
  // both the data and the spec leaves per-name parameters unchanged.
  void init(const MetadataEncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    field_w.clear();
    field_b.clear();
    for (const auto& f : cfg.field_spec) {
      Rng rng(derive_seed(seed, "meta_embed", f.name));
      auto w = Tensor<T>::zeros({f.width, cfg.embed_dim}, true);
      init_uniform_fanin(w, f.width, rng);
      field_w.push_back(w);
      field_b.push_back(Tensor<T>::zeros({cfg.embed_dim}, true));
    }
    Rng rng(derive_seed(seed, "meta_mlp"));
    mlp_w1 = Tensor<T>::zeros({cfg.embed_dim, cfg.hidden_dim}, true);
    init_uniform_fanin(mlp_w1, cfg.embed_dim, rng);
    mlp_b1 = Tensor<T>::zeros({cfg.hidden_dim}, true);
    mlp_w2 = Tensor<T>::zeros({cfg.hidden_dim, cfg.embed_dim}, true);
    init_uniform_fanin(mlp_w2, cfg.hidden_dim, rng);
    mlp_b2 = Tensor<T>::zeros({cfg.embed_dim}, true);
  }

  void collect(const std::string& prefix, ParamRegistry<T>& out,
               const MetadataEncoderConfig& cfg) {
    for (size_t i = 0; i < field_w.size(); ++i) {
      const auto& nm = cfg.field_spec[i].name;
      out.push_back({prefix + ".embed." + nm + ".w", &field_w[i], ParamKind::kWeight});
      out.push_back({prefix + ".embed." + nm + ".b", &field_b[i], ParamKind::kBias});
    }
    out.push_back({prefix + ".mlp.w1", &mlp_w1, ParamKind::kWeight});
    out.push_back({prefix + ".mlp.b1", &mlp_b1, ParamKind::kBias});
    out.push_back({prefix + ".mlp.w2", &mlp_w2, ParamKind::kWeight});
    out.push_back({prefix + ".mlp.b2", &mlp_b2, ParamKind::kBias});
  }
};

template <typename T>
struct FieldTokenBatch {
  Tensor<T> tokens;  // [b, F, d_m]
  std::vector<std::string> field_names;
};

// Per-field linear embeddings, before the shared MLP. [b, F, d_m]
template <typename T>
Tensor<T> metadata_field_embeddings(const Tensor<T>& meta, const MetadataEncoderConfig& cfg,
                                    MetadataEncoderParams<T>& params) {
  if (meta.ndim() != 2 || meta.dim(1) != cfg.input_dim()) {
    std::string fields;
    for (const auto& f : cfg.field_spec) fields += " " + f.name + "(" + std::to_string(f.width) + ")";
    throw SchemaError("encode_metadata: input " + shape_str(meta.shape()) + " does not match" +
                      fields);
  }
  const int b = meta.dim(0);
  std::vector<Tensor<T>> tokens;
  int col = 0;
  for (size_t i = 0; i < cfg.field_spec.size(); ++i) {
    const int w = cfg.field_spec[i].width;
    auto piece = slice(meta, 1, col, w);  // [b, w]
    auto embedded = add_bias(linear(piece, params.field_w[i]), params.field_b[i]);
    tokens.push_back(reshape(embedded, {b, 1, cfg.embed_dim}));
    col += w;
  }
  return concat(tokens, 1);  // [b, F, d_m]
}

template <typename T>
FieldTokenBatch<T> encode_metadata(const Tensor<T>& meta, const MetadataEncoderConfig& cfg,
                                   MetadataEncoderParams<T>& params, Mode mode,
                                   Rng& dropout_rng) {
  auto embedded = metadata_field_embeddings(meta, cfg, params);
  auto h = relu(add_bias(linear(embedded, params.mlp_w1), params.mlp_b1));
  h = dropout(h, cfg.dropout_p, mode, dropout_rng);
  auto refined = add_bias(linear(h, params.mlp_w2), params.mlp_b2);
  FieldTokenBatch<T> out;
  out.tokens = refined;
  for (const auto& f : cfg.field_spec) out.field_names.push_back(f.name);
  return out;
}

}  // namespace xattn
