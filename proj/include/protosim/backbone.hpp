#pragma once

// Vision-transformer feature extractor producing the (N+1) x D token sequence
// that ProtoSim consumes. Parameter names and layouts follow the common timm
// ViT/DeiT convention so pretrained safetensors weights load directly.

#include "protosim/autograd.hpp"
#include "protosim/common.hpp"
#include "protosim/image.hpp"
#include "protosim/protosim_layer.hpp"
#include "protosim/safetensors.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace protosim {

struct PatchConfig {
  int image_height = 32;
  int image_width = 32;
  int channels = 3;
  int patch_size = 8;
  int embed_dim = 64;
  int depth = 4;
  int heads = 4;
  int mlp_hidden = 256;

  int grid_rows() const { return image_height / patch_size; }
  int grid_cols() const { return image_width / patch_size; }
  int patch_count() const { return grid_rows() * grid_cols(); }
  int token_count() const { return patch_count() + 1; }
  int patch_dim() const { return channels * patch_size * patch_size; }

  /// Throws ContractError unless H and W are divisible by P and D by heads.
  void validate() const;
};

/// Per-channel input normalization that travels with the weights.
struct Normalization {
  std::vector<float> mean{0.485f, 0.456f, 0.406f};
  std::vector<float> stddev{0.229f, 0.224f, 0.225f};
};

struct VitBlockParams {
  Matrix norm1_w, norm1_b;  // 1 x D
  Matrix qkv_w, qkv_b;      // 3D x D, 1 x 3D
  Matrix proj_w, proj_b;    // D x D, 1 x D
  Matrix norm2_w, norm2_b;
  Matrix fc1_w, fc1_b;  // H x D, 1 x H
  Matrix fc2_w, fc2_b;  // D x H, 1 x D
};

struct VitParams {
  Matrix patch_w;    // D x (C*P*P), flattened conv kernel in (c, y, x) order
  Matrix patch_b;    // 1 x D
  Matrix cls_token;  // 1 x D
  Matrix pos_embed;  // (N+1) x D
  std::vector<VitBlockParams> blocks;
  Matrix norm_w, norm_b;

  /// Visits every parameter with its timm-style name.
  void visit(const std::function<void(const std::string&, Matrix&)>& fn);
  void visit(const std::function<void(const std::string&, const Matrix&)>& fn) const;
};

struct BackboneHandle {
  std::string name;
  PatchConfig config;
  Normalization normalization;
  VitParams params;
  bool frozen = true;

  /// FNV-1a fingerprint over every parameter value.
  std::string parameter_hash() const;
};

/// Parsed form of "name[:path][,seed=INT]".
struct WeightDescriptor {
  std::string name;
  std::optional<std::filesystem::path> path;
  std::uint64_t seed = 0;

  static WeightDescriptor parse(const std::string& text);
  std::string str() const;
};

/// Deterministic truncated-normal initialization of a fresh backbone.
BackboneHandle init_backbone(const std::string& name, const PatchConfig& config, std::uint64_t seed);

/// Resolves a descriptor. Toy names ("toy-vit-s8-d64[-l4][-h4][-i32]")
/// initialize from the seed unless a path is given; "deit-s:path" and
/// "vit:path" load safetensors weights. The returned handle is frozen.
BackboneHandle load_pretrained(const std::string& descriptor);

/// Config implied by a toy name, e.g. "toy-vit-s8-d64-l2-h2".
PatchConfig parse_toy_config(const std::string& name);

TensorArchive backbone_to_archive(const BackboneHandle& handle, const std::string& prefix = "");
BackboneHandle backbone_from_archive(const TensorArchive& archive, const std::string& name,
                                     const std::string& prefix = "");
void save_backbone(const BackboneHandle& handle, const std::filesystem::path& path);

/// Normalizes and flattens an image into N x (C*P*P) patch rows (patches in
/// raster order, each in (c, y, x) order). Warns once when normalized values
/// leave [-10, 10].
Matrix patchify(const BackboneHandle& handle, const Image& image);

/// Embedding stage only: patch projection, class token, positional embedding.
Matrix embed_patches(const BackboneHandle& handle, const Matrix& patches);

/// Taped forward through embedding, transformer blocks and final norm.
ag::Var<float> vit_forward(ag::ParameterBinder<float>& bind, const BackboneHandle& handle,
                           const Matrix& patches);

/// Token embeddings for one image; class token first.
TokenBatch encode(const BackboneHandle& handle, const Image& image);

}  // namespace protosim
