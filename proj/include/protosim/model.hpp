#pragma once

// Model state shared by training and inference: the (frozen) backbone, the
// prototype bank and the DINO projection head, plus the checkpoint container.

#include "protosim/autograd.hpp"
#include "protosim/backbone.hpp"
#include "protosim/protosim_layer.hpp"

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>

namespace protosim {

inline constexpr const char* kCheckpointFormat = "protosim-ckpt-v1";

/// What feeds the projection head: the class-token prototype embedding alone,
/// or that plus the mean of the patch-token prototype embeddings.
enum class HeadInput { class_token, class_plus_mean_patch };

const char* to_string(HeadInput h);
HeadInput parse_head_input(const std::string& s);

/// Three-layer MLP, L2-normalized bottleneck, weight-normalized output layer.
struct HeadParams {
  Matrix fc1_w, fc1_b;  // hidden x D
  Matrix fc2_w, fc2_b;  // hidden x hidden
  Matrix fc3_w, fc3_b;  // bottleneck x hidden
  Matrix last_w;        // out x bottleneck, rows normalized at use

  int output_dim() const { return static_cast<int>(last_w.rows()); }
  void visit(const std::function<void(const std::string&, Matrix&)>& fn);
  void visit(const std::function<void(const std::string&, const Matrix&)>& fn) const;
};

HeadParams init_head(int input_dim, int hidden_dim, int bottleneck_dim, int output_dim, Rng& rng);

ag::Var<float> head_forward(ag::ParameterBinder<float>& bind, const HeadParams& head, ag::Var<float> input);

struct ModelState {
  std::shared_ptr<BackboneHandle> backbone;
  PrototypeBank bank;
  HeadParams head;

  /// Deep copy; the backbone is shared unless `copy_backbone`.
  ModelState clone(bool copy_backbone) const;
};

using StudentState = ModelState;

struct TeacherState : ModelState {
  Matrix center;  // 1 x head output dim
};

/// Prototype bank initialised with N(0, 1) entries scaled by 1/sqrt(D).
PrototypeBank init_bank(int prototypes, int dim, Rng& rng);

struct CropOutput {
  ag::Var<float> tokens;      // (N+1) x D
  ag::Var<float> embeddings;  // (N+1) x D
  ag::Var<float> assignment;  // (N+1) x K
  ag::Var<float> logits;      // 1 x head output dim
};

/// Backbone -> ProtoSim -> head for one crop. `backbone_bind` and `model_bind`
/// decide which parameters receive gradients. Throws Error naming the stage
/// that produced non-finite activations.
CropOutput crop_forward(ag::ParameterBinder<float>& backbone_bind, ag::ParameterBinder<float>& model_bind,
                        const ModelState& state, const Matrix& patches, AssignMode mode, const Matrix* noise,
                        HeadInput head_input);

/// Resizes to the backbone's native input size when needed.
Image prepare_image(const BackboneHandle& backbone, const Image& image);

/// Noise-free K x (N+1) logits for one image.
Matrix image_logits(const ModelState& model, const Image& image);

struct Checkpoint {
  std::string config_json;  // echo of the training configuration
  int epoch = -1;           // last completed epoch
  std::string rng_state;
  StudentState student;
  TeacherState teacher;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// FNV-1a fingerprint of bank, head and backbone parameters.
std::string model_hash(const ModelState& model);

}  // namespace protosim
