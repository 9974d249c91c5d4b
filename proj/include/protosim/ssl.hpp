#pragma once

// DINO-style teacher-student training of the prototype bank and projection
// head. The student sees every crop with gumbel-softmax (soft, later hard
// straight-through) assignment; the teacher sees the two global crops with
// noise-free soft assignment, sharpened and centred.

#include "protosim/augment.hpp"
#include "protosim/dataset.hpp"
#include "protosim/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace protosim {

inline constexpr double kLogFloor = 1e-8;

struct TrainConfig {
  std::string backbone = "toy-vit-s8-d64";
  int batch_size = 128;
  double learning_rate = 5e-5;
  int epochs = 20;
  int soft_epochs = 15;
  int prototypes = 8192;
  int local_crops = 8;
  double teacher_momentum = 0.996;
  double teacher_temp = 0.04;
  double student_temp = 0.1;
  double center_momentum = 0.9;
  int head_hidden_dim = 256;
  int head_bottleneck_dim = 64;
  int head_output_dim = 256;
  HeadInput head_input = HeadInput::class_plus_mean_patch;
  bool train_backbone = false;
  bool teacher_hard_after_switch = false;
  double grad_clip = 3.0;  // per-parameter gradient norm cap; 0 disables
  std::uint64_t seed = 0;
  int workers = 1;
  AugmentConfig augment;

  void validate() const;
  /// Applies one "key=value" entry; unknown keys throw ContractError.
  void set(const std::string& key, const std::string& value);
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Reads a flat key=value file ('#' comments) into a config.
TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base = {});

/// Student assignment mode for an epoch: soft before soft_epochs, hard after.
AssignMode schedule_mode(int epoch, const TrainConfig& config);

/// (teacher crop, student crop) index pairs with the two crops distinct.
std::vector<std::pair<int, int>> dino_pairs(int teacher_crops, int student_crops);

/// H(a, b) = -sum a log max(b, floor).
double cross_entropy(const Eigen::VectorXd& teacher, const Eigen::VectorXd& student, double floor = kLogFloor);

/// Mean of H(teacher[i], student[j]) over dino_pairs. Teacher crops are the
/// first entries of the student list.
double dino_loss(const std::vector<Eigen::VectorXd>& teacher, const std::vector<Eigen::VectorXd>& student);

/// softmax((logits - center) / temp) for each row.
Matrix teacher_probs(const Matrix& logits, const Matrix& center, double temp);

/// center <- m * center + (1 - m) * batch_mean.
Matrix updated_center(const Matrix& center, const Matrix& batch_mean, double momentum);

Eigen::VectorXd student_distribution(const StudentState& state, const Image& crop, AssignMode mode, Rng& rng,
                                     const TrainConfig& config);

Eigen::VectorXd teacher_distribution(const TeacherState& state, const Image& crop, const TrainConfig& config,
                                     AssignMode mode = AssignMode::soft);

/// theta_t <- m * theta_t + (1 - m) * theta_s for bank and head (and the
/// backbone when `include_backbone`).
void ema_update(TeacherState& teacher, const StudentState& student, double momentum,
                bool include_backbone = false);

struct TrainLogEntry {
  int epoch = 0;
  double loss = 0.0;
  double avg_cosine_sim = 0.0;
  AssignMode mode = AssignMode::soft;

  nlohmann::json to_json() const;
};

/// Owns student, teacher and optimizer state for one run.
class Trainer {
 public:
  Trainer(TrainConfig config, const BackboneHandle& backbone);

  const TrainConfig& config() const { return config_; }
  StudentState& student() { return student_; }
  TeacherState& teacher() { return teacher_; }
  const StudentState& student() const { return student_; }
  const TeacherState& teacher() const { return teacher_; }

  /// One optimisation step over a batch; `seeds` drive per-image augmentation
  /// and noise. Returns the mean loss.
  double step(const std::vector<const Image*>& batch, const std::vector<std::uint64_t>& seeds, AssignMode mode,
              AssignMode teacher_mode = AssignMode::soft);

  /// Runs one epoch over `images` and returns its log entry.
  TrainLogEntry run_epoch(const std::vector<const Image*>& images, int epoch);

  /// Gradients applied by the most recent step, keyed by parameter address.
  const ag::GradientMap<float>& last_gradients() const { return last_grads_; }

  Checkpoint checkpoint(int epoch) const;
  std::string rng_state() const;

 private:
  struct Moments {
    Matrix m, v;
  };
  std::vector<std::pair<std::string, Matrix*>> trainable();
  void apply_gradients(const ag::GradientMap<float>& grads);

  TrainConfig config_;
  StudentState student_;
  TeacherState teacher_;
  Rng rng_;
  std::unordered_map<const Matrix*, Moments> moments_;
  long long adam_step_ = 0;
  ag::GradientMap<float> last_grads_;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no checkpoints or log files
  std::function<void(const TrainLogEntry&)> on_epoch;
};

struct TrainResult {
  StudentState student;
  TeacherState teacher;
  std::vector<TrainLogEntry> log;
};

TrainResult train_images(const std::vector<Image>& images, const TrainConfig& config, const BackboneHandle& backbone,
                         const TrainOptions& options = {});

/// Trains on the union of the datasets. Writes `checkpoint.ckpt` and
/// `train_log.jsonl` to options.out_dir after every epoch.
TrainResult train(const std::vector<DatasetDescriptor>& datasets, const TrainConfig& config,
                  const BackboneHandle& backbone, const TrainOptions& options = {});

}  // namespace protosim
