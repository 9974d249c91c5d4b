#pragma once

// Linear classification on frozen class-token prototype embeddings, and the
// prototype-zeroing ablation evaluated with the same trained probe.

#include "protosim/dataset.hpp"
#include "protosim/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace protosim {

inline constexpr const char* kProbeFormat = "protosim-probe-v1";

struct ProbeConfig {
  int epochs = 20;
  double learning_rate = 0.001;
  int batch_size = 256;
  std::string feature_source = "class_prototype_embedding";
  double val_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
  void set(const std::string& key, const std::string& value);
  nlohmann::json to_json() const;
  static ProbeConfig from_json(const nlohmann::json& j);
};

ProbeConfig load_probe_config(const std::filesystem::path& path, ProbeConfig base = {});

/// How a zeroed prototype is applied. `zero`: assignment is untouched and the
/// prototype contributes a zero vector. `reroute`: the prototype is removed
/// from the assignment, so its tokens go to their next-best prototype.
enum class AblationMode { zero, reroute };

const char* to_string(AblationMode mode);
AblationMode parse_ablation_mode(const std::string& s);

struct FeatureSet {
  Matrix features;                      // M x D
  std::vector<std::string> image_ids;   // M
  std::vector<int> labels;              // M, indexes into class_names
  std::vector<std::string> class_names; // sorted
  std::vector<int> class_prototypes;    // M, winning class-token prototype
};

struct LabeledImage {
  std::string image_id;
  std::string label;
  Image image;
};

/// Noise-free hard-assigned class-token embedding (a bank row) for each
/// image, with optional prototype zeroing.
Matrix class_token_feature(const ModelState& model, const Image& image, const std::set<int>& zeroed = {},
                           AblationMode mode = AblationMode::zero, int* winner = nullptr);

/// Class names are taken from `class_names` when given (fixing the label
/// order of an existing probe), otherwise from the sorted distinct labels.
FeatureSet extract_features(const ModelState& model, const std::vector<LabeledImage>& images,
                            const std::set<int>& zeroed = {}, AblationMode mode = AblationMode::zero,
                            const std::vector<std::string>& class_names = {});

/// Loads a dataset together with its label file. Images without a label are
/// listed with a warning; more than 10% missing aborts.
std::vector<LabeledImage> load_labeled_dataset(const DatasetDescriptor& dataset,
                                               const std::filesystem::path& labels);

struct LinearProbe {
  Matrix weight;  // C x D
  Matrix bias;    // 1 x C
  std::vector<std::string> class_names;

  std::vector<int> predict(const Matrix& features) const;
};

struct ClassAccuracy {
  std::string name;
  int correct = 0;
  int total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / total : 0.0; }
};

struct Evaluation {
  int correct = 0;
  int total = 0;
  std::vector<ClassAccuracy> per_class;
  double accuracy() const { return total ? static_cast<double>(correct) / total : 0.0; }
};

Evaluation evaluate(const LinearProbe& probe, const FeatureSet& data, const std::vector<std::size_t>& rows);

/// Seeded stratified split; every class with at least two images keeps at
/// least one image on each side.
void stratified_split(const std::vector<int>& labels, double val_fraction, std::uint64_t seed,
                      std::vector<std::size_t>& train, std::vector<std::size_t>& val);

struct ProbeResult {
  LinearProbe probe;
  ProbeConfig config;
  std::vector<std::size_t> train_rows;
  std::vector<std::size_t> val_rows;
  Evaluation validation;
};

/// Softmax cross-entropy linear model trained with plain mini-batch SGD.
ProbeResult train_probe(const FeatureSet& data, const ProbeConfig& config);

struct AblationRow {
  std::string class_name;
  int prototype = 0;
  double association = 0.0;  // share of the class's images whose class token picks `prototype`
  double before = 0.0;
  double after = 0.0;
  double max_other_change = 0.0;  // largest |after - before| over the other classes

  double delta() const { return before - after; }
};

struct AblationResult {
  AblationMode mode = AblationMode::zero;
  std::vector<AblationRow> rows;
  double mean_drop = 0.0;
};

/// For each (class, prototype) pair: zero the prototype, re-extract features
/// and re-evaluate the same probe on `rows` of `images`.
AblationResult zero_prototype_ablation(const ModelState& model, const LinearProbe& probe,
                                       const std::vector<std::pair<std::string, int>>& class_prototypes,
                                       const std::vector<LabeledImage>& images, const std::vector<std::size_t>& rows,
                                       AblationMode mode = AblationMode::zero);

/// Most frequent class-token prototype per class (ties: smallest id), ranked
/// by association strength descending, then class name; the first `top`
/// entries (all when top <= 0).
std::vector<std::pair<std::string, int>> top_class_prototypes(const FeatureSet& data,
                                                              const std::vector<std::size_t>& rows, int top);

struct ProbeFile {
  ProbeConfig config;
  LinearProbe probe;
  DatasetDescriptor dataset;
  std::filesystem::path labels;
  std::vector<std::string> val_image_ids;
  std::string checkpoint_hash;
  Evaluation validation;
};

nlohmann::json evaluation_to_json(const Evaluation& e);
nlohmann::json ablation_to_json(const AblationResult& a);
void save_probe(const ProbeFile& file, const std::filesystem::path& path);
ProbeFile load_probe(const std::filesystem::path& path);

}  // namespace protosim
