#pragma once

// Per-image prototype assignments and the inverted prototype -> occurrence
// index built from them.
//
// On disk an index is a directory:
//   manifest.json            format, K, N, datasets, checkpoint hash
//   records/<dataset>.jsonl  one ImageRecord per line, sorted by image id
//   postings.bin             binary postings cache, rebuilt when absent

#include "protosim/dataset.hpp"
#include "protosim/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace protosim {

inline constexpr const char* kIndexFormat = "protosim-index-v1";

struct ImageRecord {
  std::string image_id;
  std::string dataset_id;
  int class_prototype = 0;
  std::vector<int> patch_prototypes;  // length N, row-major patch order
  // Highest winning logit of every prototype assigned in the image, sorted by
  // logit descending then prototype ascending.
  std::vector<std::pair<int, float>> top_affinities;

  /// Token assignments with the class token first (length N + 1).
  std::vector<int> tokens() const;

  nlohmann::json to_json() const;
  static ImageRecord from_json(const nlohmann::json& j);
  bool operator==(const ImageRecord&) const = default;
};

/// Noise-free hard assignment of one image.
ImageRecord assign_image(const ModelState& model, const Image& image, const std::string& image_id,
                         const std::string& dataset_id);

enum class InferenceNet { teacher, student };

struct IndexOptions {
  int workers = 1;
  InferenceNet net = InferenceNet::teacher;
  std::function<void(std::size_t done, std::size_t total)> progress;
};

/// One record per readable image, sorted by image id. Unreadable images are
/// skipped as in load_dataset.
std::vector<ImageRecord> index_dataset(const Checkpoint& checkpoint, const DatasetDescriptor& dataset,
                                       const IndexOptions& options = {}, LoadReport* report = nullptr);

enum class TokenKind { class_token, patch, any };

const char* to_string(TokenKind kind);
TokenKind parse_token_kind(const std::string& s);

struct Posting {
  std::string image_id;
  std::string dataset_id;
  std::vector<int> positions;  // token positions, 0 = class token
  int count = 0;
  float affinity = 0.0f;

  nlohmann::json to_json() const;
  bool operator==(const Posting&) const = default;
};

struct OccurrenceCounts {
  long long class_count = 0;
  long long patch_count = 0;

  long long total() const { return class_count + patch_count; }
  long long get(TokenKind kind) const;
  bool operator==(const OccurrenceCounts&) const = default;
};

struct DatasetInfo {
  std::string id;
  std::string name;
  std::string root;
  std::string labels;  // empty when none

  nlohmann::json to_json() const;
  static DatasetInfo from_json(const nlohmann::json& j);
  static DatasetInfo from_descriptor(const DatasetDescriptor& d);
  bool operator==(const DatasetInfo&) const = default;
};

enum class RankBy { count, affinity };

const char* to_string(RankBy rank);
RankBy parse_rank(const std::string& s);

class PrototypeIndex {
 public:
  PrototypeIndex() = default;
  PrototypeIndex(int prototypes, int patches) : k_(prototypes), n_(patches) {}

  int K() const { return k_; }
  int N() const { return n_; }
  const std::vector<DatasetInfo>& datasets() const { return datasets_; }
  std::vector<DatasetInfo>& datasets() { return datasets_; }
  std::vector<std::string> dataset_ids() const;
  const std::string& checkpoint_hash() const { return checkpoint_hash_; }
  void set_checkpoint_hash(std::string h) { checkpoint_hash_ = std::move(h); }

  /// Records of one dataset sorted by image id (empty when unknown).
  const std::vector<ImageRecord>& records(const std::string& dataset_id) const;
  std::vector<ImageRecord> all_records() const;
  std::size_t image_count() const;
  const ImageRecord* find(const std::string& dataset_id, const std::string& image_id) const;

  OccurrenceCounts totals(int prototype) const;
  OccurrenceCounts totals(int prototype, const std::string& dataset_id) const;

  /// Postings for a prototype, count descending, then image id, then dataset
  /// id ascending (or affinity descending with the same ties).
  std::vector<Posting> query(int prototype, const std::string& dataset_filter = "", TokenKind kind = TokenKind::any,
                             RankBy rank = RankBy::count) const;

  /// Adds records; a duplicate (image_id, dataset_id) throws ContractError.
  void add(const std::vector<ImageRecord>& records);

  void check_prototype(int prototype) const;

 private:
  friend void save_index(const PrototypeIndex&, const std::filesystem::path&);
  friend PrototypeIndex load_index(const std::filesystem::path&);

  struct Entry {
    int dataset = 0;        // position in dataset_order_
    std::size_t image = 0;  // position in that dataset's record list
    std::vector<int> positions;
    float affinity = 0.0f;
  };
  void rebuild();
  void ensure_dataset(const std::string& id);

  int k_ = 0;
  int n_ = 0;
  std::string checkpoint_hash_;
  std::vector<DatasetInfo> datasets_;
  std::map<std::string, std::vector<ImageRecord>> records_;
  std::vector<std::string> dataset_order_;  // sorted ids, matching Entry::dataset
  std::vector<std::vector<Entry>> postings_;
  std::vector<std::map<std::string, OccurrenceCounts>> totals_;
};

PrototypeIndex build_index(const std::vector<ImageRecord>& records, int prototypes, int patches);

/// Union of two indexes over the same K and N; duplicate images throw.
PrototypeIndex merge_indexes(const PrototypeIndex& a, const PrototypeIndex& b);

void save_index(const PrototypeIndex& index, const std::filesystem::path& dir);
PrototypeIndex load_index(const std::filesystem::path& dir);

/// Checkpoint fingerprint stored in index manifests.
std::string checkpoint_hash(const Checkpoint& checkpoint);

}  // namespace protosim
