#pragma once

// Comparison statistics over an assignment index: specificity labels,
// class-vs-patch proportions, centre-bias correlation maps, semantic
// alignment and the aggregated comparison report.

#include "protosim/diversity.hpp"
#include "protosim/index.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace protosim {

inline constexpr const char* kReportFormat = "protosim-report-v1";
inline constexpr double kDefaultSpecificityThreshold = 0.95;
inline constexpr long long kDefaultMinOccurrences = 10;

inline const std::string kLabelShared = "shared";
inline const std::string kLabelInsufficient = "insufficient-data";
inline const std::string kLabelUnused = "unused";
inline const std::string kLabelSpecificPrefix = "specific-to:";

struct SpecificityOptions {
  double threshold = kDefaultSpecificityThreshold;  // strict: specific iff max proportion > threshold
  long long min_occurrences = kDefaultMinOccurrences;
  TokenKind kind = TokenKind::any;
};

/// Label from per-dataset counts: "unused" when all are zero, then
/// "insufficient-data" below min_occurrences, then "specific-to:<id>" or
/// "shared". Ties for the largest proportion resolve to the smallest id.
std::string specificity_label(const std::map<std::string, long long>& counts, const SpecificityOptions& options);

/// Recomputes a label from stored proportions and a total.
std::string label_from_proportions(const std::map<std::string, double>& proportions, long long total,
                                   double threshold, long long min_occurrences);

struct PrototypeStats {
  int prototype_id = 0;
  std::map<std::string, long long> counts;        // per dataset, filtered by token kind
  std::map<std::string, double> proportions;      // empty when total is zero
  std::string label;                              // empty in summarisation mode
  std::optional<double> class_proportion;         // absent when never used
  long long total_occurrences = 0;
  long long class_occurrences = 0;
  long long patch_occurrences = 0;
  std::map<std::string, std::vector<Posting>> exemplars;  // per dataset, top-k by count

  nlohmann::json to_json() const;
  static PrototypeStats from_json(const nlohmann::json& j);
  bool operator==(const PrototypeStats&) const = default;
};

PrototypeStats specificity(const PrototypeIndex& index, int prototype, const SpecificityOptions& options = {});

/// Class-token occurrences over all occurrences; nullopt when unused.
std::optional<double> class_patch_proportion(const PrototypeIndex& index, int prototype);

struct CentreBiasMap {
  int grid_side = 0;
  std::vector<int> selected_positions;  // patch positions, row-major
  Eigen::MatrixXd correlations;         // grid_side x grid_side

  nlohmann::json to_json() const;
};

/// Correlation between patch positions s and q: the Pearson correlation of
/// the one-hot assignment indicators of s and q, pooled over images and the
/// prototypes used in the records. This equals
/// (agree/n - 1/V) / (1 - 1/V) with agree the number of images where s and q
/// share a prototype and V the number of distinct prototypes (1 when V = 1).
/// The map averages over the selected positions.
double co_assignment_correlation(const std::vector<ImageRecord>& records, int s, int q);

CentreBiasMap centre_bias_map(const std::vector<ImageRecord>& records, const std::vector<int>& selected_positions);

/// The `side` x `side` block of patch positions at the centre of the grid.
std::vector<int> centre_positions(int grid_side, int side);

struct AlignmentReport {
  std::string dataset_id;
  int aligned = 0;
  int classes = 0;
  std::map<std::string, int> class_top_prototype;      // m(c)
  std::map<int, std::string> prototype_top_class;      // g(p)
  std::map<std::string, std::map<int, long long>> table;  // class -> prototype -> images
  std::vector<std::string> unlabeled;                  // indexed image ids without a label

  nlohmann::json to_json() const;
};

/// Class-token based alignment between labels and prototypes. Ties pick the
/// smallest prototype id / class name. Throws Error when more than
/// `max_unlabeled_fraction` of the indexed images have no label.
AlignmentReport semantic_alignment(const PrototypeIndex& index, const std::string& dataset_id,
                                   const std::map<std::string, std::string>& labels,
                                   double max_unlabeled_fraction = 0.10);

struct ReportOptions {
  SpecificityOptions specificity;
  int top_k = 12;
};

struct ComparisonReport {
  std::string mode;  // "comparison" or "summarisation"
  std::vector<std::string> datasets;
  int K = 0;
  int N = 0;
  double threshold = kDefaultSpecificityThreshold;
  long long min_occurrences = kDefaultMinOccurrences;
  std::string token_kind = "any";
  std::string checkpoint_hash;
  double diversity = 0.0;  // mean pairwise cosine similarity of the bank
  std::map<std::string, int> specific_counts;  // per dataset
  int shared_count = 0;
  int insufficient_count = 0;
  int unused_count = 0;
  std::vector<PrototypeStats> prototypes;

  nlohmann::json to_json() const;
  static ComparisonReport from_json(const nlohmann::json& j);
  bool operator==(const ComparisonReport&) const = default;
};

/// Aggregates statistics for every prototype. An index over a single dataset
/// yields a summarisation report without specificity labels.
ComparisonReport compare_report(const PrototypeIndex& index, const PrototypeBank& bank,
                                const ReportOptions& options = {});

/// Writes report.json, index.html and one page per used prototype under
/// `dir/prototypes/`.
void write_report(const ComparisonReport& report, const PrototypeIndex& index, const std::filesystem::path& dir);

ComparisonReport read_report(const std::filesystem::path& path);

}  // namespace protosim
