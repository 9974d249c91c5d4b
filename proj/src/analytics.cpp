#include "protosim/analytics.hpp"

#include "protosim/io.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace protosim {

using nlohmann::json;

std::string label_from_proportions(const std::map<std::string, double>& proportions, long long total,
                                   double threshold, long long min_occurrences) {
  if (total <= 0) return kLabelUnused;
  if (total < min_occurrences) return kLabelInsufficient;
  const std::string* best = nullptr;
  double best_p = -1.0;
  for (const auto& [id, p] : proportions)
    if (p > best_p) best_p = p, best = &id;
  if (best && best_p > threshold) return kLabelSpecificPrefix + *best;
  return kLabelShared;
}

namespace {

std::map<std::string, double> proportions_of(const std::map<std::string, long long>& counts, long long total) {
  std::map<std::string, double> out;
  if (total <= 0) return out;
  for (const auto& [id, c] : counts) out[id] = static_cast<double>(c) / static_cast<double>(total);
  return out;
}

long long sum_counts(const std::map<std::string, long long>& counts) {
  long long t = 0;
  for (const auto& [id, c] : counts) t += c;
  return t;
}

}  // namespace

std::string specificity_label(const std::map<std::string, long long>& counts, const SpecificityOptions& options) {
  const long long total = sum_counts(counts);
  return label_from_proportions(proportions_of(counts, total), total, options.threshold, options.min_occurrences);
}

json PrototypeStats::to_json() const {
  json ex = json::object();
  for (const auto& [ds, ps] : exemplars) {
    json arr = json::array();
    for (const auto& p : ps) arr.push_back(p.to_json());
    ex[ds] = arr;
  }
  return {{"prototype_id", prototype_id},
          {"counts", counts},
          {"proportions", proportions},
          {"label", label},
          {"class_proportion", class_proportion ? json(*class_proportion) : json(nullptr)},
          {"total_occurrences", total_occurrences},
          {"class_occurrences", class_occurrences},
          {"patch_occurrences", patch_occurrences},
          {"exemplars", ex}};
}

PrototypeStats PrototypeStats::from_json(const json& j) {
  PrototypeStats s;
  s.prototype_id = j.at("prototype_id").get<int>();
  s.counts = j.at("counts").get<std::map<std::string, long long>>();
  s.proportions = j.at("proportions").get<std::map<std::string, double>>();
  s.label = j.at("label").get<std::string>();
  if (!j.at("class_proportion").is_null()) s.class_proportion = j.at("class_proportion").get<double>();
  s.total_occurrences = j.at("total_occurrences").get<long long>();
  s.class_occurrences = j.at("class_occurrences").get<long long>();
  s.patch_occurrences = j.at("patch_occurrences").get<long long>();
  for (const auto& [ds, arr] : j.at("exemplars").items()) {
    auto& out = s.exemplars[ds];
    for (const auto& p : arr)
      out.push_back({p.at("image_id").get<std::string>(), p.at("dataset_id").get<std::string>(),
                     p.at("positions").get<std::vector<int>>(), p.at("count").get<int>(),
                     p.at("affinity").get<float>()});
  }
  return s;
}

PrototypeStats specificity(const PrototypeIndex& index, int prototype, const SpecificityOptions& options) {
  index.check_prototype(prototype);
  PrototypeStats s;
  s.prototype_id = prototype;
  for (const auto& id : index.dataset_ids()) s.counts[id] = index.totals(prototype, id).get(options.kind);
  const OccurrenceCounts all = index.totals(prototype);
  s.class_occurrences = all.class_count;
  s.patch_occurrences = all.patch_count;
  s.total_occurrences = sum_counts(s.counts);
  s.proportions = proportions_of(s.counts, s.total_occurrences);
  s.label = label_from_proportions(s.proportions, s.total_occurrences, options.threshold, options.min_occurrences);
  s.class_proportion = class_patch_proportion(index, prototype);
  return s;
}

std::optional<double> class_patch_proportion(const PrototypeIndex& index, int prototype) {
  const OccurrenceCounts c = index.totals(prototype);
  if (c.total() == 0) return std::nullopt;
  return static_cast<double>(c.class_count) / static_cast<double>(c.total());
}

json CentreBiasMap::to_json() const {
  json rows = json::array();
  for (Eigen::Index r = 0; r < correlations.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < correlations.cols(); ++c) row.push_back(correlations(r, c));
    rows.push_back(row);
  }
  return {{"grid_side", grid_side},
          {"selected_positions", selected_positions},
          {"statistic", "phi co-assignment correlation"},
          {"correlations", rows}};
}

namespace {

std::size_t distinct_patch_prototypes(const std::vector<ImageRecord>& records) {
  std::set<int> seen;
  for (const auto& r : records) seen.insert(r.patch_prototypes.begin(), r.patch_prototypes.end());
  return seen.size();
}

double correlation_from_agreement(double agree_fraction, std::size_t vocabulary) {
  if (vocabulary <= 1) return 1.0;
  const double inv = 1.0 / static_cast<double>(vocabulary);
  return (agree_fraction - inv) / (1.0 - inv);
}

void check_records(const std::vector<ImageRecord>& records) {
  if (records.size() < 2) throw ContractError("centre bias needs at least 2 images");
  const std::size_t n = records.front().patch_prototypes.size();
  for (const auto& r : records)
    if (r.patch_prototypes.size() != n) throw ContractError("records have differing patch counts");
}

}  // namespace

double co_assignment_correlation(const std::vector<ImageRecord>& records, int s, int q) {
  check_records(records);
  const int n = static_cast<int>(records.front().patch_prototypes.size());
  if (s < 0 || s >= n || q < 0 || q >= n) throw ContractError("patch position outside [0, N)");
  std::size_t agree = 0;
  for (const auto& r : records)
    agree += r.patch_prototypes[static_cast<std::size_t>(s)] == r.patch_prototypes[static_cast<std::size_t>(q)];
  return correlation_from_agreement(static_cast<double>(agree) / static_cast<double>(records.size()),
                                    distinct_patch_prototypes(records));
}

CentreBiasMap centre_bias_map(const std::vector<ImageRecord>& records, const std::vector<int>& selected_positions) {
  check_records(records);
  const int n = static_cast<int>(records.front().patch_prototypes.size());
  const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
  if (side * side != n) throw ContractError("centre bias needs a square patch grid, got N=" + std::to_string(n));
  if (selected_positions.empty()) throw ContractError("centre bias needs at least one selected position");
  for (int s : selected_positions)
    if (s < 0 || s >= n) throw ContractError("selected position " + std::to_string(s) + " outside [0, N)");

  const std::size_t vocab = distinct_patch_prototypes(records);
  CentreBiasMap map;
  map.grid_side = side;
  map.selected_positions = selected_positions;
  map.correlations = Eigen::MatrixXd::Zero(side, side);
  std::vector<std::size_t> agree(static_cast<std::size_t>(n));
  for (int s : selected_positions) {
    std::fill(agree.begin(), agree.end(), 0);
    for (const auto& r : records) {
      const int a = r.patch_prototypes[static_cast<std::size_t>(s)];
      for (int q = 0; q < n; ++q) agree[static_cast<std::size_t>(q)] += r.patch_prototypes[static_cast<std::size_t>(q)] == a;
    }
    for (int q = 0; q < n; ++q)
      map.correlations(q / side, q % side) += correlation_from_agreement(
          static_cast<double>(agree[static_cast<std::size_t>(q)]) / static_cast<double>(records.size()), vocab);
  }
  map.correlations /= static_cast<double>(selected_positions.size());
  return map;
}

std::vector<int> centre_positions(int grid_side, int side) {
  if (side < 1 || side > grid_side) throw ContractError("centre block size outside [1, grid side]");
  const int start = (grid_side - side) / 2;
  std::vector<int> out;
  for (int r = start; r < start + side; ++r)
    for (int c = start; c < start + side; ++c) out.push_back(r * grid_side + c);
  return out;
}

json AlignmentReport::to_json() const {
  json table_json = json::object();
  for (const auto& [c, row] : table) {
    json r = json::object();
    for (const auto& [p, n] : row) r[std::to_string(p)] = n;
    table_json[c] = r;
  }
  json ptc = json::object();
  for (const auto& [p, c] : prototype_top_class) ptc[std::to_string(p)] = c;
  return {{"dataset_id", dataset_id},
          {"aligned", aligned},
          {"classes", classes},
          {"class_top_prototype", class_top_prototype},
          {"prototype_top_class", ptc},
          {"table", table_json},
          {"unlabeled", unlabeled}};
}

AlignmentReport semantic_alignment(const PrototypeIndex& index, const std::string& dataset_id,
                                   const std::map<std::string, std::string>& labels, double max_unlabeled_fraction) {
  const auto& records = index.records(dataset_id);
  if (records.empty()) throw ContractError("dataset '" + dataset_id + "' has no indexed images");
  AlignmentReport rep;
  rep.dataset_id = dataset_id;
  std::map<int, std::map<std::string, long long>> by_proto;
  for (const auto& r : records) {
    auto it = labels.find(r.image_id);
    if (it == labels.end()) {
      rep.unlabeled.push_back(r.image_id);
      continue;
    }
    ++rep.table[it->second][r.class_prototype];
    ++by_proto[r.class_prototype][it->second];
  }
  if (!rep.unlabeled.empty()) {
    spdlog::warn("{} of {} images in '{}' have no label", rep.unlabeled.size(), records.size(), dataset_id);
    if (static_cast<double>(rep.unlabeled.size()) > max_unlabeled_fraction * static_cast<double>(records.size()))
      throw Error(std::to_string(rep.unlabeled.size()) + " of " + std::to_string(records.size()) + " images in '" +
                  dataset_id + "' have no label (limit " + std::to_string(max_unlabeled_fraction * 100.0) + "%)");
  }
  // std::map iteration is ascending, so strict ">" keeps the smallest key on ties.
  for (const auto& [p, row] : by_proto) {
    const std::string* best = nullptr;
    long long best_n = -1;
    for (const auto& [c, n] : row)
      if (n > best_n) best_n = n, best = &c;
    rep.prototype_top_class[p] = *best;
  }
  for (const auto& [c, row] : rep.table) {
    int best = -1;
    long long best_n = -1;
    for (const auto& [p, n] : row)
      if (n > best_n) best_n = n, best = p;
    rep.class_top_prototype[c] = best;
    if (rep.prototype_top_class.at(best) == c) ++rep.aligned;
  }
  rep.classes = static_cast<int>(rep.table.size());
  return rep;
}

json ComparisonReport::to_json() const {
  json protos = json::array();
  for (const auto& p : prototypes) protos.push_back(p.to_json());
  return {{"format", kReportFormat},
          {"mode", mode},
          {"datasets", datasets},
          {"K", K},
          {"N", N},
          {"threshold", threshold},
          {"min_occurrences", min_occurrences},
          {"token_kind", token_kind},
          {"checkpoint_hash", checkpoint_hash},
          {"diversity", {{"mean_cosine_similarity", diversity}, {"mean_cosine_distance", 1.0 - diversity}}},
          {"centre_bias_statistic", "phi co-assignment correlation"},
          {"counts",
           {{"specific", specific_counts},
            {"shared", shared_count},
            {"insufficient_data", insufficient_count},
            {"unused", unused_count}}},
          {"prototypes", protos}};
}

ComparisonReport ComparisonReport::from_json(const json& j) {
  if (j.value("format", "") != kReportFormat) throw Error(std::string("not a ") + kReportFormat + " document");
  ComparisonReport r;
  r.mode = j.at("mode").get<std::string>();
  r.datasets = j.at("datasets").get<std::vector<std::string>>();
  r.K = j.at("K").get<int>();
  r.N = j.at("N").get<int>();
  r.threshold = j.at("threshold").get<double>();
  r.min_occurrences = j.at("min_occurrences").get<long long>();
  r.token_kind = j.at("token_kind").get<std::string>();
  r.checkpoint_hash = j.at("checkpoint_hash").get<std::string>();
  r.diversity = j.at("diversity").at("mean_cosine_similarity").get<double>();
  const auto& c = j.at("counts");
  r.specific_counts = c.at("specific").get<std::map<std::string, int>>();
  r.shared_count = c.at("shared").get<int>();
  r.insufficient_count = c.at("insufficient_data").get<int>();
  r.unused_count = c.at("unused").get<int>();
  for (const auto& p : j.at("prototypes")) r.prototypes.push_back(PrototypeStats::from_json(p));
  return r;
}

ComparisonReport compare_report(const PrototypeIndex& index, const PrototypeBank& bank, const ReportOptions& options) {
  if (bank.K() != index.K())
    throw ContractError("bank has K=" + std::to_string(bank.K()) + " but the index has K=" + std::to_string(index.K()));
  if (options.top_k < 0) throw ContractError("top_k must be >= 0");
  ComparisonReport r;
  r.datasets = index.dataset_ids();
  if (r.datasets.empty()) throw ContractError("compare_report: index holds no images");
  r.mode = r.datasets.size() >= 2 ? "comparison" : "summarisation";
  if (r.mode == "summarisation")
    spdlog::warn("index covers a single dataset; writing a summarisation report without specificity labels");
  r.K = index.K();
  r.N = index.N();
  r.threshold = options.specificity.threshold;
  r.min_occurrences = options.specificity.min_occurrences;
  r.token_kind = to_string(options.specificity.kind);
  r.checkpoint_hash = index.checkpoint_hash();
  r.diversity = prototype_diversity(bank.weights).mean_cosine_similarity;
  for (const auto& id : r.datasets) r.specific_counts[id] = 0;
  for (int p = 0; p < index.K(); ++p) {
    PrototypeStats s = specificity(index, p, options.specificity);
    if (s.total_occurrences == 0) ++r.unused_count;
    if (r.mode == "summarisation") {
      s.label.clear();
    } else if (s.label == kLabelShared) {
      ++r.shared_count;
    } else if (s.label == kLabelInsufficient) {
      ++r.insufficient_count;
    } else if (s.label.starts_with(kLabelSpecificPrefix)) {
      ++r.specific_counts[s.label.substr(kLabelSpecificPrefix.size())];
    }
    for (const auto& id : r.datasets) {
      auto q = index.query(p, id, options.specificity.kind);
      if (q.size() > static_cast<std::size_t>(options.top_k)) q.resize(static_cast<std::size_t>(options.top_k));
      if (!q.empty()) s.exemplars[id] = std::move(q);
    }
    r.prototypes.push_back(std::move(s));
  }
  return r;
}

namespace {

std::string html_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v, int digits = 3) {
  std::ostringstream ss;
  ss.setf(std::ios::fixed);
  ss.precision(digits);
  ss << v;
  return ss.str();
}

const char* kStyle =
    "<style>body{font-family:sans-serif;margin:1.5em}table{border-collapse:collapse}"
    "td,th{border:1px solid #ccc;padding:2px 6px;text-align:right}"
    ".g img{width:96px;height:96px;object-fit:cover;margin:2px;image-rendering:pixelated}</style>";

}  // namespace

void write_report(const ComparisonReport& report, const PrototypeIndex& index, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "prototypes");
  write_file_atomic(dir / "report.json", report.to_json().dump(2) + "\n");

  std::ostringstream h;
  h << "<!doctype html><html><head><meta charset=\"utf-8\"><title>Prototype comparison</title>" << kStyle
    << "</head><body><h1>Prototype comparison (" << html_escape(report.mode) << ")</h1><p>Datasets:";
  for (const auto& d : report.datasets) h << " " << html_escape(d);
  h << ". K=" << report.K << ", N=" << report.N << ", threshold " << report.threshold << ", mean cosine similarity "
    << fmt(report.diversity, 4) << ".</p><p>";
  for (const auto& [d, n] : report.specific_counts) h << "specific to " << html_escape(d) << ": " << n << "; ";
  h << "shared: " << report.shared_count << "; insufficient data: " << report.insufficient_count
    << "; unused: " << report.unused_count << "</p><table><tr><th>prototype</th><th>label</th><th>total</th>";
  for (const auto& d : report.datasets) h << "<th>" << html_escape(d) << "</th>";
  h << "<th>class proportion</th></tr>";
  for (const auto& p : report.prototypes) {
    if (p.total_occurrences == 0) continue;
    h << "<tr><td><a href=\"prototypes/" << p.prototype_id << ".html\">" << p.prototype_id << "</a></td><td>"
      << html_escape(p.label) << "</td><td>" << p.total_occurrences << "</td>";
    for (const auto& d : report.datasets) {
      auto it = p.proportions.find(d);
      h << "<td>" << fmt(it == p.proportions.end() ? 0.0 : it->second) << "</td>";
    }
    h << "<td>" << (p.class_proportion ? fmt(*p.class_proportion) : "") << "</td></tr>";
  }
  h << "</table></body></html>\n";
  write_file_atomic(dir / "index.html", h.str());

  std::map<std::string, std::filesystem::path> roots;
  for (const auto& d : index.datasets()) roots[d.id] = d.root;
  const auto abs_pages = std::filesystem::absolute(dir / "prototypes");
  for (const auto& p : report.prototypes) {
    if (p.total_occurrences == 0) continue;
    std::ostringstream pg;
    pg << "<!doctype html><html><head><meta charset=\"utf-8\"><title>Prototype " << p.prototype_id << "</title>"
       << kStyle << "</head><body><p><a href=\"../index.html\">back</a></p><h1>Prototype " << p.prototype_id
       << "</h1><p>" << html_escape(p.label) << ", " << p.total_occurrences << " occurrences ("
       << p.class_occurrences << " class token, " << p.patch_occurrences << " patch)</p>";
    for (const auto& [ds, posts] : p.exemplars) {
      pg << "<h2>" << html_escape(ds) << "</h2><div class=\"g\">";
      for (const auto& post : posts) {
        std::string src = post.image_id;
        auto it = roots.find(ds);
        if (it != roots.end() && !it->second.empty())
          src = std::filesystem::relative(std::filesystem::absolute(it->second) / post.image_id, abs_pages).generic_string();
        pg << "<img src=\"" << html_escape(src) << "\" title=\"" << html_escape(post.image_id) << " x" << post.count
           << "\">";
      }
      pg << "</div>";
    }
    pg << "</body></html>\n";
    write_file_atomic(dir / "prototypes" / (std::to_string(p.prototype_id) + ".html"), pg.str());
  }
}

ComparisonReport read_report(const std::filesystem::path& path) {
  try {
    return ComparisonReport::from_json(json::parse(read_file_text(path)));
  } catch (const json::exception& e) {
    throw Error("malformed report '" + path.string() + "': " + e.what());
  }
}

}  // namespace protosim
