#include "protosim/probe.hpp"

#include "protosim/io.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace protosim {

using nlohmann::json;

void ProbeConfig::validate() const {
  if (epochs < 1) throw ContractError("probe epochs must be >= 1");
  if (learning_rate <= 0.0) throw ContractError("probe learning_rate must be positive");
  if (batch_size < 1) throw ContractError("probe batch_size must be >= 1");
  if (feature_source != "class_prototype_embedding")
    throw ContractError("unsupported feature_source '" + feature_source + "'");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ContractError("val_fraction must lie in (0, 1)");
}

void ProbeConfig::set(const std::string& key, const std::string& value) {
  try {
    if (key == "epochs") epochs = std::stoi(value);
    else if (key == "learning_rate") learning_rate = std::stod(value);
    else if (key == "batch_size") batch_size = std::stoi(value);
    else if (key == "feature_source") feature_source = value;
    else if (key == "val_fraction") val_fraction = std::stod(value);
    else if (key == "seed") seed = std::stoull(value);
    else throw ContractError("unknown probe config key '" + key + "'");
  } catch (const std::invalid_argument& e) {
    if (dynamic_cast<const ContractError*>(&e)) throw;
    throw ContractError("bad value '" + value + "' for probe config key '" + key + "'");
  } catch (const std::out_of_range&) {
    throw ContractError("value '" + value + "' out of range for probe config key '" + key + "'");
  }
}

json ProbeConfig::to_json() const {
  return {{"epochs", epochs},           {"learning_rate", learning_rate}, {"batch_size", batch_size},
          {"feature_source", feature_source}, {"val_fraction", val_fraction},   {"seed", seed}};
}

ProbeConfig ProbeConfig::from_json(const json& j) {
  ProbeConfig c;
  for (const auto& [k, v] : j.items()) c.set(k, v.is_string() ? v.get<std::string>() : v.dump());
  return c;
}

ProbeConfig load_probe_config(const std::filesystem::path& path, ProbeConfig base) {
  std::istringstream ss(read_file_text(path));
  std::string line;
  while (std::getline(ss, line)) {
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    const auto eq = line.find('=');
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    if (trim(line).empty()) continue;
    if (eq == std::string::npos) throw ContractError(path.string() + ": expected key=value, got '" + line + "'");
    base.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

const char* to_string(AblationMode mode) { return mode == AblationMode::zero ? "zero" : "reroute"; }

AblationMode parse_ablation_mode(const std::string& s) {
  if (s == "zero") return AblationMode::zero;
  if (s == "reroute") return AblationMode::reroute;
  throw ContractError("unknown ablation mode '" + s + "' (expected zero or reroute)");
}

Matrix class_token_feature(const ModelState& model, const Image& image, const std::set<int>& zeroed,
                           AblationMode mode, int* winner) {
  const int k = model.bank.K();
  for (int p : zeroed)
    if (p < 0 || p >= k) throw ContractError("prototype id " + std::to_string(p) + " outside [0, " + std::to_string(k) + ")");
  const Matrix logits = image_logits(model, image);
  if (!all_finite(logits)) throw Error("non-finite logits during feature extraction");
  int best = -1;
  float best_v = -std::numeric_limits<float>::infinity();
  for (int p = 0; p < k; ++p) {
    if (mode == AblationMode::reroute && zeroed.count(p)) continue;
    if (best < 0 || logits(p, 0) > best_v) best = p, best_v = logits(p, 0);
  }
  if (winner) *winner = best;
  if (best < 0 || zeroed.count(best)) return Matrix::Zero(1, model.bank.D());
  return model.bank.weights.row(best);
}

FeatureSet extract_features(const ModelState& model, const std::vector<LabeledImage>& images,
                            const std::set<int>& zeroed, AblationMode mode,
                            const std::vector<std::string>& class_names) {
  FeatureSet fs;
  if (class_names.empty()) {
    for (const auto& im : images) fs.class_names.push_back(im.label);
    std::sort(fs.class_names.begin(), fs.class_names.end());
    fs.class_names.erase(std::unique(fs.class_names.begin(), fs.class_names.end()), fs.class_names.end());
  } else {
    fs.class_names = class_names;
  }
  fs.features.resize(static_cast<Eigen::Index>(images.size()), model.bank.D());
  for (std::size_t i = 0; i < images.size(); ++i) {
    int w = -1;
    fs.features.row(static_cast<Eigen::Index>(i)) = class_token_feature(model, images[i].image, zeroed, mode, &w);
    fs.image_ids.push_back(images[i].image_id);
    fs.class_prototypes.push_back(w);
    auto it = std::find(fs.class_names.begin(), fs.class_names.end(), images[i].label);
    if (it == fs.class_names.end())
      throw ContractError("label '" + images[i].label + "' is not one of the probe's classes");
    fs.labels.push_back(static_cast<int>(it - fs.class_names.begin()));
  }
  return fs;
}

std::vector<LabeledImage> load_labeled_dataset(const DatasetDescriptor& dataset, const std::filesystem::path& labels) {
  const auto label_map = read_labels(labels);
  auto loaded = load_dataset(dataset);
  std::vector<LabeledImage> out;
  std::vector<std::string> missing;
  for (auto& li : loaded) {
    auto it = label_map.find(li.image_id);
    if (it == label_map.end()) {
      missing.push_back(li.image_id);
      continue;
    }
    out.push_back({li.image_id, it->second, std::move(li.image)});
  }
  if (!missing.empty()) {
    spdlog::warn("{} of {} images have no label (first: {})", missing.size(), loaded.size(), missing.front());
    if (static_cast<double>(missing.size()) > 0.10 * static_cast<double>(loaded.size()))
      throw Error(std::to_string(missing.size()) + " of " + std::to_string(loaded.size()) +
                  " images have no label (limit 10%)");
  }
  return out;
}

std::vector<int> LinearProbe::predict(const Matrix& features) const {
  if (features.cols() != weight.cols())
    throw ContractError("probe expects " + std::to_string(weight.cols()) + "-d features, got " +
                        std::to_string(features.cols()));
  Matrix scores = features * weight.transpose();
  scores.rowwise() += bias.row(0);
  const auto idx = argmax_rows<float>(scores);
  return {idx.begin(), idx.end()};
}

Evaluation evaluate(const LinearProbe& probe, const FeatureSet& data, const std::vector<std::size_t>& rows) {
  Evaluation e;
  e.per_class.resize(probe.class_names.size());
  for (std::size_t c = 0; c < probe.class_names.size(); ++c) e.per_class[c].name = probe.class_names[c];
  Matrix sub(static_cast<Eigen::Index>(rows.size()), data.features.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) sub.row(static_cast<Eigen::Index>(i)) = data.features.row(static_cast<Eigen::Index>(rows[i]));
  const std::vector<int> pred = probe.predict(sub);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const int y = data.labels[rows[i]];
    auto& pc = e.per_class[static_cast<std::size_t>(y)];
    ++pc.total;
    ++e.total;
    if (pred[i] == y) ++pc.correct, ++e.correct;
  }
  return e;
}

void stratified_split(const std::vector<int>& labels, double val_fraction, std::uint64_t seed,
                      std::vector<std::size_t>& train, std::vector<std::size_t>& val) {
  train.clear();
  val.clear();
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  Rng rng(seed);
  for (auto& [c, idx] : by_class) {
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[static_cast<std::size_t>(rng() % i)]);
    std::size_t nv = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(idx.size())));
    if (idx.size() >= 2) nv = std::clamp<std::size_t>(nv, 1, idx.size() - 1);
    else nv = 0;
    val.insert(val.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(nv));
    train.insert(train.end(), idx.begin() + static_cast<std::ptrdiff_t>(nv), idx.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
}

ProbeResult train_probe(const FeatureSet& data, const ProbeConfig& config) {
  config.validate();
  const auto classes = static_cast<Eigen::Index>(data.class_names.size());
  if (classes < 2) throw ContractError("linear probe needs at least 2 classes");
  if (data.features.rows() != static_cast<Eigen::Index>(data.labels.size()))
    throw ContractError("feature/label count mismatch");
  ProbeResult r;
  r.config = config;
  stratified_split(data.labels, config.val_fraction, config.seed, r.train_rows, r.val_rows);
  if (r.train_rows.empty() || r.val_rows.empty()) throw ContractError("not enough images for a train/val split");

  const Eigen::Index d = data.features.cols();
  MatrixD w = MatrixD::Zero(classes, d);
  MatrixD b = MatrixD::Zero(1, classes);
  Rng rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order = r.train_rows;
  const auto bs = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng() % i)]);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t stop = std::min(order.size(), start + bs);
      const auto m = static_cast<Eigen::Index>(stop - start);
      MatrixD x(m, d);
      for (Eigen::Index i = 0; i < m; ++i)
        x.row(i) = data.features.row(static_cast<Eigen::Index>(order[start + static_cast<std::size_t>(i)])).cast<double>();
      MatrixD scores = x * w.transpose();
      scores.rowwise() += b.row(0);
      MatrixD g = softmax_rows<double>(scores);
      for (Eigen::Index i = 0; i < m; ++i) g(i, data.labels[order[start + static_cast<std::size_t>(i)]]) -= 1.0;
      g /= static_cast<double>(m);
      w -= config.learning_rate * (g.transpose() * x);
      b -= config.learning_rate * g.colwise().sum();
    }
  }
  r.probe.weight = w.cast<float>();
  r.probe.bias = b.cast<float>();
  r.probe.class_names = data.class_names;
  r.validation = evaluate(r.probe, data, r.val_rows);
  return r;
}

std::vector<std::pair<std::string, int>> top_class_prototypes(const FeatureSet& data,
                                                              const std::vector<std::size_t>& rows, int top) {
  std::map<int, std::map<int, int>> table;
  std::map<int, int> totals;
  for (std::size_t i : rows) {
    ++table[data.labels[i]][data.class_prototypes[i]];
    ++totals[data.labels[i]];
  }
  struct Item {
    std::string name;
    int prototype;
    double strength;
  };
  std::vector<Item> items;
  for (const auto& [c, row] : table) {
    int best = -1, best_n = -1;
    for (const auto& [p, n] : row)
      if (n > best_n) best = p, best_n = n;
    items.push_back({data.class_names[static_cast<std::size_t>(c)], best,
                     static_cast<double>(best_n) / static_cast<double>(totals[c])});
  }
  std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
    return a.strength != b.strength ? a.strength > b.strength : a.name < b.name;
  });
  if (top > 0 && items.size() > static_cast<std::size_t>(top)) items.resize(static_cast<std::size_t>(top));
  std::vector<std::pair<std::string, int>> out;
  for (const auto& it : items) out.emplace_back(it.name, it.prototype);
  return out;
}

AblationResult zero_prototype_ablation(const ModelState& model, const LinearProbe& probe,
                                       const std::vector<std::pair<std::string, int>>& class_prototypes,
                                       const std::vector<LabeledImage>& images, const std::vector<std::size_t>& rows,
                                       AblationMode mode) {
  for (const auto& [c, p] : class_prototypes) {
    if (p < 0 || p >= model.bank.K())
      throw ContractError("prototype id " + std::to_string(p) + " outside [0, " + std::to_string(model.bank.K()) + ")");
    if (std::find(probe.class_names.begin(), probe.class_names.end(), c) == probe.class_names.end())
      throw ContractError("class '" + c + "' is not known to the probe");
  }
  const FeatureSet base = extract_features(model, images, {}, mode, probe.class_names);
  const Evaluation before = evaluate(probe, base, rows);
  std::map<int, std::map<int, int>> table;
  for (std::size_t i : rows) ++table[base.labels[i]][base.class_prototypes[i]];

  AblationResult out;
  out.mode = mode;
  double sum = 0.0;
  for (const auto& [name, p] : class_prototypes) {
    const auto ci = static_cast<std::size_t>(
        std::find(probe.class_names.begin(), probe.class_names.end(), name) - probe.class_names.begin());
    const FeatureSet ablated = extract_features(model, images, {p}, mode, probe.class_names);
    const Evaluation after = evaluate(probe, ablated, rows);
    AblationRow row;
    row.class_name = name;
    row.prototype = p;
    const auto& counts = table[static_cast<int>(ci)];
    const int total = before.per_class[ci].total;
    row.association = total && counts.count(p) ? static_cast<double>(counts.at(p)) / total : 0.0;
    row.before = before.per_class[ci].accuracy();
    row.after = after.per_class[ci].accuracy();
    for (std::size_t o = 0; o < probe.class_names.size(); ++o)
      if (o != ci && before.per_class[o].total > 0)
        row.max_other_change =
            std::max(row.max_other_change, std::abs(after.per_class[o].accuracy() - before.per_class[o].accuracy()));
    sum += row.delta();
    out.rows.push_back(row);
  }
  out.mean_drop = out.rows.empty() ? 0.0 : sum / static_cast<double>(out.rows.size());
  return out;
}

json evaluation_to_json(const Evaluation& e) {
  json per = json::array();
  for (const auto& c : e.per_class)
    per.push_back({{"class", c.name}, {"correct", c.correct}, {"total", c.total}, {"accuracy", c.accuracy()}});
  return {{"overall_accuracy", e.accuracy()}, {"correct", e.correct}, {"total", e.total}, {"per_class", per}};
}

json ablation_to_json(const AblationResult& a) {
  json rows = json::array();
  for (const auto& r : a.rows)
    rows.push_back({{"class", r.class_name},
                    {"prototype", r.prototype},
                    {"association", r.association},
                    {"before", r.before},
                    {"after", r.after},
                    {"delta", r.delta()},
                    {"max_other_change", r.max_other_change}});
  return {{"mode", to_string(a.mode)}, {"mean_drop", a.mean_drop}, {"rows", rows}};
}

namespace {

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

Matrix matrix_from_json(const json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (static_cast<Eigen::Index>(j.at(static_cast<std::size_t>(r)).size()) != cols) throw Error("ragged matrix in probe file");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j.at(static_cast<std::size_t>(r)).at(static_cast<std::size_t>(c)).get<float>();
  }
  return m;
}

}  // namespace

void save_probe(const ProbeFile& f, const std::filesystem::path& path) {
  json ev = evaluation_to_json(f.validation);
  json j = {{"format", kProbeFormat},
            {"config", f.config.to_json()},
            {"overall_accuracy", ev["overall_accuracy"]},
            {"per_class", ev["per_class"]},
            {"ablation", json::array()},
            {"classes", f.probe.class_names},
            {"weight", matrix_json(f.probe.weight)},
            {"bias", matrix_json(f.probe.bias)},
            {"dataset", {{"id", f.dataset.id}, {"root", f.dataset.root.string()}}},
            {"labels", f.labels.string()},
            {"val_image_ids", f.val_image_ids},
            {"checkpoint_hash", f.checkpoint_hash}};
  write_file_atomic(path, j.dump(2) + "\n");
}

ProbeFile load_probe(const std::filesystem::path& path) {
  try {
    const json j = json::parse(read_file_text(path));
    if (j.value("format", "") != kProbeFormat) throw Error("'" + path.string() + "' is not a probe file");
    ProbeFile f;
    f.config = ProbeConfig::from_json(j.at("config"));
    f.probe.class_names = j.at("classes").get<std::vector<std::string>>();
    f.probe.weight = matrix_from_json(j.at("weight"));
    f.probe.bias = matrix_from_json(j.at("bias"));
    if (f.probe.weight.rows() != static_cast<Eigen::Index>(f.probe.class_names.size()) || f.probe.bias.rows() != 1 ||
        f.probe.bias.cols() != f.probe.weight.rows())
      throw Error("probe weight shapes do not match its class list");
    f.dataset.id = j.at("dataset").at("id").get<std::string>();
    f.dataset.name = f.dataset.id;
    f.dataset.root = j.at("dataset").at("root").get<std::string>();
    f.labels = j.at("labels").get<std::string>();
    f.val_image_ids = j.at("val_image_ids").get<std::vector<std::string>>();
    f.checkpoint_hash = j.value("checkpoint_hash", "");
    return f;
  } catch (const json::exception& e) {
    throw Error("malformed probe file '" + path.string() + "': " + e.what());
  }
}

}  // namespace protosim
