#include "protosim/dataset.hpp"

#include "protosim/common.hpp"
#include "protosim/io.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <set>
#include <sstream>

namespace protosim {

namespace fs = std::filesystem;

DatasetDescriptor DatasetDescriptor::parse(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size())
    throw ContractError("dataset spec '" + spec + "' must look like id=path");
  DatasetDescriptor d;
  d.id = spec.substr(0, eq);
  d.name = d.id;
  d.root = spec.substr(eq + 1);
  return d;
}

std::vector<DatasetDescriptor> parse_dataset_list(const std::string& spec) {
  std::vector<DatasetDescriptor> out;
  std::set<std::string> seen;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    auto d = DatasetDescriptor::parse(item);
    if (!seen.insert(d.id).second) throw ContractError("duplicate dataset id '" + d.id + "'");
    out.push_back(std::move(d));
  }
  if (out.empty()) throw ContractError("no datasets given");
  return out;
}

std::vector<std::string> list_image_ids(const fs::path& root) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw Error("dataset root '" + root.string() + "' is not a readable directory");
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_regular_file() && is_image_file(entry.path())) ids.push_back(entry.path().filename().string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::map<std::string, std::string> read_labels(const fs::path& path) {
  std::map<std::string, std::string> labels;
  std::stringstream ss(read_file_text(path));
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    auto sep = line.find('\t');
    if (sep == std::string::npos) sep = line.find(',');
    if (sep == std::string::npos)
      throw Error(path.string() + ":" + std::to_string(lineno) + ": expected 'image_id,label'");
    labels[line.substr(0, sep)] = line.substr(sep + 1);
  }
  return labels;
}

std::vector<LoadedImage> load_dataset(const DatasetDescriptor& dataset, LoadReport* report,
                                      double max_skip_fraction) {
  const auto ids = list_image_ids(dataset.root);
  if (ids.empty()) throw Error("dataset '" + dataset.id + "' at '" + dataset.root.string() + "' has no images");
  std::vector<LoadedImage> out;
  out.reserve(ids.size());
  LoadReport local;
  local.total = ids.size();
  for (const auto& id : ids) {
    try {
      out.push_back({id, dataset.id, load_image(dataset.root / id)});
    } catch (const Error& e) {
      spdlog::warn("skipping {}/{}: {}", dataset.id, id, e.what());
      local.skipped.push_back(id);
    }
  }
  if (report) *report = local;
  if (static_cast<double>(local.skipped.size()) > max_skip_fraction * static_cast<double>(local.total))
    throw Error("dataset '" + dataset.id + "': " + std::to_string(local.skipped.size()) + " of " +
                std::to_string(local.total) + " images unreadable, aborting");
  return out;
}

}  // namespace protosim
