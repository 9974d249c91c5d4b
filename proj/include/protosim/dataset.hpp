#pragma once

#include "protosim/image.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace protosim {

struct DatasetDescriptor {
  std::string id;
  std::string name;
  std::filesystem::path root;
  std::optional<std::filesystem::path> labels;

  /// Parses "id=path"; the name defaults to the id.
  static DatasetDescriptor parse(const std::string& spec);
};

/// Parses "a=path,b=path" and rejects duplicate ids.
std::vector<DatasetDescriptor> parse_dataset_list(const std::string& spec);

/// Image files directly under `root`, sorted by file name. The file name is the
/// image id.
std::vector<std::string> list_image_ids(const std::filesystem::path& root);

/// Label file: one "image_id,label" (or tab separated) entry per line; blank
/// lines and lines starting with '#' are ignored.
std::map<std::string, std::string> read_labels(const std::filesystem::path& path);

struct LoadedImage {
  std::string image_id;
  std::string dataset_id;
  Image image;
};

struct LoadReport {
  std::size_t total = 0;
  std::vector<std::string> skipped;  // image ids that could not be decoded
};

/// Loads every image of a dataset, skipping unreadable files with a warning.
/// Throws when more than `max_skip_fraction` of the files fail.
std::vector<LoadedImage> load_dataset(const DatasetDescriptor& dataset, LoadReport* report = nullptr,
                                      double max_skip_fraction = 0.10);

}  // namespace protosim
