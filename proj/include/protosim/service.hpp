#pragma once

// Read-only HTTP/JSON API over a checkpoint, an index and a comparison
// report. `handle` is the transport-free request handler; `serve` binds it to
// an HTTP server.

#include "protosim/analytics.hpp"
#include "protosim/index.hpp"
#include "protosim/model.hpp"

#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>

namespace protosim {

struct Response {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

using QueryParams = std::multimap<std::string, std::string>;

class InspectionService {
 public:
  /// Throws Error when the index was built from a different checkpoint.
  InspectionService(PrototypeIndex index, Checkpoint checkpoint, ComparisonReport report,
                    std::filesystem::path cache_dir = {});

  static InspectionService open(const std::filesystem::path& index_dir, const std::filesystem::path& checkpoint,
                                const std::filesystem::path& report, std::filesystem::path cache_dir = {});

  Response handle(const std::string& method, const std::string& path, const QueryParams& params = {}) const;

  const PrototypeIndex& index() const { return index_; }
  const ComparisonReport& report() const { return report_; }
  const std::string& checkpoint_hash() const { return hash_; }

 private:
  Response manifest() const;
  Response prototypes(const QueryParams& params) const;
  Response prototype(int id, const QueryParams& params) const;
  Response examples(int id, const QueryParams& params) const;
  Response attention(int id, const std::string& image_id, const QueryParams& params) const;
  Response image(const std::string& dataset, const std::string& image_id) const;

  const ImageRecord* locate(const std::string& image_id, const QueryParams& params, std::string& dataset) const;
  std::filesystem::path image_path(const std::string& dataset, const std::string& image_id) const;

  PrototypeIndex index_;
  Checkpoint checkpoint_;
  ComparisonReport report_;
  std::string report_body_;
  std::filesystem::path cache_dir_;
  std::string hash_;
};

/// Cache directory from PROTOSIM_CACHE_DIR, or empty.
std::filesystem::path cache_dir_from_env();

/// Parses "host:port" (host defaults to 127.0.0.1 when omitted).
std::pair<std::string, int> parse_bind_address(const std::string& bind);

struct ServeOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::function<void(int port)> on_listen;
  const std::atomic<bool>* stop = nullptr;  // polled; stops the server when set
};

/// Serves until the stop flag is set or the process is interrupted. Responses
/// carry CORS headers for browser clients.
void serve(const InspectionService& service, const ServeOptions& options);

}  // namespace protosim
