#include "protosim/service.hpp"

#include "protosim/attention.hpp"
#include "protosim/io.hpp"

#include <httplib.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdlib>
#include <thread>

namespace protosim {

using nlohmann::json;

namespace {

struct HttpError {
  int status;
  std::string message;
};

Response json_response(const json& j, int status = 200) { return {status, "application/json", j.dump(2) + "\n"}; }

Response error_response(int status, const std::string& message) {
  return json_response({{"error", message}, {"status", status}}, status);
}

std::optional<std::string> param(const QueryParams& params, const std::string& key) {
  auto it = params.find(key);
  if (it == params.end()) return std::nullopt;
  return it->second;
}

long long int_param(const QueryParams& params, const std::string& key, long long fallback, long long lo, long long hi) {
  auto v = param(params, key);
  if (!v) return fallback;
  try {
    std::size_t used = 0;
    const long long x = std::stoll(*v, &used);
    if (used != v->size() || x < lo || x > hi) throw std::invalid_argument(key);
    return x;
  } catch (const std::logic_error&) {
    throw HttpError{400, "parameter '" + key + "' must be an integer in [" + std::to_string(lo) + ", " +
                             std::to_string(hi) + "]"};
  }
}

double real_param(const QueryParams& params, const std::string& key, double fallback, double lo, double hi) {
  auto v = param(params, key);
  if (!v) return fallback;
  try {
    std::size_t used = 0;
    const double x = std::stod(*v, &used);
    if (used != v->size() || !(x >= lo && x <= hi)) throw std::invalid_argument(key);
    return x;
  } catch (const std::logic_error&) {
    throw HttpError{400, "parameter '" + key + "' must be a number in [" + std::to_string(lo) + ", " +
                             std::to_string(hi) + "]"};
  }
}

template <typename F>
auto parse_or_400(F&& f) {
  try {
    return f();
  } catch (const ContractError& e) {
    throw HttpError{400, e.what()};
  }
}

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (start <= path.size()) {
    const auto slash = path.find('/', start);
    const auto end = slash == std::string::npos ? path.size() : slash;
    if (end > start) parts.push_back(path.substr(start, end - start));
    if (slash == std::string::npos) break;
    start = slash + 1;
  }
  return parts;
}

int prototype_id(const std::string& s, int k) {
  try {
    std::size_t used = 0;
    const int id = std::stoi(s, &used);
    if (used == s.size() && id >= 0 && id < k) return id;
  } catch (const std::logic_error&) {
  }
  throw HttpError{404, "no prototype '" + s + "' (K=" + std::to_string(k) + ")"};
}

std::string url_encode(const std::string& s) {
  static const char* hex = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : s) {
    if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
      out += static_cast<char>(c);
    } else {
      out += '%';
      out += hex[c >> 4];
      out += hex[c & 15];
    }
  }
  return out;
}

std::string content_type_for(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".bmp") return "image/bmp";
  if (ext == ".ppm") return "image/x-portable-pixmap";
  return "application/octet-stream";
}

json stats_summary(const PrototypeStats& s) {
  json j = s.to_json();
  j.erase("exemplars");
  return j;
}

double max_proportion(const PrototypeStats& s) {
  double m = 0.0;
  for (const auto& [d, p] : s.proportions) m = std::max(m, p);
  return m;
}

}  // namespace

InspectionService::InspectionService(PrototypeIndex index, Checkpoint checkpoint, ComparisonReport report,
                                     std::filesystem::path cache_dir)
    : index_(std::move(index)),
      checkpoint_(std::move(checkpoint)),
      report_(std::move(report)),
      cache_dir_(std::move(cache_dir)) {
  hash_ = protosim::checkpoint_hash(checkpoint_);
  if (index_.checkpoint_hash() != hash_)
    throw Error("index was built from checkpoint " + index_.checkpoint_hash() + " but the given checkpoint is " + hash_);
  if (!report_.checkpoint_hash.empty() && report_.checkpoint_hash != hash_)
    throw Error("report was built from checkpoint " + report_.checkpoint_hash + " but the given checkpoint is " + hash_);
  if (report_.K != index_.K() || checkpoint_.teacher.bank.K() != index_.K())
    throw Error("report, index and checkpoint disagree on K");
  report_body_ = report_.to_json().dump(2) + "\n";
}

InspectionService InspectionService::open(const std::filesystem::path& index_dir,
                                          const std::filesystem::path& checkpoint,
                                          const std::filesystem::path& report, std::filesystem::path cache_dir) {
  return InspectionService(load_index(index_dir), load_checkpoint(checkpoint), read_report(report),
                           std::move(cache_dir));
}

Response InspectionService::handle(const std::string& method, const std::string& path,
                                   const QueryParams& params) const {
  try {
    if (method != "GET") return error_response(405, "only GET is supported");
    const auto parts = split_path(path);
    if (parts.size() < 2 || parts[0] != "api") return error_response(404, "unknown endpoint '" + path + "'");
    if (parts.size() == 2 && parts[1] == "manifest") return manifest();
    if (parts.size() == 2 && parts[1] == "report") return {200, "application/json", report_body_};
    if (parts[1] == "prototypes") {
      if (parts.size() == 2) return prototypes(params);
      const int id = prototype_id(parts[2], index_.K());
      if (parts.size() == 3) return prototype(id, params);
      if (parts.size() == 4 && parts[3] == "examples") return examples(id, params);
      if (parts.size() == 5 && parts[3] == "attention") return attention(id, parts[4], params);
    }
    if (parts[1] == "images" && parts.size() == 4) return image(parts[2], parts[3]);
    return error_response(404, "unknown endpoint '" + path + "'");
  } catch (const HttpError& e) {
    return error_response(e.status, e.message);
  } catch (const std::exception& e) {
    spdlog::error("request {} failed: {}", path, e.what());
    return error_response(500, e.what());
  }
}

Response InspectionService::manifest() const {
  json datasets = json::array();
  for (const auto& d : index_.datasets())
    datasets.push_back({{"id", d.id},
                        {"name", d.name},
                        {"images", index_.records(d.id).size()},
                        {"has_labels", !d.labels.empty()}});
  return json_response({{"formats", {{"index", kIndexFormat}, {"report", kReportFormat}, {"checkpoint", kCheckpointFormat}}},
                        {"K", index_.K()},
                        {"N", index_.N()},
                        {"datasets", datasets},
                        {"mode", report_.mode},
                        {"thresholds",
                         {{"specificity", report_.threshold}, {"min_occurrences", report_.min_occurrences}}},
                        {"checkpoint_hash", hash_}});
}

Response InspectionService::prototypes(const QueryParams& params) const {
  const double threshold = real_param(params, "threshold", report_.threshold, 0.0, 1.0);
  const TokenKind kind = parse_or_400([&] { return parse_token_kind(param(params, "token_kind").value_or("any")); });
  const long long min_occ = int_param(params, "min_occurrences", 0, 0, std::numeric_limits<long long>::max());
  const long long offset = int_param(params, "offset", 0, 0, std::numeric_limits<int>::max());
  const long long limit = int_param(params, "limit", 50, 1, 1000);
  const std::string sort = param(params, "sort").value_or("id");
  if (sort != "id" && sort != "occurrences" && sort != "class_proportion" && sort != "specificity")
    throw HttpError{400, "sort must be one of id, occurrences, class_proportion, specificity"};
  const auto label = param(params, "label");

  SpecificityOptions opts{threshold, report_.min_occurrences, kind};
  std::vector<PrototypeStats> items;
  for (int p = 0; p < index_.K(); ++p) {
    PrototypeStats s = specificity(index_, p, opts);
    if (report_.mode == "summarisation") s.label.clear();
    if (s.total_occurrences < min_occ) continue;
    if (label && s.label != *label) continue;
    items.push_back(std::move(s));
  }
  auto by = [&](auto key) {
    std::stable_sort(items.begin(), items.end(), [&](const PrototypeStats& a, const PrototypeStats& b) {
      const double ka = key(a), kb = key(b);
      return ka != kb ? ka > kb : a.prototype_id < b.prototype_id;
    });
  };
  if (sort == "occurrences") by([](const PrototypeStats& s) { return static_cast<double>(s.total_occurrences); });
  if (sort == "class_proportion") by([](const PrototypeStats& s) { return s.class_proportion.value_or(-1.0); });
  if (sort == "specificity") by([](const PrototypeStats& s) { return max_proportion(s); });

  json out = json::array();
  for (auto i = static_cast<std::size_t>(offset); i < items.size() && out.size() < static_cast<std::size_t>(limit); ++i)
    out.push_back(stats_summary(items[i]));
  return json_response({{"total", items.size()},
                        {"offset", offset},
                        {"limit", limit},
                        {"sort", sort},
                        {"threshold", threshold},
                        {"token_kind", to_string(kind)},
                        {"label", label ? json(*label) : json(nullptr)},
                        {"items", out}});
}

Response InspectionService::prototype(int id, const QueryParams& params) const {
  const double threshold = real_param(params, "threshold", report_.threshold, 0.0, 1.0);
  const TokenKind kind = parse_or_400([&] { return parse_token_kind(param(params, "token_kind").value_or("any")); });
  PrototypeStats s = specificity(index_, id, {threshold, report_.min_occurrences, kind});
  if (report_.mode == "summarisation") s.label.clear();
  json per = json::array();
  for (const auto& d : index_.dataset_ids()) {
    const OccurrenceCounts c = index_.totals(id, d);
    auto it = s.proportions.find(d);
    per.push_back({{"dataset", d},
                   {"count", s.counts.at(d)},
                   {"proportion", it == s.proportions.end() ? json(nullptr) : json(it->second)},
                   {"class_count", c.class_count},
                   {"patch_count", c.patch_count}});
  }
  json j = stats_summary(s);
  j["per_dataset"] = per;
  j["threshold"] = threshold;
  j["token_kind"] = to_string(kind);
  return json_response(j);
}

Response InspectionService::examples(int id, const QueryParams& params) const {
  const std::string dataset = param(params, "dataset").value_or("");
  if (!dataset.empty() && index_.records(dataset).empty()) throw HttpError{404, "unknown dataset '" + dataset + "'"};
  const long long k = int_param(params, "k", 12, 0, 1000);
  const RankBy rank = parse_or_400([&] { return parse_rank(param(params, "rank").value_or("count")); });
  const TokenKind kind = parse_or_400([&] { return parse_token_kind(param(params, "token_kind").value_or("any")); });
  auto postings = index_.query(id, dataset, kind, rank);
  if (postings.size() > static_cast<std::size_t>(k)) postings.resize(static_cast<std::size_t>(k));
  json out = json::array();
  for (const auto& p : postings) {
    json e = p.to_json();
    e["image_url"] = "/api/images/" + url_encode(p.dataset_id) + "/" + url_encode(p.image_id);
    e["attention_url"] = "/api/prototypes/" + std::to_string(id) + "/attention/" + url_encode(p.image_id) +
                         "?dataset=" + url_encode(p.dataset_id);
    out.push_back(e);
  }
  return json_response({{"prototype", id},
                        {"dataset", dataset.empty() ? json(nullptr) : json(dataset)},
                        {"k", k},
                        {"rank", to_string(rank)},
                        {"token_kind", to_string(kind)},
                        {"examples", out}});
}

const ImageRecord* InspectionService::locate(const std::string& image_id, const QueryParams& params,
                                             std::string& dataset) const {
  if (auto d = param(params, "dataset")) {
    dataset = *d;
    const ImageRecord* r = index_.find(dataset, image_id);
    if (!r) throw HttpError{404, "image '" + image_id + "' is not indexed in dataset '" + dataset + "'"};
    return r;
  }
  const ImageRecord* found = nullptr;
  for (const auto& d : index_.dataset_ids()) {
    if (const ImageRecord* r = index_.find(d, image_id)) {
      if (found) throw HttpError{400, "image '" + image_id + "' exists in several datasets; pass ?dataset="};
      found = r;
      dataset = d;
    }
  }
  if (!found) throw HttpError{404, "image '" + image_id + "' is not indexed"};
  return found;
}

std::filesystem::path InspectionService::image_path(const std::string& dataset, const std::string& image_id) const {
  for (const auto& d : index_.datasets())
    if (d.id == dataset) return std::filesystem::path(d.root) / image_id;
  throw HttpError{404, "unknown dataset '" + dataset + "'"};
}

Response InspectionService::attention(int id, const std::string& image_id, const QueryParams& params) const {
  std::string dataset;
  locate(image_id, params, dataset);
  const bool contour = param(params, "contour").value_or("0") == "1";
  std::filesystem::path cached;
  if (!cache_dir_.empty()) {
    cached = cache_dir_ / hash_ / dataset / (std::to_string(id) + (contour ? "_c_" : "_") + image_id + ".png");
    if (std::filesystem::exists(cached)) {
      const auto bytes = read_file_bytes(cached);
      return {200, "image/png", std::string(bytes.begin(), bytes.end())};
    }
  }
  const Image img = load_image(image_path(dataset, image_id));
  const AttentionGrid grid = attention_map(checkpoint_.teacher, img, id);
  OverlayOptions opts;
  opts.contour = contour;
  const auto png = render_overlay_png(img, grid, opts);
  if (!cached.empty()) {
    try {
      std::filesystem::create_directories(cached.parent_path());
      write_file_atomic(cached, png);
    } catch (const std::exception& e) {
      spdlog::warn("cannot cache overlay {}: {}", cached.string(), e.what());
    }
  }
  return {200, "image/png", std::string(png.begin(), png.end())};
}

Response InspectionService::image(const std::string& dataset, const std::string& image_id) const {
  if (!index_.find(dataset, image_id))
    throw HttpError{404, "image '" + image_id + "' is not indexed in dataset '" + dataset + "'"};
  const auto path = image_path(dataset, image_id);
  const auto bytes = read_file_bytes(path);
  return {200, content_type_for(path), std::string(bytes.begin(), bytes.end())};
}

std::filesystem::path cache_dir_from_env() {
  const char* v = std::getenv("PROTOSIM_CACHE_DIR");
  return v && *v ? std::filesystem::path(v) : std::filesystem::path();
}

std::pair<std::string, int> parse_bind_address(const std::string& bind) {
  const auto colon = bind.rfind(':');
  const std::string host = colon == std::string::npos || colon == 0 ? "127.0.0.1" : bind.substr(0, colon);
  const std::string port = colon == std::string::npos ? bind : bind.substr(colon + 1);
  try {
    std::size_t used = 0;
    const int p = std::stoi(port, &used);
    if (used == port.size() && p >= 0 && p <= 65535) return {host, p};
  } catch (const std::logic_error&) {
  }
  throw ContractError("bad bind address '" + bind + "' (expected host:port)");
}

void serve(const InspectionService& service, const ServeOptions& options) {
  httplib::Server server;
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Methods", "GET, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
  server.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  server.Get(".*", [&service](const httplib::Request& req, httplib::Response& res) {
    QueryParams params(req.params.begin(), req.params.end());
    const Response r = service.handle("GET", req.path, params);
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  });
  int port = options.port;
  if (port == 0) {
    port = server.bind_to_any_port(options.host);
    if (port < 0) throw Error("cannot bind " + options.host);
  } else if (!server.bind_to_port(options.host, port)) {
    throw Error("cannot bind " + options.host + ":" + std::to_string(port));
  }
  std::jthread watcher;
  if (options.stop) {
    watcher = std::jthread([&server, stop = options.stop](std::stop_token st) {
      server.wait_until_ready();
      while (!st.stop_requested() && !stop->load()) std::this_thread::sleep_for(std::chrono::milliseconds(20));
      server.stop();
    });
  }
  if (options.on_listen) options.on_listen(port);
  spdlog::info("serving on http://{}:{}", options.host, port);
  server.listen_after_bind();
  if (watcher.joinable()) watcher.request_stop();
}

}  // namespace protosim
