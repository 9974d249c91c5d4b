#include "protosim/index.hpp"

#include "protosim/io.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <cstring>
#include <sstream>
#include <thread>

namespace protosim {

using nlohmann::json;

std::vector<int> ImageRecord::tokens() const {
  std::vector<int> t;
  t.reserve(patch_prototypes.size() + 1);
  t.push_back(class_prototype);
  t.insert(t.end(), patch_prototypes.begin(), patch_prototypes.end());
  return t;
}

json ImageRecord::to_json() const {
  json aff = json::array();
  for (const auto& [p, v] : top_affinities) aff.push_back({p, v});
  return {{"image_id", image_id},
          {"dataset_id", dataset_id},
          {"class_prototype", class_prototype},
          {"patch_prototypes", patch_prototypes},
          {"top_affinities", aff}};
}

ImageRecord ImageRecord::from_json(const json& j) {
  ImageRecord r;
  r.image_id = j.at("image_id").get<std::string>();
  r.dataset_id = j.at("dataset_id").get<std::string>();
  r.class_prototype = j.at("class_prototype").get<int>();
  r.patch_prototypes = j.at("patch_prototypes").get<std::vector<int>>();
  if (j.contains("top_affinities"))
    for (const auto& e : j.at("top_affinities")) r.top_affinities.emplace_back(e.at(0).get<int>(), e.at(1).get<float>());
  return r;
}

ImageRecord assign_image(const ModelState& model, const Image& image, const std::string& image_id,
                         const std::string& dataset_id) {
  const Matrix logits = image_logits(model, image);
  if (!all_finite(logits)) throw Error("non-finite logits for image '" + image_id + "'");
  const Matrix lt = logits.transpose();
  const auto idx = argmax_rows<float>(lt);
  const std::vector<int> winners(idx.begin(), idx.end());
  ImageRecord r;
  r.image_id = image_id;
  r.dataset_id = dataset_id;
  r.class_prototype = winners[0];
  r.patch_prototypes.assign(winners.begin() + 1, winners.end());
  std::map<int, float> best;
  for (std::size_t t = 0; t < winners.size(); ++t) {
    const int p = winners[t];
    const float v = logits(p, static_cast<Eigen::Index>(t));
    auto [it, inserted] = best.emplace(p, v);
    if (!inserted) it->second = std::max(it->second, v);
  }
  r.top_affinities.assign(best.begin(), best.end());
  std::sort(r.top_affinities.begin(), r.top_affinities.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  return r;
}

std::vector<ImageRecord> index_dataset(const Checkpoint& checkpoint, const DatasetDescriptor& dataset,
                                       const IndexOptions& options, LoadReport* report) {
  if (options.workers < 1) throw ContractError("index_dataset: workers must be >= 1");
  const ModelState& model = options.net == InferenceNet::teacher ? static_cast<const ModelState&>(checkpoint.teacher)
                                                                 : checkpoint.student;
  std::vector<LoadedImage> images = load_dataset(dataset, report);
  std::vector<ImageRecord> records(images.size());
  std::atomic<std::size_t> done{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(options.workers));
  auto work = [&](int w) {
    try {
      for (std::size_t i = static_cast<std::size_t>(w); i < images.size(); i += static_cast<std::size_t>(options.workers)) {
        records[i] = assign_image(model, images[i].image, images[i].image_id, dataset.id);
        const std::size_t d = ++done;
        if (options.progress && options.workers == 1) options.progress(d, images.size());
      }
    } catch (...) {
      errors[static_cast<std::size_t>(w)] = std::current_exception();
    }
  };
  if (options.workers == 1) {
    work(0);
  } else {
    std::vector<std::jthread> threads;
    for (int w = 0; w < options.workers; ++w) threads.emplace_back(work, w);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  if (options.progress && options.workers > 1) options.progress(images.size(), images.size());
  std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.image_id < b.image_id; });
  return records;
}

const char* to_string(TokenKind kind) {
  switch (kind) {
    case TokenKind::class_token: return "class";
    case TokenKind::patch: return "patch";
    default: return "any";
  }
}

TokenKind parse_token_kind(const std::string& s) {
  if (s == "class") return TokenKind::class_token;
  if (s == "patch") return TokenKind::patch;
  if (s == "any") return TokenKind::any;
  throw ContractError("unknown token kind '" + s + "' (expected class, patch or any)");
}

const char* to_string(RankBy rank) { return rank == RankBy::count ? "count" : "affinity"; }

RankBy parse_rank(const std::string& s) {
  if (s == "count") return RankBy::count;
  if (s == "affinity") return RankBy::affinity;
  throw ContractError("unknown rank '" + s + "' (expected count or affinity)");
}

json Posting::to_json() const {
  return {{"image_id", image_id}, {"dataset_id", dataset_id}, {"positions", positions}, {"count", count},
          {"affinity", affinity}};
}

long long OccurrenceCounts::get(TokenKind kind) const {
  switch (kind) {
    case TokenKind::class_token: return class_count;
    case TokenKind::patch: return patch_count;
    default: return total();
  }
}

json DatasetInfo::to_json() const { return {{"id", id}, {"name", name}, {"root", root}, {"labels", labels}}; }

DatasetInfo DatasetInfo::from_json(const json& j) {
  return {j.at("id").get<std::string>(), j.value("name", j.at("id").get<std::string>()), j.value("root", ""),
          j.value("labels", "")};
}

DatasetInfo DatasetInfo::from_descriptor(const DatasetDescriptor& d) {
  return {d.id, d.name, d.root.string(), d.labels ? d.labels->string() : std::string()};
}

std::vector<std::string> PrototypeIndex::dataset_ids() const { return dataset_order_; }

const std::vector<ImageRecord>& PrototypeIndex::records(const std::string& dataset_id) const {
  static const std::vector<ImageRecord> empty;
  auto it = records_.find(dataset_id);
  return it == records_.end() ? empty : it->second;
}

std::vector<ImageRecord> PrototypeIndex::all_records() const {
  std::vector<ImageRecord> out;
  for (const auto& [id, recs] : records_) out.insert(out.end(), recs.begin(), recs.end());
  return out;
}

std::size_t PrototypeIndex::image_count() const {
  std::size_t n = 0;
  for (const auto& [id, recs] : records_) n += recs.size();
  return n;
}

const ImageRecord* PrototypeIndex::find(const std::string& dataset_id, const std::string& image_id) const {
  const auto& recs = records(dataset_id);
  auto it = std::lower_bound(recs.begin(), recs.end(), image_id,
                             [](const ImageRecord& r, const std::string& id) { return r.image_id < id; });
  return it != recs.end() && it->image_id == image_id ? &*it : nullptr;
}

void PrototypeIndex::check_prototype(int prototype) const {
  if (prototype < 0 || prototype >= k_)
    throw ContractError("prototype id " + std::to_string(prototype) + " outside [0, " + std::to_string(k_) + ")");
}

OccurrenceCounts PrototypeIndex::totals(int prototype) const {
  check_prototype(prototype);
  OccurrenceCounts c;
  for (const auto& [id, t] : totals_[static_cast<std::size_t>(prototype)]) {
    c.class_count += t.class_count;
    c.patch_count += t.patch_count;
  }
  return c;
}

OccurrenceCounts PrototypeIndex::totals(int prototype, const std::string& dataset_id) const {
  check_prototype(prototype);
  const auto& m = totals_[static_cast<std::size_t>(prototype)];
  auto it = m.find(dataset_id);
  return it == m.end() ? OccurrenceCounts{} : it->second;
}

std::vector<Posting> PrototypeIndex::query(int prototype, const std::string& dataset_filter, TokenKind kind,
                                           RankBy rank) const {
  check_prototype(prototype);
  std::vector<Posting> out;
  for (const Entry& e : postings_[static_cast<std::size_t>(prototype)]) {
    const std::string& ds = dataset_order_[static_cast<std::size_t>(e.dataset)];
    if (!dataset_filter.empty() && ds != dataset_filter) continue;
    Posting p;
    for (int pos : e.positions)
      if (kind == TokenKind::any || (kind == TokenKind::class_token) == (pos == 0)) p.positions.push_back(pos);
    if (p.positions.empty()) continue;
    p.image_id = records_.at(ds)[e.image].image_id;
    p.dataset_id = ds;
    p.count = static_cast<int>(p.positions.size());
    p.affinity = e.affinity;
    out.push_back(std::move(p));
  }
  std::sort(out.begin(), out.end(), [rank](const Posting& a, const Posting& b) {
    if (rank == RankBy::count && a.count != b.count) return a.count > b.count;
    if (rank == RankBy::affinity && a.affinity != b.affinity) return a.affinity > b.affinity;
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    return a.dataset_id < b.dataset_id;
  });
  return out;
}

void PrototypeIndex::ensure_dataset(const std::string& id) {
  if (std::none_of(datasets_.begin(), datasets_.end(), [&](const DatasetInfo& d) { return d.id == id; }))
    datasets_.push_back({id, id, "", ""});
}

void PrototypeIndex::add(const std::vector<ImageRecord>& records) {
  if (k_ < 2) throw ContractError("index needs K >= 2");
  for (const auto& r : records) {
    if (static_cast<int>(r.patch_prototypes.size()) != n_)
      throw ContractError("record '" + r.image_id + "' has " + std::to_string(r.patch_prototypes.size()) +
                          " patch assignments, index expects N=" + std::to_string(n_));
    for (int p : r.tokens())
      if (p < 0 || p >= k_)
        throw ContractError("record '" + r.image_id + "' has prototype " + std::to_string(p) + " outside [0, " +
                            std::to_string(k_) + ")");
  }
  std::map<std::string, std::vector<ImageRecord>> merged = records_;
  for (const auto& r : records) merged[r.dataset_id].push_back(r);
  for (auto& [id, recs] : merged) {
    std::sort(recs.begin(), recs.end(), [](const auto& a, const auto& b) { return a.image_id < b.image_id; });
    auto dup = std::adjacent_find(recs.begin(), recs.end(),
                                  [](const auto& a, const auto& b) { return a.image_id == b.image_id; });
    if (dup != recs.end())
      throw ContractError("duplicate image '" + dup->image_id + "' in dataset '" + id + "'");
  }
  records_ = std::move(merged);
  for (const auto& [id, recs] : records_) ensure_dataset(id);
  rebuild();
}

void PrototypeIndex::rebuild() {
  dataset_order_.clear();
  for (const auto& [id, recs] : records_) dataset_order_.push_back(id);
  postings_.assign(static_cast<std::size_t>(k_), {});
  totals_.assign(static_cast<std::size_t>(k_), {});
  for (std::size_t d = 0; d < dataset_order_.size(); ++d) {
    const std::string& ds = dataset_order_[d];
    const auto& recs = records_.at(ds);
    for (std::size_t i = 0; i < recs.size(); ++i) {
      const std::vector<int> tokens = recs[i].tokens();
      std::map<int, std::vector<int>> by_proto;
      for (std::size_t t = 0; t < tokens.size(); ++t) by_proto[tokens[t]].push_back(static_cast<int>(t));
      for (auto& [p, positions] : by_proto) {
        float aff = 0.0f;
        for (const auto& [ap, v] : recs[i].top_affinities)
          if (ap == p) aff = v;
        auto& tot = totals_[static_cast<std::size_t>(p)][ds];
        for (int pos : positions) (pos == 0 ? tot.class_count : tot.patch_count) += 1;
        postings_[static_cast<std::size_t>(p)].push_back({static_cast<int>(d), i, std::move(positions), aff});
      }
    }
  }
}

PrototypeIndex build_index(const std::vector<ImageRecord>& records, int prototypes, int patches) {
  PrototypeIndex index(prototypes, patches);
  index.add(records);
  return index;
}

PrototypeIndex merge_indexes(const PrototypeIndex& a, const PrototypeIndex& b) {
  if (a.K() != b.K() || a.N() != b.N())
    throw ContractError("cannot merge indexes with K/N " + std::to_string(a.K()) + "/" + std::to_string(a.N()) +
                        " and " + std::to_string(b.K()) + "/" + std::to_string(b.N()));
  if (!a.checkpoint_hash().empty() && !b.checkpoint_hash().empty() && a.checkpoint_hash() != b.checkpoint_hash())
    throw ContractError("cannot merge indexes built from different checkpoints");
  PrototypeIndex out(a.K(), a.N());
  out.set_checkpoint_hash(a.checkpoint_hash().empty() ? b.checkpoint_hash() : a.checkpoint_hash());
  std::vector<ImageRecord> all = a.all_records();
  const auto rb = b.all_records();
  all.insert(all.end(), rb.begin(), rb.end());
  for (const auto* src : {&a, &b})
    for (const auto& d : src->datasets())
      if (std::none_of(out.datasets().begin(), out.datasets().end(), [&](const auto& x) { return x.id == d.id; }))
        out.datasets().push_back(d);
  std::sort(out.datasets().begin(), out.datasets().end(),
            [](const DatasetInfo& x, const DatasetInfo& y) { return x.id < y.id; });
  out.add(all);
  return out;
}

namespace {

constexpr char kPostingsMagic[8] = {'P', 'S', 'P', 'O', 'S', 'T', '0', '1'};

std::string records_fingerprint(const std::map<std::string, std::string>& texts) {
  Fnv1a h;
  for (const auto& [id, text] : texts) {
    h.update(id.data(), id.size());
    h.update(text.data(), text.size());
  }
  return h.hex();
}

template <typename T>
void put(std::vector<std::uint8_t>& buf, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  buf.insert(buf.end(), p, p + sizeof(T));
}

struct Reader {
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;
  template <typename T>
  T get() {
    if (pos + sizeof(T) > buf.size()) throw Error("truncated postings cache");
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
};

std::string valid_dataset_file_id(const std::string& id) {
  if (id.empty() || id.find_first_of("/\\") != std::string::npos || id == "." || id == "..")
    throw ContractError("dataset id '" + id + "' cannot be used as a file name");
  return id;
}

}  // namespace

void save_index(const PrototypeIndex& index, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "records");
  std::map<std::string, std::string> texts;
  for (const auto& [id, recs] : index.records_) {
    std::string text;
    for (const auto& r : recs) text += r.to_json().dump() + "\n";
    write_file_atomic(dir / "records" / (valid_dataset_file_id(id) + ".jsonl"), text);
    texts[id] = std::move(text);
  }
  json datasets = json::array();
  for (const auto& d : index.datasets_) datasets.push_back(d.to_json());
  json manifest = {{"format", kIndexFormat},
                   {"K", index.k_},
                   {"N", index.n_},
                   {"datasets", datasets},
                   {"checkpoint_hash", index.checkpoint_hash_},
                   {"images", index.image_count()}};
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");

  std::vector<std::uint8_t> buf(kPostingsMagic, kPostingsMagic + 8);
  const std::string fp = records_fingerprint(texts);
  buf.insert(buf.end(), fp.begin(), fp.end());
  put<std::int32_t>(buf, index.k_);
  for (const auto& entries : index.postings_) {
    put<std::uint64_t>(buf, entries.size());
    for (const auto& e : entries) {
      put<std::int32_t>(buf, e.dataset);
      put<std::uint64_t>(buf, e.image);
      put<float>(buf, e.affinity);
      put<std::uint32_t>(buf, static_cast<std::uint32_t>(e.positions.size()));
      for (int p : e.positions) put<std::int32_t>(buf, p);
    }
  }
  write_file_atomic(dir / "postings.bin", buf);
}

PrototypeIndex load_index(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file_text(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw Error("malformed index manifest in '" + dir.string() + "': " + e.what());
  }
  if (manifest.value("format", "") != kIndexFormat)
    throw Error("'" + dir.string() + "' is not a " + kIndexFormat + " index");
  PrototypeIndex index(manifest.at("K").get<int>(), manifest.at("N").get<int>());
  index.checkpoint_hash_ = manifest.value("checkpoint_hash", "");
  for (const auto& d : manifest.at("datasets")) index.datasets_.push_back(DatasetInfo::from_json(d));

  std::map<std::string, std::string> texts;
  for (const auto& d : index.datasets_) {
    const auto path = dir / "records" / (valid_dataset_file_id(d.id) + ".jsonl");
    if (!std::filesystem::exists(path)) continue;
    std::string text = read_file_text(path);
    std::vector<ImageRecord> recs;
    std::istringstream ss(text);
    std::string line;
    while (std::getline(ss, line))
      if (!line.empty()) recs.push_back(ImageRecord::from_json(json::parse(line)));
    index.records_[d.id] = std::move(recs);
    texts[d.id] = std::move(text);
  }

  const auto cache = dir / "postings.bin";
  if (std::filesystem::exists(cache)) {
    try {
      const auto buf = read_file_bytes(cache);
      if (buf.size() < 24 || std::memcmp(buf.data(), kPostingsMagic, 8) != 0) throw Error("bad magic");
      if (std::string(buf.begin() + 8, buf.begin() + 24) != records_fingerprint(texts))
        throw Error("records changed since the cache was written");
      Reader rd{buf, 24};
      if (rd.get<std::int32_t>() != index.k_) throw Error("K mismatch");
      for (const auto& [id, recs] : index.records_) index.dataset_order_.push_back(id);
      index.postings_.assign(static_cast<std::size_t>(index.k_), {});
      index.totals_.assign(static_cast<std::size_t>(index.k_), {});
      for (int p = 0; p < index.k_; ++p) {
        const auto n = rd.get<std::uint64_t>();
        for (std::uint64_t i = 0; i < n; ++i) {
          PrototypeIndex::Entry e;
          e.dataset = rd.get<std::int32_t>();
          e.image = rd.get<std::uint64_t>();
          e.affinity = rd.get<float>();
          const auto np = rd.get<std::uint32_t>();
          if (e.dataset < 0 || static_cast<std::size_t>(e.dataset) >= index.dataset_order_.size())
            throw Error("dataset out of range");
          const std::string& ds = index.dataset_order_[static_cast<std::size_t>(e.dataset)];
          if (e.image >= index.records_.at(ds).size()) throw Error("image out of range");
          auto& tot = index.totals_[static_cast<std::size_t>(p)][ds];
          for (std::uint32_t j = 0; j < np; ++j) {
            const int pos = rd.get<std::int32_t>();
            e.positions.push_back(pos);
            (pos == 0 ? tot.class_count : tot.patch_count) += 1;
          }
          index.postings_[static_cast<std::size_t>(p)].push_back(std::move(e));
        }
      }
      if (rd.pos != buf.size()) throw Error("trailing bytes");
      return index;
    } catch (const Error& e) {
      spdlog::warn("ignoring postings cache '{}': {}; rebuilding from records", cache.string(), e.what());
    }
  }
  std::vector<ImageRecord> all = index.all_records();
  index.records_.clear();
  index.add(all);
  return index;
}

std::string checkpoint_hash(const Checkpoint& checkpoint) {
  Fnv1a h;
  const std::string s = model_hash(checkpoint.student);
  const std::string t = model_hash(checkpoint.teacher);
  h.update(s.data(), s.size());
  h.update(t.data(), t.size());
  return h.hex();
}

}  // namespace protosim
