#include "support/fixtures.hpp"

#include "protosim/analytics.hpp"
#include "protosim/backbone.hpp"
#include "protosim/ssl.hpp"
#include "protosim/synth.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cstdio>
#include <map>
#include <fstream>
#include <sstream>
#include <unistd.h>

namespace protosim::testing {

namespace fs = std::filesystem;

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() /
          ("protosim-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

MatrixD random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale) {
  MatrixD m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = scale * standard_normal(rng);
  return m;
}

MatrixD naive_matmul(const MatrixD& a, const MatrixD& b) {
  MatrixD out = MatrixD::Zero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
      double s = 0;
      for (Eigen::Index k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

namespace {
double evaluate(const TapedScalar& f, const std::vector<MatrixD>& inputs) {
  ag::Tape<double> tape;
  std::vector<ag::Var<double>> vars;
  for (const auto& m : inputs) vars.push_back(tape.reference(m, false));
  return f(tape, vars).value()(0, 0);
}
}  // namespace

GradCheck check_gradients(const TapedScalar& f, std::vector<MatrixD> inputs, double h) {
  std::vector<MatrixD> analytic;
  {
    ag::Tape<double> tape;
    std::vector<ag::Var<double>> vars;
    for (const auto& m : inputs) vars.push_back(tape.reference(m, true));
    ag::Var<double> out = f(tape, vars);
    tape.backward(out);
    for (std::size_t i = 0; i < vars.size(); ++i) {
      const MatrixD* g = tape.grad(vars[i]);
      analytic.push_back(g ? *g : MatrixD::Zero(inputs[i].rows(), inputs[i].cols()));
    }
  }
  GradCheck result;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (Eigen::Index r = 0; r < inputs[i].rows(); ++r)
      for (Eigen::Index c = 0; c < inputs[i].cols(); ++c) {
        const double keep = inputs[i](r, c);
        inputs[i](r, c) = keep + h;
        const double up = evaluate(f, inputs);
        inputs[i](r, c) = keep - h;
        const double down = evaluate(f, inputs);
        inputs[i](r, c) = keep;
        const double numeric = (up - down) / (2 * h);
        const double err = std::abs(numeric - analytic[i](r, c));
        result.max_abs_error = std::max(result.max_abs_error, err);
        result.max_rel_error =
            std::max(result.max_rel_error, err / std::max(1.0, std::abs(numeric)));
      }
  }
  return result;
}

std::vector<ImageRecord> random_records(int per_dataset, int prototypes, int patches,
                                        const std::vector<std::string>& datasets, Rng& rng) {
  std::vector<ImageRecord> out;
  for (const auto& ds : datasets)
    for (int i = 0; i < per_dataset; ++i) {
      ImageRecord r;
      char id[32];
      std::snprintf(id, sizeof(id), "img_%05d.png", i);
      r.image_id = id;
      r.dataset_id = ds;
      r.class_prototype = static_cast<int>(rng() % static_cast<std::uint64_t>(prototypes));
      for (int n = 0; n < patches; ++n)
        r.patch_prototypes.push_back(static_cast<int>(rng() % static_cast<std::uint64_t>(prototypes)));
      std::map<int, float> best;
      for (int p : r.tokens()) {
        const float a = static_cast<float>(uniform_open(rng));
        auto it = best.find(p);
        if (it == best.end() || a > it->second) best[p] = a;
      }
      for (const auto& [p, a] : best) r.top_affinities.emplace_back(p, a);
      std::sort(r.top_affinities.begin(), r.top_affinities.end(), [](const auto& x, const auto& y) {
        return x.second != y.second ? x.second > y.second : x.first < y.first;
      });
      out.push_back(std::move(r));
    }
  return out;
}

namespace {

Image solid(const std::array<float, 3>& rgb, double noise, Rng& rng) {
  Image img(32, 32, 3);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = rgb[static_cast<std::size_t>(c)] + noise * (uniform_open(rng) - 0.5);
        img.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  return img;
}

}  // namespace

PlantedProbe make_planted_probe(int classes, int per_class, int prototypes, std::uint64_t seed) {
  PlantedProbe out;
  BackboneHandle bb = init_backbone("toy-vit-s8-d16-l1-h2", parse_toy_config("toy-vit-s8-d16-l1-h2"), seed);
  const int d = bb.config.embed_dim;
  for (auto& b : bb.params.blocks) {
    b.qkv_w.setZero();
    b.qkv_w.bottomRows(d) = Matrix::Identity(d, d);
    b.proj_w = Matrix::Identity(d, d);
    b.fc1_w.setZero();
    b.fc2_w.setZero();
  }
  // Larger patch weights spread the colours apart in token space.
  bb.params.patch_w *= 20.0f;
  out.model.backbone = std::make_shared<BackboneHandle>(std::move(bb));
  Rng rng(seed);
  Matrix bank = (random_matrix(prototypes, d, rng, 0.01)).cast<float>();
  for (int c = 0; c < classes; ++c) {
    const int p = (3 * c + 1) % prototypes;
    out.class_prototype.push_back(p);
    out.class_names.push_back("class" + std::to_string(c));
  }
  std::vector<std::array<float, 3>> colours;
  for (int c = 0; c < classes; ++c) {
    const double h = 6.0 * c / classes;
    const int i = static_cast<int>(h);
    const float f = static_cast<float>(h - i);
    std::array<float, 3> rgb{};
    switch (i % 6) {
      case 0: rgb = {1, f, 0}; break;
      case 1: rgb = {1 - f, 1, 0}; break;
      case 2: rgb = {0, 1, f}; break;
      case 3: rgb = {0, 1 - f, 1}; break;
      case 4: rgb = {f, 0, 1}; break;
      default: rgb = {1, 0, 1 - f}; break;
    }
    colours.push_back(rgb);
    const Image clean = solid(rgb, 0.0, rng);
    bank.row(out.class_prototype[static_cast<std::size_t>(c)]) = encode(*out.model.backbone, clean).tokens.row(0);
  }
  out.model.bank = PrototypeBank(std::move(bank));
  out.model.head = init_head(d, 4, 4, 4, rng);
  for (int i = 0; i < per_class; ++i)
    for (int c = 0; c < classes; ++c) {
      char id[32];
      std::snprintf(id, sizeof(id), "c%d_%04d.png", c, i);
      out.images.push_back({id, out.class_names[static_cast<std::size_t>(c)],
                            solid(colours[static_cast<std::size_t>(c)], 0.2, rng)});
    }
  return out;
}

ServiceFixture build_service_fixture(const fs::path& root) {
  ServiceFixture f;
  f.data_dir = root / "data";
  f.checkpoint = root / "model.ckpt";
  f.index_dir = root / "index";
  f.report_dir = root / "report";

  PlantedSpec spec;
  spec.images_per_dataset = 10;
  spec.seed = 4;
  write_planted(make_planted_pair(spec), f.data_dir);

  TrainConfig cfg;
  cfg.backbone = "toy-vit-s8-d16-l1-h2";
  cfg.prototypes = 8;
  cfg.head_hidden_dim = 8;
  cfg.head_bottleneck_dim = 4;
  cfg.head_output_dim = 8;
  cfg.seed = 1;
  const Trainer trainer(cfg, load_pretrained("toy-vit-s8-d16-l1-h2,seed=3"));
  const Checkpoint ckpt = trainer.checkpoint(0);
  save_checkpoint(f.checkpoint, ckpt);

  PrototypeIndex idx(ckpt.teacher.bank.K(), ckpt.teacher.backbone->config.patch_count());
  idx.set_checkpoint_hash(checkpoint_hash(ckpt));
  for (const std::string id : {"A", "B"}) {
    const DatasetDescriptor d{id, "planted " + id, f.data_dir / id, f.data_dir / (id + "_labels.csv")};
    idx.datasets().push_back(DatasetInfo::from_descriptor(d));
    idx.add(index_dataset(ckpt, d));
  }
  save_index(idx, f.index_dir);

  ReportOptions opts;
  opts.top_k = 3;
  const ComparisonReport rep = compare_report(idx, ckpt.teacher.bank, opts);
  write_report(rep, idx, f.report_dir);

  long long best = -1;
  for (int p = 0; p < idx.K(); ++p)
    if (idx.totals(p).total() > best) best = idx.totals(p).total(), f.busiest_prototype = p;
  f.sample_image_id = idx.query(f.busiest_prototype, "A").front().image_id;
  return f;
}

std::vector<GoldenRequest> golden_requests(const ServiceFixture& f) {
  const std::string p = std::to_string(f.busiest_prototype);
  const std::string img = f.sample_image_id;
  return {
      {"manifest", "/api/manifest"},
      {"report", "/api/report"},
      {"prototypes", "/api/prototypes"},
      {"prototypes_threshold", "/api/prototypes?threshold=0.6&sort=occurrences"},
      {"prototypes_label", "/api/prototypes?label=shared"},
      {"prototypes_page", "/api/prototypes?offset=2&limit=3&sort=class_proportion"},
      {"prototypes_class_tokens", "/api/prototypes?token_kind=class&min_occurrences=2&sort=specificity"},
      {"prototype", "/api/prototypes/" + p},
      {"prototype_threshold", "/api/prototypes/" + p + "?threshold=0.5"},
      {"examples", "/api/prototypes/" + p + "/examples?k=3"},
      {"examples_dataset_affinity", "/api/prototypes/" + p + "/examples?dataset=B&k=2&rank=affinity"},
      {"examples_class_tokens", "/api/prototypes/" + p + "/examples?token_kind=class"},
      {"attention", "/api/prototypes/" + p + "/attention/" + img + "?dataset=A"},
      {"attention_contour", "/api/prototypes/" + p + "/attention/" + img + "?dataset=A&contour=1"},
      {"image", "/api/images/A/" + img},
      {"error_unknown_prototype", "/api/prototypes/999"},
      {"error_bad_prototype_id", "/api/prototypes/abc"},
      {"error_bad_threshold", "/api/prototypes?threshold=2"},
      {"error_bad_sort", "/api/prototypes?sort=colour"},
      {"error_unknown_dataset", "/api/prototypes/" + p + "/examples?dataset=Z"},
      {"error_unknown_image", "/api/images/A/missing.png"},
      {"error_unknown_endpoint", "/api/nothing"},
  };
}

std::multimap<std::string, std::string> parse_query(const std::string& query) {
  std::multimap<std::string, std::string> out;
  std::size_t start = 0;
  while (start < query.size()) {
    const auto amp = query.find('&', start);
    const std::string part = query.substr(start, amp == std::string::npos ? std::string::npos : amp - start);
    const auto eq = part.find('=');
    if (!part.empty()) out.emplace(part.substr(0, eq), eq == std::string::npos ? "" : part.substr(eq + 1));
    if (amp == std::string::npos) break;
    start = amp + 1;
  }
  return out;
}

std::string describe_response(const std::string& url, int status, const std::string& content_type,
                              const std::string& body) {
  std::ostringstream out;
  out << "GET " << url << "\nstatus: " << status << "\ncontent-type: " << content_type << "\n\n";
  if (content_type.starts_with("application/json")) {
    out << nlohmann::json::parse(body).dump(2) << "\n";
  } else {
    Fnv1a h;
    h.update(body.data(), body.size());
    out << "binary " << body.size() << " bytes fnv1a " << h.hex() << "\n";
  }
  return out.str();
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
}

}  // namespace protosim::testing
