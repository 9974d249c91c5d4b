#pragma once

#include "protosim/autograd.hpp"
#include "protosim/common.hpp"
#include "protosim/index.hpp"
#include "protosim/model.hpp"
#include "protosim/probe.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace protosim::testing {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t");
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

MatrixD random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0);

/// Naive triple loop, the independent oracle for Eigen products.
MatrixD naive_matmul(const MatrixD& a, const MatrixD& b);

using TapedScalar = std::function<ag::Var<double>(ag::Tape<double>&, const std::vector<ag::Var<double>>&)>;

struct GradCheck {
  double max_abs_error = 0;
  double max_rel_error = 0;
};

/// Compares tape gradients of `f` at `inputs` against central differences.
GradCheck check_gradients(const TapedScalar& f, std::vector<MatrixD> inputs, double h = 1e-6);

/// Records with uniformly random class and patch prototypes, ids
/// "img_00000.png"... per dataset, and affinities derived from the seed.
std::vector<ImageRecord> random_records(int per_dataset, int prototypes, int patches,
                                        const std::vector<std::string>& datasets, Rng& rng);

/// A frozen toy model whose class token is a fixed function of the mean
/// patch colour: attention is uniform, values pass through unchanged and the
/// MLPs output zero. Each class is a solid hue with pixel noise, and class c
/// owns bank row `class_prototype[c]`, set to the class token of its clean
/// image. The remaining rows are small random vectors that never win.
struct PlantedProbe {
  ModelState model;
  std::vector<LabeledImage> images;
  std::vector<std::string> class_names;
  std::vector<int> class_prototype;
};

PlantedProbe make_planted_probe(int classes, int per_class, int prototypes, std::uint64_t seed);

/// On-disk inputs of an inspection service: two small planted datasets, a
/// seeded untrained checkpoint, its index and a comparison report.
struct ServiceFixture {
  std::filesystem::path data_dir;
  std::filesystem::path checkpoint;
  std::filesystem::path index_dir;
  std::filesystem::path report_dir;
  int busiest_prototype = 0;     // most occurrences overall
  std::string sample_image_id;   // an image of dataset A using busiest_prototype
};

ServiceFixture build_service_fixture(const std::filesystem::path& root);

struct GoldenRequest {
  std::string name;
  std::string url;  // path with optional query string
};

/// Every endpoint, with filters, paging and error cases.
std::vector<GoldenRequest> golden_requests(const ServiceFixture& fixture);

/// "a=1&b=2" into query parameters (no percent-decoding needed for fixtures).
std::multimap<std::string, std::string> parse_query(const std::string& query);

/// Stable text form of a response: request line, status, content type and
/// the body (JSON pretty-printed; binary bodies as size and FNV-1a digest).
std::string describe_response(const std::string& url, int status, const std::string& content_type,
                              const std::string& body);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace protosim::testing
