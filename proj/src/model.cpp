#include "protosim/model.hpp"

#include "protosim/io.hpp"
#include "protosim/safetensors.hpp"

#include <cmath>

namespace protosim {

const char* to_string(HeadInput h) {
  return h == HeadInput::class_token ? "class_token" : "class_plus_mean_patch";
}

HeadInput parse_head_input(const std::string& s) {
  if (s == "class_token") return HeadInput::class_token;
  if (s == "class_plus_mean_patch") return HeadInput::class_plus_mean_patch;
  throw ContractError("unknown head input '" + s + "'");
}

void HeadParams::visit(const std::function<void(const std::string&, Matrix&)>& fn) {
  fn("fc1.weight", fc1_w);
  fn("fc1.bias", fc1_b);
  fn("fc2.weight", fc2_w);
  fn("fc2.bias", fc2_b);
  fn("fc3.weight", fc3_w);
  fn("fc3.bias", fc3_b);
  fn("last.weight", last_w);
}

void HeadParams::visit(const std::function<void(const std::string&, const Matrix&)>& fn) const {
  const_cast<HeadParams*>(this)->visit(
      [&](const std::string& name, Matrix& m) { fn(name, static_cast<const Matrix&>(m)); });
}

namespace {

Matrix trunc_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double v;
    do {
      v = standard_normal(rng);
    } while (std::abs(v) > 2.0);
    m.data()[i] = static_cast<float>(v * stddev);
  }
  return m;
}

void require_finite(const Matrix& m, const char* stage) {
  if (!all_finite(m)) throw Error(std::string("non-finite activations after ") + stage);
}

}  // namespace

HeadParams init_head(int input_dim, int hidden_dim, int bottleneck_dim, int output_dim, Rng& rng) {
  if (input_dim < 1 || hidden_dim < 1 || bottleneck_dim < 1 || output_dim < 2)
    throw ContractError("projection head dimensions must be positive (output >= 2)");
  HeadParams h;
  h.fc1_w = trunc_normal(hidden_dim, input_dim, 0.02, rng);
  h.fc1_b = Matrix::Zero(1, hidden_dim);
  h.fc2_w = trunc_normal(hidden_dim, hidden_dim, 0.02, rng);
  h.fc2_b = Matrix::Zero(1, hidden_dim);
  h.fc3_w = trunc_normal(bottleneck_dim, hidden_dim, 0.02, rng);
  h.fc3_b = Matrix::Zero(1, bottleneck_dim);
  h.last_w = trunc_normal(output_dim, bottleneck_dim, 0.02, rng);
  return h;
}

ag::Var<float> head_forward(ag::ParameterBinder<float>& bind, const HeadParams& head, ag::Var<float> input) {
  using namespace ag;
  Var<float> h = gelu(add_row(matmul_nt(input, bind(head.fc1_w)), bind(head.fc1_b)));
  h = gelu(add_row(matmul_nt(h, bind(head.fc2_w)), bind(head.fc2_b)));
  h = add_row(matmul_nt(h, bind(head.fc3_w)), bind(head.fc3_b));
  h = l2_normalize_rows(h);
  return matmul_nt(h, l2_normalize_rows(bind(head.last_w)));
}

ModelState ModelState::clone(bool copy_backbone) const {
  ModelState s;
  s.backbone = copy_backbone ? std::make_shared<BackboneHandle>(*backbone) : backbone;
  s.bank = bank;
  s.head = head;
  return s;
}

PrototypeBank init_bank(int prototypes, int dim, Rng& rng) {
  Matrix w(prototypes, dim);
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<float>(standard_normal(rng) * s);
  return PrototypeBank(std::move(w));
}

CropOutput crop_forward(ag::ParameterBinder<float>& backbone_bind, ag::ParameterBinder<float>& model_bind,
                        const ModelState& state, const Matrix& patches, AssignMode mode, const Matrix* noise,
                        HeadInput head_input) {
  using namespace ag;
  CropOutput out;
  out.tokens = vit_forward(backbone_bind, *state.backbone, patches);
  require_finite(out.tokens.value(), "backbone");
  Var<float> bank = model_bind(state.bank.weights);
  auto ps = protosim(out.tokens, bank, mode, noise);
  out.embeddings = ps.embeddings;
  out.assignment = ps.assignment;
  require_finite(out.embeddings.value(), "protosim");
  Var<float> input = rows(out.embeddings, 0, 1);
  const Eigen::Index n = out.embeddings.rows() - 1;
  if (head_input == HeadInput::class_plus_mean_patch && n > 0)
    input = add(input, mean_rows(rows(out.embeddings, 1, n)));
  out.logits = head_forward(model_bind, state.head, input);
  require_finite(out.logits.value(), "projection head");
  return out;
}

Image prepare_image(const BackboneHandle& backbone, const Image& image) {
  const auto& c = backbone.config;
  if (image.height == c.image_height && image.width == c.image_width) return image;
  return resize(image, c.image_height, c.image_width);
}

Matrix image_logits(const ModelState& model, const Image& image) {
  const TokenBatch tokens = encode(*model.backbone, prepare_image(*model.backbone, image));
  return compute_logits(model.bank, tokens);
}

namespace {

void put_model(TensorArchive& a, const std::string& prefix, const ModelState& m) {
  a.tensors[prefix + "bank"] = Tensor::from_matrix(m.bank.weights);
  m.head.visit([&](const std::string& name, const Matrix& w) {
    a.tensors[prefix + "head." + name] = Tensor::from_matrix(w);
  });
}

Matrix get_matrix(const TensorArchive& a, const std::string& name) {
  const Tensor& t = a.at(name);
  if (t.shape.size() != 2) throw Error("checkpoint tensor '" + name + "' must be 2-D");
  return t.as_matrix(t.shape[0], t.shape[1]);
}

void get_model(const TensorArchive& a, const std::string& prefix, ModelState& m) {
  m.bank = PrototypeBank(get_matrix(a, prefix + "bank"));
  m.head.visit([&](const std::string& name, Matrix& w) { w = get_matrix(a, prefix + "head." + name); });
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  TensorArchive a = backbone_to_archive(*c.student.backbone, "backbone.");
  const bool separate = c.teacher.backbone && c.teacher.backbone != c.student.backbone;
  if (separate) {
    TensorArchive t = backbone_to_archive(*c.teacher.backbone, "teacher.backbone.");
    a.tensors.merge(t.tensors);
    a.metadata.merge(t.metadata);
  }
  put_model(a, "student.", c.student);
  put_model(a, "teacher.", c.teacher);
  a.tensors["teacher.center"] = Tensor::from_matrix(c.teacher.center);
  a.metadata["format"] = kCheckpointFormat;
  a.metadata["config"] = c.config_json;
  a.metadata["epoch"] = std::to_string(c.epoch);
  a.metadata["rng_state"] = c.rng_state;
  a.metadata["teacher_backbone"] = separate ? "separate" : "shared";
  write_safetensors(path, a);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  TensorArchive a;
  try {
    a = read_safetensors(path);
  } catch (const Error& e) {
    throw Error("cannot load checkpoint '" + path.string() + "': " + e.what());
  }
  auto fmt = a.metadata.find("format");
  if (fmt == a.metadata.end() || fmt->second != kCheckpointFormat)
    throw Error("'" + path.string() + "' is not a " + kCheckpointFormat + " checkpoint");
  Checkpoint c;
  c.config_json = a.metadata["config"];
  c.epoch = std::stoi(a.metadata["epoch"]);
  c.rng_state = a.metadata["rng_state"];
  auto backbone = std::make_shared<BackboneHandle>(backbone_from_archive(a, "vit", "backbone."));
  c.student.backbone = backbone;
  get_model(a, "student.", c.student);
  c.teacher.backbone = a.metadata["teacher_backbone"] == "separate"
                           ? std::make_shared<BackboneHandle>(backbone_from_archive(a, "vit", "teacher.backbone."))
                           : backbone;
  get_model(a, "teacher.", c.teacher);
  c.teacher.center = get_matrix(a, "teacher.center");
  return c;
}

std::string model_hash(const ModelState& model) {
  Fnv1a h;
  h.update(model.bank.weights);
  model.head.visit([&](const std::string&, const Matrix& m) { h.update(m); });
  const std::string bh = model.backbone->parameter_hash();
  h.update(bh.data(), bh.size());
  return h.hex();
}

}  // namespace protosim
