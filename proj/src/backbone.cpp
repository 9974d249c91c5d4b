#include "protosim/backbone.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <regex>
#include <sstream>

namespace protosim {

namespace {

std::vector<float> parse_float_list(const std::string& text) {
  std::vector<float> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stof(item));
  return out;
}

std::string join_floats(const std::vector<float>& v) {
  std::ostringstream ss;
  ss.precision(9);
  for (std::size_t i = 0; i < v.size(); ++i) ss << (i ? "," : "") << v[i];
  return ss.str();
}

Matrix truncated_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
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

int default_heads_for(const std::string& name, int dim) {
  if (name == "deit-s") return 6;
  return std::max(1, dim / 64);
}

}  // namespace

void PatchConfig::validate() const {
  if (patch_size < 1 || image_height < patch_size || image_width < patch_size)
    throw ContractError("patch config: image " + shape_str(image_height, image_width) +
                        " is smaller than patch size " + std::to_string(patch_size));
  if (image_height % patch_size != 0 || image_width % patch_size != 0)
    throw ContractError("patch config: image " + shape_str(image_height, image_width) +
                        " is not divisible by patch size " + std::to_string(patch_size));
  if (channels < 1 || embed_dim < 1 || depth < 0 || heads < 1 || mlp_hidden < 1)
    throw ContractError("patch config: non-positive dimension");
  if (embed_dim % heads != 0)
    throw ContractError("patch config: embed_dim " + std::to_string(embed_dim) +
                        " not divisible by heads " + std::to_string(heads));
}

void VitParams::visit(const std::function<void(const std::string&, Matrix&)>& fn) {
  fn("patch_embed.proj.weight", patch_w);
  fn("patch_embed.proj.bias", patch_b);
  fn("cls_token", cls_token);
  fn("pos_embed", pos_embed);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    auto& b = blocks[i];
    fn(p + "norm1.weight", b.norm1_w);
    fn(p + "norm1.bias", b.norm1_b);
    fn(p + "attn.qkv.weight", b.qkv_w);
    fn(p + "attn.qkv.bias", b.qkv_b);
    fn(p + "attn.proj.weight", b.proj_w);
    fn(p + "attn.proj.bias", b.proj_b);
    fn(p + "norm2.weight", b.norm2_w);
    fn(p + "norm2.bias", b.norm2_b);
    fn(p + "mlp.fc1.weight", b.fc1_w);
    fn(p + "mlp.fc1.bias", b.fc1_b);
    fn(p + "mlp.fc2.weight", b.fc2_w);
    fn(p + "mlp.fc2.bias", b.fc2_b);
  }
  fn("norm.weight", norm_w);
  fn("norm.bias", norm_b);
}

void VitParams::visit(const std::function<void(const std::string&, const Matrix&)>& fn) const {
  const_cast<VitParams*>(this)->visit(
      [&](const std::string& name, Matrix& m) { fn(name, static_cast<const Matrix&>(m)); });
}

std::string BackboneHandle::parameter_hash() const {
  Fnv1a h;
  params.visit([&](const std::string& name, const Matrix& m) {
    h.update(name.data(), name.size());
    h.update(m);
  });
  return h.hex();
}

WeightDescriptor WeightDescriptor::parse(const std::string& text) {
  WeightDescriptor d;
  std::string head = text;
  std::vector<std::string> options;
  // Options follow the last ",key=" segments; everything before is name[:path].
  while (true) {
    const auto comma = head.rfind(',');
    if (comma == std::string::npos) break;
    const std::string opt = head.substr(comma + 1);
    if (opt.find('=') == std::string::npos) break;
    options.push_back(opt);
    head.resize(comma);
  }
  const auto colon = head.find(':');
  d.name = head.substr(0, colon);
  if (colon != std::string::npos) d.path = head.substr(colon + 1);
  if (d.name.empty()) throw ContractError("weight descriptor '" + text + "' has no name");
  for (const auto& opt : options) {
    const auto eq = opt.find('=');
    const std::string key = opt.substr(0, eq);
    const std::string value = opt.substr(eq + 1);
    if (key == "seed") {
      try {
        d.seed = std::stoull(value);
      } catch (const std::exception&) {
        throw ContractError("weight descriptor: seed '" + value + "' is not an integer");
      }
    } else {
      throw ContractError("weight descriptor: unknown option '" + key + "'");
    }
  }
  return d;
}

std::string WeightDescriptor::str() const {
  std::string s = name;
  if (path) s += ":" + path->string();
  s += ",seed=" + std::to_string(seed);
  return s;
}

PatchConfig parse_toy_config(const std::string& name) {
  static const std::regex re(R"(toy-vit-s(\d+)-d(\d+)(?:-l(\d+))?(?:-h(\d+))?(?:-i(\d+))?(?:-m(\d+))?)");
  std::smatch m;
  if (!std::regex_match(name, m, re)) throw ContractError("not a toy backbone name: '" + name + "'");
  PatchConfig c;
  c.patch_size = std::stoi(m[1]);
  c.embed_dim = std::stoi(m[2]);
  c.depth = m[3].matched ? std::stoi(m[3]) : 4;
  c.heads = m[4].matched ? std::stoi(m[4]) : 4;
  if (m[5].matched) c.image_height = c.image_width = std::stoi(m[5]);
  c.mlp_hidden = m[6].matched ? std::stoi(m[6]) : 4 * c.embed_dim;
  c.validate();
  return c;
}

BackboneHandle init_backbone(const std::string& name, const PatchConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const int d = config.embed_dim;
  BackboneHandle h;
  h.name = name;
  h.config = config;
  h.frozen = true;
  VitParams& p = h.params;
  p.patch_w = truncated_normal(d, config.patch_dim(), 0.02, rng);
  p.patch_b = Matrix::Zero(1, d);
  p.cls_token = truncated_normal(1, d, 0.02, rng);
  p.pos_embed = truncated_normal(config.token_count(), d, 0.02, rng);
  p.blocks.resize(static_cast<std::size_t>(config.depth));
  for (auto& b : p.blocks) {
    b.norm1_w = Matrix::Ones(1, d);
    b.norm1_b = Matrix::Zero(1, d);
    b.qkv_w = truncated_normal(3 * d, d, 0.02, rng);
    b.qkv_b = Matrix::Zero(1, 3 * d);
    b.proj_w = truncated_normal(d, d, 0.02, rng);
    b.proj_b = Matrix::Zero(1, d);
    b.norm2_w = Matrix::Ones(1, d);
    b.norm2_b = Matrix::Zero(1, d);
    b.fc1_w = truncated_normal(config.mlp_hidden, d, 0.02, rng);
    b.fc1_b = Matrix::Zero(1, config.mlp_hidden);
    b.fc2_w = truncated_normal(d, config.mlp_hidden, 0.02, rng);
    b.fc2_b = Matrix::Zero(1, d);
  }
  p.norm_w = Matrix::Ones(1, d);
  p.norm_b = Matrix::Zero(1, d);
  return h;
}

TensorArchive backbone_to_archive(const BackboneHandle& handle, const std::string& prefix) {
  TensorArchive a;
  const auto& c = handle.config;
  handle.params.visit([&](const std::string& name, const Matrix& m) {
    std::vector<std::int64_t> shape;
    if (name == "patch_embed.proj.weight")
      shape = {c.embed_dim, c.channels, c.patch_size, c.patch_size};
    else if (name == "cls_token")
      shape = {1, 1, c.embed_dim};
    else if (name == "pos_embed")
      shape = {1, c.token_count(), c.embed_dim};
    else if (m.rows() == 1)
      shape = {m.cols()};
    a.tensors[prefix + name] = Tensor::from_matrix(m, shape);
  });
  a.metadata[prefix + "name"] = handle.name;
  a.metadata[prefix + "image_height"] = std::to_string(c.image_height);
  a.metadata[prefix + "image_width"] = std::to_string(c.image_width);
  a.metadata[prefix + "heads"] = std::to_string(c.heads);
  a.metadata[prefix + "mean"] = join_floats(handle.normalization.mean);
  a.metadata[prefix + "std"] = join_floats(handle.normalization.stddev);
  return a;
}

BackboneHandle backbone_from_archive(const TensorArchive& a, const std::string& name,
                                     const std::string& prefix) {
  auto meta = [&](const std::string& key) -> std::optional<std::string> {
    auto it = a.metadata.find(prefix + key);
    if (it == a.metadata.end()) return std::nullopt;
    return it->second;
  };
  const Tensor& pw = a.at(prefix + "patch_embed.proj.weight");
  if (pw.shape.size() != 4 || pw.shape[2] != pw.shape[3])
    throw Error("patch_embed.proj.weight must have shape [D, C, P, P]");
  PatchConfig c;
  c.embed_dim = static_cast<int>(pw.shape[0]);
  c.channels = static_cast<int>(pw.shape[1]);
  c.patch_size = static_cast<int>(pw.shape[2]);
  const Tensor& pos = a.at(prefix + "pos_embed");
  if (pos.numel() % c.embed_dim != 0) throw Error("pos_embed size is not a multiple of D");
  const auto tokens = pos.numel() / c.embed_dim;
  const auto patches = tokens - 1;
  if (auto h = meta("image_height"), w = meta("image_width"); h && w) {
    c.image_height = std::stoi(*h);
    c.image_width = std::stoi(*w);
  } else {
    const auto side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(patches))));
    if (static_cast<std::int64_t>(side) * side != patches)
      throw Error("cannot infer a square image size from " + std::to_string(patches) + " patches");
    c.image_height = c.image_width = side * c.patch_size;
  }
  c.depth = 0;
  while (a.contains(prefix + "blocks." + std::to_string(c.depth) + ".norm1.weight")) ++c.depth;
  c.mlp_hidden = c.depth > 0 ? static_cast<int>(a.at(prefix + "blocks.0.mlp.fc1.weight").shape[0])
                             : 4 * c.embed_dim;
  c.heads = meta("heads") ? std::stoi(*meta("heads")) : default_heads_for(name, c.embed_dim);
  c.validate();
  if (c.token_count() != tokens)
    throw Error("pos_embed has " + std::to_string(tokens) + " tokens but image " +
                shape_str(c.image_height, c.image_width) + " with patch " +
                std::to_string(c.patch_size) + " needs " + std::to_string(c.token_count()));

  BackboneHandle h;
  h.name = meta("name").value_or(name);
  h.config = c;
  if (auto m = meta("mean")) h.normalization.mean = parse_float_list(*m);
  if (auto s = meta("std")) h.normalization.stddev = parse_float_list(*s);
  if (static_cast<int>(h.normalization.mean.size()) != c.channels ||
      static_cast<int>(h.normalization.stddev.size()) != c.channels)
    throw Error("normalization does not match channel count " + std::to_string(c.channels));
  h.params.blocks.resize(static_cast<std::size_t>(c.depth));
  const int d = c.embed_dim;
  const int hid = c.mlp_hidden;
  h.params.visit([&](const std::string& pname, Matrix& m) {
    const Tensor& t = a.at(prefix + pname);
    std::int64_t rows = 1, cols = d;
    if (pname == "patch_embed.proj.weight") {
      rows = d, cols = c.patch_dim();
    } else if (pname == "pos_embed") {
      rows = c.token_count();
    } else if (pname.ends_with("qkv.weight")) {
      rows = 3 * d;
    } else if (pname.ends_with("qkv.bias")) {
      cols = 3 * d;
    } else if (pname.ends_with("proj.weight") && pname.starts_with("blocks")) {
      rows = d;
    } else if (pname.ends_with("fc1.weight")) {
      rows = hid;
    } else if (pname.ends_with("fc1.bias")) {
      cols = hid;
    } else if (pname.ends_with("fc2.weight")) {
      rows = d, cols = hid;
    }
    m = t.as_matrix(rows, cols);
  });
  h.frozen = true;
  return h;
}

void save_backbone(const BackboneHandle& handle, const std::filesystem::path& path) {
  TensorArchive a = backbone_to_archive(handle);
  a.metadata["format"] = "protosim-backbone-v1";
  write_safetensors(path, a);
}

BackboneHandle load_pretrained(const std::string& descriptor) {
  const WeightDescriptor d = WeightDescriptor::parse(descriptor);
  if (d.name.starts_with("toy-vit")) {
    const PatchConfig want = parse_toy_config(d.name);
    if (!d.path) return init_backbone(d.name, want, d.seed);
    BackboneHandle h = backbone_from_archive(read_safetensors(*d.path), d.name);
    const PatchConfig& got = h.config;
    if (got.embed_dim != want.embed_dim || got.patch_size != want.patch_size ||
        got.depth != want.depth || got.heads != want.heads || got.image_height != want.image_height)
      throw Error("weights at '" + d.path->string() + "' do not match declared config of '" + d.name +
                  "' (file has D=" + std::to_string(got.embed_dim) + ", P=" +
                  std::to_string(got.patch_size) + ", depth=" + std::to_string(got.depth) + ")");
    return h;
  }
  if (d.name == "deit-s" || d.name == "vit") {
    if (!d.path) throw ContractError("descriptor '" + descriptor + "' requires a weight path");
    BackboneHandle h = backbone_from_archive(read_safetensors(*d.path), d.name);
    if (d.name == "deit-s" && (h.config.embed_dim != 384 || h.config.patch_size != 16))
      throw Error("deit-s expects D=384 and P=16 but '" + d.path->string() + "' has D=" +
                  std::to_string(h.config.embed_dim) + ", P=" + std::to_string(h.config.patch_size));
    return h;
  }
  throw ContractError("unknown backbone name '" + d.name + "'");
}

Matrix patchify(const BackboneHandle& handle, const Image& image) {
  const PatchConfig& c = handle.config;
  if (image.height != c.image_height || image.width != c.image_width || image.channels != c.channels)
    throw ContractError("encode: image is " + shape_str(image.height, image.width) + "x" +
                        std::to_string(image.channels) + " but backbone expects " +
                        shape_str(c.image_height, c.image_width) + "x" + std::to_string(c.channels));
  const int p = c.patch_size;
  Matrix out(c.patch_count(), c.patch_dim());
  bool out_of_range = false;
  for (int gy = 0; gy < c.grid_rows(); ++gy)
    for (int gx = 0; gx < c.grid_cols(); ++gx) {
      const int row = gy * c.grid_cols() + gx;
      int col = 0;
      for (int ch = 0; ch < c.channels; ++ch) {
        const float mean = handle.normalization.mean[static_cast<std::size_t>(ch)];
        const float inv = 1.0f / handle.normalization.stddev[static_cast<std::size_t>(ch)];
        for (int y = 0; y < p; ++y)
          for (int x = 0; x < p; ++x) {
            const float v = (image.at(gy * p + y, gx * p + x, ch) - mean) * inv;
            out_of_range = out_of_range || v < -10.0f || v > 10.0f;
            out(row, col++) = v;
          }
      }
    }
  if (out_of_range)
    spdlog::warn("encode: normalized pixel values outside [-10, 10]; is the input scaled to [0, 1]?");
  return out;
}

Matrix embed_patches(const BackboneHandle& handle, const Matrix& patches) {
  const VitParams& p = handle.params;
  Matrix x(patches.rows() + 1, handle.config.embed_dim);
  x.row(0) = p.cls_token.row(0);
  x.bottomRows(patches.rows()) = patches * p.patch_w.transpose();
  x.bottomRows(patches.rows()).rowwise() += p.patch_b.row(0);
  return x + p.pos_embed;
}

ag::Var<float> vit_forward(ag::ParameterBinder<float>& bind, const BackboneHandle& handle,
                           const Matrix& patches) {
  using namespace ag;
  const PatchConfig& c = handle.config;
  const VitParams& p = handle.params;
  Tape<float>& t = bind.tape();
  Var<float> x = add_row(matmul_nt(t.constant(patches), bind(p.patch_w)), bind(p.patch_b));
  x = add(concat_rows<float>({bind(p.cls_token), x}), bind(p.pos_embed));
  const int d = c.embed_dim;
  const int hd = d / c.heads;
  const float attn_scale = 1.0f / std::sqrt(static_cast<float>(hd));
  for (const auto& b : p.blocks) {
    Var<float> h = layer_norm(x, bind(b.norm1_w), bind(b.norm1_b));
    Var<float> qkv = add_row(matmul_nt(h, bind(b.qkv_w)), bind(b.qkv_b));
    std::vector<Var<float>> heads;
    heads.reserve(static_cast<std::size_t>(c.heads));
    for (int i = 0; i < c.heads; ++i) {
      Var<float> q = cols(qkv, i * hd, hd);
      Var<float> k = cols(qkv, d + i * hd, hd);
      Var<float> v = cols(qkv, 2 * d + i * hd, hd);
      Var<float> attn = softmax(scale(matmul_nt(q, k), attn_scale));
      heads.push_back(matmul(attn, v));
    }
    Var<float> merged = c.heads == 1 ? heads.front() : concat_cols(heads);
    x = add(x, add_row(matmul_nt(merged, bind(b.proj_w)), bind(b.proj_b)));
    Var<float> h2 = layer_norm(x, bind(b.norm2_w), bind(b.norm2_b));
    Var<float> mlp = add_row(matmul_nt(gelu(add_row(matmul_nt(h2, bind(b.fc1_w)), bind(b.fc1_b))),
                                       bind(b.fc2_w)),
                             bind(b.fc2_b));
    x = add(x, mlp);
  }
  return layer_norm(x, bind(p.norm_w), bind(p.norm_b));
}

TokenBatch encode(const BackboneHandle& handle, const Image& image) {
  ag::Tape<float> tape;
  ag::ParameterBinder<float> bind(tape, false);
  const Matrix patches = patchify(handle, image);
  return TokenBatch(vit_forward(bind, handle, patches).value());
}

}  // namespace protosim
