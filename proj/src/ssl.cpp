#include "protosim/ssl.hpp"

#include "protosim/diversity.hpp"
#include "protosim/io.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <numeric>
#include <sstream>
#include <thread>

namespace protosim {

using nlohmann::json;

void TrainConfig::validate() const {
  if (batch_size < 1) throw ContractError("batch_size must be >= 1");
  if (learning_rate <= 0.0) throw ContractError("learning_rate must be positive");
  if (epochs < 1) throw ContractError("epochs must be >= 1");
  if (soft_epochs < 0 || soft_epochs > epochs) throw ContractError("soft_epochs must lie in [0, epochs]");
  if (prototypes < 2) throw ContractError("prototypes (K) must be >= 2");
  if (local_crops < 0) throw ContractError("local_crops must be >= 0");
  if (!(teacher_momentum > 0.0 && teacher_momentum < 1.0))
    throw ContractError("teacher_momentum must lie in (0, 1)");
  if (teacher_temp <= 0.0 || student_temp <= 0.0) throw ContractError("temperatures must be positive");
  if (center_momentum < 0.0 || center_momentum > 1.0) throw ContractError("center_momentum must lie in [0, 1]");
  if (head_hidden_dim < 1 || head_bottleneck_dim < 1 || head_output_dim < 2)
    throw ContractError("head dimensions must be positive");
  if (workers < 1) throw ContractError("workers must be >= 1");
}

namespace {

bool parse_bool(const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ContractError("expected a boolean, got '" + v + "'");
}

}  // namespace

void TrainConfig::set(const std::string& key, const std::string& value) {
  try {
    if (key == "backbone") backbone = value;
    else if (key == "batch_size") batch_size = std::stoi(value);
    else if (key == "learning_rate") learning_rate = std::stod(value);
    else if (key == "epochs") epochs = std::stoi(value);
    else if (key == "soft_epochs") soft_epochs = std::stoi(value);
    else if (key == "prototypes" || key == "K") prototypes = std::stoi(value);
    else if (key == "local_crops") local_crops = augment.local_crops = std::stoi(value);
    else if (key == "teacher_momentum") teacher_momentum = std::stod(value);
    else if (key == "teacher_temp") teacher_temp = std::stod(value);
    else if (key == "student_temp") student_temp = std::stod(value);
    else if (key == "center_momentum") center_momentum = std::stod(value);
    else if (key == "head_hidden_dim") head_hidden_dim = std::stoi(value);
    else if (key == "head_bottleneck_dim") head_bottleneck_dim = std::stoi(value);
    else if (key == "head_output_dim") head_output_dim = std::stoi(value);
    else if (key == "head_input") head_input = parse_head_input(value);
    else if (key == "train_backbone") train_backbone = parse_bool(value);
    else if (key == "teacher_hard_after_switch") teacher_hard_after_switch = parse_bool(value);
    else if (key == "grad_clip") grad_clip = std::stod(value);
    else if (key == "seed") seed = std::stoull(value);
    else if (key == "workers") workers = std::stoi(value);
    else if (key == "augment.global_scale_min") augment.global_scale_min = std::stod(value);
    else if (key == "augment.global_scale_max") augment.global_scale_max = std::stod(value);
    else if (key == "augment.local_scale_min") augment.local_scale_min = std::stod(value);
    else if (key == "augment.local_scale_max") augment.local_scale_max = std::stod(value);
    else if (key == "augment.flip_prob") augment.flip_prob = std::stod(value);
    else if (key == "augment.jitter_prob") augment.jitter_prob = std::stod(value);
    else if (key == "augment.brightness") augment.brightness = std::stod(value);
    else if (key == "augment.contrast") augment.contrast = std::stod(value);
    else if (key == "augment.saturation") augment.saturation = std::stod(value);
    else if (key == "augment.blur_prob") augment.blur_prob = std::stod(value);
    else if (key == "augment.blur_sigma_min") augment.blur_sigma_min = std::stod(value);
    else if (key == "augment.blur_sigma_max") augment.blur_sigma_max = std::stod(value);
    else throw ContractError("unknown config key '" + key + "'");
  } catch (const std::invalid_argument& e) {
    if (dynamic_cast<const ContractError*>(&e)) throw;
    throw ContractError("bad value '" + value + "' for config key '" + key + "'");
  } catch (const std::out_of_range&) {
    throw ContractError("value '" + value + "' out of range for config key '" + key + "'");
  }
}

json TrainConfig::to_json() const {
  return {{"backbone", backbone},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"epochs", epochs},
          {"soft_epochs", soft_epochs},
          {"prototypes", prototypes},
          {"local_crops", local_crops},
          {"teacher_momentum", teacher_momentum},
          {"teacher_temp", teacher_temp},
          {"student_temp", student_temp},
          {"center_momentum", center_momentum},
          {"head_hidden_dim", head_hidden_dim},
          {"head_bottleneck_dim", head_bottleneck_dim},
          {"head_output_dim", head_output_dim},
          {"head_input", protosim::to_string(head_input)},
          {"train_backbone", train_backbone},
          {"teacher_hard_after_switch", teacher_hard_after_switch},
          {"grad_clip", grad_clip},
          {"seed", seed},
          {"workers", workers},
          {"augment",
           {{"global_scale_min", augment.global_scale_min},
            {"global_scale_max", augment.global_scale_max},
            {"local_scale_min", augment.local_scale_min},
            {"local_scale_max", augment.local_scale_max},
            {"flip_prob", augment.flip_prob},
            {"jitter_prob", augment.jitter_prob},
            {"brightness", augment.brightness},
            {"contrast", augment.contrast},
            {"saturation", augment.saturation},
            {"blur_prob", augment.blur_prob},
            {"blur_sigma_min", augment.blur_sigma_min},
            {"blur_sigma_max", augment.blur_sigma_max}}}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "augment") {
      for (const auto& [k, v] : value.items()) c.set("augment." + k, v.dump());
    } else if (value.is_string()) {
      c.set(key, value.get<std::string>());
    } else {
      c.set(key, value.dump());
    }
  }
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base) {
  std::stringstream ss(read_file_text(path));
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ContractError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    base.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

AssignMode schedule_mode(int epoch, const TrainConfig& config) {
  if (epoch < 0 || epoch >= config.epochs)
    throw ContractError("schedule_mode: epoch " + std::to_string(epoch) + " outside [0, " +
                        std::to_string(config.epochs) + ")");
  return epoch < config.soft_epochs ? AssignMode::soft : AssignMode::hard;
}

std::vector<std::pair<int, int>> dino_pairs(int teacher_crops, int student_crops) {
  std::vector<std::pair<int, int>> pairs;
  for (int t = 0; t < teacher_crops; ++t)
    for (int s = 0; s < student_crops; ++s)
      if (s != t) pairs.emplace_back(t, s);
  return pairs;
}

double cross_entropy(const Eigen::VectorXd& teacher, const Eigen::VectorXd& student, double floor) {
  if (teacher.size() != student.size()) throw ContractError("cross_entropy: distribution sizes differ");
  double h = 0.0;
  for (Eigen::Index i = 0; i < teacher.size(); ++i)
    if (teacher[i] != 0.0) h -= teacher[i] * std::log(std::max(student[i], floor));
  return h;
}

double dino_loss(const std::vector<Eigen::VectorXd>& teacher, const std::vector<Eigen::VectorXd>& student) {
  const auto pairs = dino_pairs(static_cast<int>(teacher.size()), static_cast<int>(student.size()));
  if (pairs.empty()) throw ContractError("dino_loss: no (teacher, student) pairs with distinct crops");
  double total = 0.0;
  for (const auto& [t, s] : pairs)
    total += cross_entropy(teacher[static_cast<std::size_t>(t)], student[static_cast<std::size_t>(s)]);
  return total / static_cast<double>(pairs.size());
}

Matrix teacher_probs(const Matrix& logits, const Matrix& center, double temp) {
  if (center.rows() != 1 || center.cols() != logits.cols()) throw ContractError("teacher_probs: center shape mismatch");
  Matrix x = logits;
  x.rowwise() -= center.row(0);
  x /= static_cast<float>(temp);
  return softmax_rows<float>(x);
}

Matrix updated_center(const Matrix& center, const Matrix& batch_mean, double momentum) {
  if (center.rows() != batch_mean.rows() || center.cols() != batch_mean.cols())
    throw ContractError("updated_center: shape mismatch");
  return center * static_cast<float>(momentum) + batch_mean * static_cast<float>(1.0 - momentum);
}

Eigen::VectorXd student_distribution(const StudentState& state, const Image& crop, AssignMode mode, Rng& rng,
                                     const TrainConfig& config) {
  ag::Tape<float> tape;
  ag::ParameterBinder<float> bb(tape, false), mb(tape, false);
  const Matrix patches = patchify(*state.backbone, crop);
  const Matrix noise = sample_gumbel<float>(patches.rows() + 1, state.bank.K(), rng);
  const CropOutput out = crop_forward(bb, mb, state, patches, mode, &noise, config.head_input);
  Matrix scaled = out.logits.value() / static_cast<float>(config.student_temp);
  return softmax_rows<float>(scaled).row(0).transpose().cast<double>();
}

Eigen::VectorXd teacher_distribution(const TeacherState& state, const Image& crop, const TrainConfig& config,
                                     AssignMode mode) {
  ag::Tape<float> tape;
  ag::ParameterBinder<float> bb(tape, false), mb(tape, false);
  const Matrix patches = patchify(*state.backbone, crop);
  const CropOutput out = crop_forward(bb, mb, state, patches, mode, nullptr, config.head_input);
  return teacher_probs(out.logits.value(), state.center, config.teacher_temp).row(0).transpose().cast<double>();
}

namespace {

void ema_matrix(Matrix& t, const Matrix& s, double m, const std::string& name) {
  if (t.rows() != s.rows() || t.cols() != s.cols())
    throw ContractError("ema_update: shape mismatch for '" + name + "': teacher " + shape_str(t.rows(), t.cols()) +
                        " vs student " + shape_str(s.rows(), s.cols()));
  t = (t.cast<double>() * m + s.cast<double>() * (1.0 - m)).cast<float>();
}

}  // namespace

void ema_update(TeacherState& teacher, const StudentState& student, double momentum, bool include_backbone) {
  if (momentum < 0.0 || momentum > 1.0) throw ContractError("ema_update: momentum must lie in [0, 1]");
  ema_matrix(teacher.bank.weights, student.bank.weights, momentum, "bank");
  std::vector<const Matrix*> sh;
  student.head.visit([&](const std::string&, const Matrix& m) { sh.push_back(&m); });
  std::size_t i = 0;
  teacher.head.visit([&](const std::string& name, Matrix& m) {
    if (i >= sh.size()) throw ContractError("ema_update: head parameter count mismatch");
    ema_matrix(m, *sh[i++], momentum, "head." + name);
  });
  if (include_backbone && teacher.backbone != student.backbone) {
    std::vector<const Matrix*> sb;
    student.backbone->params.visit([&](const std::string&, const Matrix& m) { sb.push_back(&m); });
    std::size_t j = 0;
    teacher.backbone->params.visit([&](const std::string& name, Matrix& m) {
      if (j >= sb.size()) throw ContractError("ema_update: backbone parameter count mismatch");
      ema_matrix(m, *sb[j++], momentum, "backbone." + name);
    });
  }
}

json TrainLogEntry::to_json() const {
  return {{"epoch", epoch}, {"loss", loss}, {"avg_cosine_sim", avg_cosine_sim}, {"mode", protosim::to_string(mode)}};
}

Trainer::Trainer(TrainConfig config, const BackboneHandle& backbone) : config_(std::move(config)), rng_(config_.seed) {
  config_.augment.local_crops = config_.local_crops;
  config_.augment.output_height = backbone.config.image_height;
  config_.augment.output_width = backbone.config.image_width;
  config_.validate();
  auto shared = std::make_shared<BackboneHandle>(backbone);
  shared->frozen = !config_.train_backbone;
  student_.backbone = shared;
  student_.bank = init_bank(config_.prototypes, backbone.config.embed_dim, rng_);
  student_.head = init_head(backbone.config.embed_dim, config_.head_hidden_dim, config_.head_bottleneck_dim,
                            config_.head_output_dim, rng_);
  static_cast<ModelState&>(teacher_) = student_.clone(config_.train_backbone);
  teacher_.center = Matrix::Zero(1, config_.head_output_dim);
}

std::vector<std::pair<std::string, Matrix*>> Trainer::trainable() {
  std::vector<std::pair<std::string, Matrix*>> out;
  out.emplace_back("bank", &student_.bank.weights);
  student_.head.visit([&](const std::string& n, Matrix& m) { out.emplace_back("head." + n, &m); });
  if (config_.train_backbone)
    student_.backbone->params.visit([&](const std::string& n, Matrix& m) { out.emplace_back("backbone." + n, &m); });
  return out;
}

void Trainer::apply_gradients(const ag::GradientMap<float>& grads) {
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  ++adam_step_;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(adam_step_));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(adam_step_));
  const auto lr = static_cast<float>(config_.learning_rate);
  for (auto& [name, param] : trainable()) {
    auto it = grads.find(param);
    if (it == grads.end()) continue;
    Matrix g = it->second;
    if (config_.grad_clip > 0.0) {
      const double n = g.norm();
      if (n > config_.grad_clip) g *= static_cast<float>(config_.grad_clip / (n + 1e-6));
    }
    Moments& mo = moments_[param];
    if (mo.m.size() == 0) {
      mo.m = Matrix::Zero(g.rows(), g.cols());
      mo.v = Matrix::Zero(g.rows(), g.cols());
    }
    mo.m = mo.m * static_cast<float>(beta1) + g * static_cast<float>(1.0 - beta1);
    mo.v = mo.v * static_cast<float>(beta2) + g.cwiseProduct(g) * static_cast<float>(1.0 - beta2);
    const Matrix mhat = mo.m / static_cast<float>(c1);
    const Matrix vhat = mo.v / static_cast<float>(c2);
    *param -= (lr * mhat.array() / (vhat.array().sqrt() + static_cast<float>(eps))).matrix();
  }
}

double Trainer::step(const std::vector<const Image*>& batch, const std::vector<std::uint64_t>& seeds,
                     AssignMode mode, AssignMode teacher_mode) {
  if (batch.empty()) throw ContractError("Trainer::step: empty batch");
  if (seeds.size() != batch.size()) throw ContractError("Trainer::step: one seed per image required");
  const int workers = std::min<int>(config_.workers, static_cast<int>(batch.size()));
  const float inv_batch = 1.0f / static_cast<float>(batch.size());
  const auto inv_student_temp = static_cast<float>(1.0 / config_.student_temp);

  struct Partial {
    ag::GradientMap<float> grads;
    double loss = 0.0;
    Matrix teacher_logit_sum;
    std::exception_ptr error;
  };
  std::vector<Partial> partials(static_cast<std::size_t>(workers));

  auto run = [&](int w) {
    Partial& part = partials[static_cast<std::size_t>(w)];
    part.teacher_logit_sum = Matrix::Zero(1, config_.head_output_dim);
    const std::size_t begin = batch.size() * static_cast<std::size_t>(w) / static_cast<std::size_t>(workers);
    const std::size_t end = batch.size() * static_cast<std::size_t>(w + 1) / static_cast<std::size_t>(workers);
    try {
      for (std::size_t i = begin; i < end; ++i) {
        Rng rng(seeds[i]);
        const MultiCropBatch crops = multi_crop(*batch[i], config_.augment, rng);

        Matrix t_logits(2, config_.head_output_dim);
        for (int g = 0; g < 2; ++g) {
          ag::Tape<float> tape;
          ag::ParameterBinder<float> bb(tape, false), mb(tape, false);
          const Matrix patches = patchify(*teacher_.backbone, crops.global_crops[static_cast<std::size_t>(g)]);
          t_logits.row(g) =
              crop_forward(bb, mb, teacher_, patches, teacher_mode, nullptr, config_.head_input).logits.value();
        }
        part.teacher_logit_sum += t_logits.colwise().sum();
        const Matrix t_probs = teacher_probs(t_logits, teacher_.center, config_.teacher_temp);

        ag::Tape<float> tape;
        ag::ParameterBinder<float> bb(tape, config_.train_backbone), mb(tape, true);
        std::vector<ag::Var<float>> log_probs;
        for (const Image* crop : crops.all_crops()) {
          const Matrix patches = patchify(*student_.backbone, *crop);
          const Matrix noise = sample_gumbel<float>(patches.rows() + 1, student_.bank.K(), rng);
          const CropOutput out = crop_forward(bb, mb, student_, patches, mode, &noise, config_.head_input);
          log_probs.push_back(ag::log_floor(ag::softmax(ag::scale(out.logits, inv_student_temp)),
                                            static_cast<float>(kLogFloor)));
        }
        const auto pairs = dino_pairs(2, static_cast<int>(log_probs.size()));
        if (pairs.empty()) throw ContractError("Trainer::step: no valid crop pairs");
        ag::Var<float> loss;
        for (std::size_t p = 0; p < pairs.size(); ++p) {
          const auto [t, s] = pairs[p];
          ag::Var<float> h = ag::sum(ag::hadamard(tape.constant(t_probs.row(t)), log_probs[static_cast<std::size_t>(s)]));
          loss = p == 0 ? h : ag::add(loss, h);
        }
        loss = ag::scale(loss, -1.0f / static_cast<float>(pairs.size()));
        const double value = loss.value()(0, 0);
        if (!std::isfinite(value)) throw Error("non-finite loss");
        part.loss += value;
        tape.backward(ag::scale(loss, inv_batch));
        mb.collect(part.grads);
        bb.collect(part.grads);
      }
    } catch (...) {
      part.error = std::current_exception();
    }
  };

  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::jthread> threads;
    for (int w = 0; w < workers; ++w) threads.emplace_back(run, w);
  }

  ag::GradientMap<float> grads;
  double loss = 0.0;
  Matrix logit_sum = Matrix::Zero(1, config_.head_output_dim);
  for (auto& part : partials) {
    if (part.error) std::rethrow_exception(part.error);
    for (auto& [param, g] : part.grads) {
      auto it = grads.find(param);
      if (it == grads.end())
        grads.emplace(param, std::move(g));
      else
        it->second += g;
    }
    loss += part.loss;
    logit_sum += part.teacher_logit_sum;
  }
  apply_gradients(grads);
  last_grads_ = std::move(grads);
  ema_update(teacher_, student_, config_.teacher_momentum, config_.train_backbone);
  teacher_.center = updated_center(teacher_.center, logit_sum / static_cast<float>(2 * batch.size()),
                                   config_.center_momentum);
  return loss / static_cast<double>(batch.size());
}

TrainLogEntry Trainer::run_epoch(const std::vector<const Image*>& images, int epoch) {
  if (images.empty()) throw ContractError("run_epoch: no images");
  const AssignMode mode = schedule_mode(epoch, config_);
  const AssignMode teacher_mode =
      config_.teacher_hard_after_switch ? mode : AssignMode::soft;
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[static_cast<std::size_t>(rng_() % i)]);
  std::vector<std::uint64_t> seeds(images.size());
  for (auto& s : seeds) s = rng_();

  double weighted = 0.0;
  const auto bs = static_cast<std::size_t>(config_.batch_size);
  for (std::size_t start = 0; start < order.size(); start += bs) {
    const std::size_t stop = std::min(order.size(), start + bs);
    std::vector<const Image*> batch;
    std::vector<std::uint64_t> batch_seeds;
    for (std::size_t i = start; i < stop; ++i) {
      batch.push_back(images[order[i]]);
      batch_seeds.push_back(seeds[i]);
    }
    const double l = step(batch, batch_seeds, mode, teacher_mode);
    weighted += l * static_cast<double>(batch.size());
  }
  TrainLogEntry e;
  e.epoch = epoch;
  e.loss = weighted / static_cast<double>(images.size());
  e.avg_cosine_sim = prototype_diversity(student_.bank.weights).mean_cosine_similarity;
  e.mode = mode;
  return e;
}

std::string Trainer::rng_state() const {
  std::ostringstream ss;
  ss << rng_;
  return ss.str();
}

Checkpoint Trainer::checkpoint(int epoch) const {
  Checkpoint c;
  c.config_json = config_.to_json().dump();
  c.epoch = epoch;
  c.rng_state = rng_state();
  c.student = student_;
  c.teacher = teacher_;
  return c;
}

TrainResult train_images(const std::vector<Image>& images, const TrainConfig& config, const BackboneHandle& backbone,
                         const TrainOptions& options) {
  if (images.empty()) throw ContractError("train: no images");
  Trainer trainer(config, backbone);
  std::vector<const Image*> ptrs;
  ptrs.reserve(images.size());
  for (const auto& im : images) ptrs.push_back(&im);
  TrainResult result;
  std::string log_text;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    TrainLogEntry e;
    try {
      e = trainer.run_epoch(ptrs, epoch);
    } catch (const Error& err) {
      throw Error("training aborted at epoch " + std::to_string(epoch) + ": " + err.what() +
                  (options.out_dir.empty() ? std::string() : "; last good checkpoint kept in " + options.out_dir.string()));
    }
    if (!std::isfinite(e.loss)) throw Error("training aborted at epoch " + std::to_string(epoch) + ": non-finite loss");
    result.log.push_back(e);
    if (!options.out_dir.empty()) {
      save_checkpoint(options.out_dir / "checkpoint.ckpt", trainer.checkpoint(epoch));
      log_text += e.to_json().dump() + "\n";
      write_file_atomic(options.out_dir / "train_log.jsonl", log_text);
    }
    if (options.on_epoch) options.on_epoch(e);
  }
  result.student = trainer.student();
  result.teacher = trainer.teacher();
  return result;
}

TrainResult train(const std::vector<DatasetDescriptor>& datasets, const TrainConfig& config,
                  const BackboneHandle& backbone, const TrainOptions& options) {
  if (datasets.empty()) throw ContractError("train: at least one dataset is required");
  std::vector<Image> images;
  for (const auto& d : datasets) {
    auto loaded = load_dataset(d);
    for (auto& li : loaded) images.push_back(std::move(li.image));
  }
  return train_images(images, config, backbone, options);
}

}  // namespace protosim
