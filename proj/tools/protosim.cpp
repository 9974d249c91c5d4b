// Command-line entry point: train, index, compare, probe, ablate, viz, serve
// and synth. Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include "protosim/analytics.hpp"
#include "protosim/attention.hpp"
#include "protosim/index.hpp"
#include "protosim/io.hpp"
#include "protosim/probe.hpp"
#include "protosim/service.hpp"
#include "protosim/ssl.hpp"
#include "protosim/synth.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <csignal>
#include <iostream>

namespace fs = std::filesystem;
using namespace protosim;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_dir(const fs::path& p, const std::string& what) {
  if (!fs::is_directory(p)) throw UsageError(what + " '" + p.string() + "' is not a directory");
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw UsageError(what + " '" + p.string() + "' does not exist");
}

void apply_overrides(TrainConfig& c, const std::vector<std::string>& sets) {
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
}

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop = true; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compare image datasets through learned prototypes"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off");

  // train
  auto* train = app.add_subcommand("train", "Train the prototype bank (and head) with teacher-student distillation");
  std::string t_datasets, t_config, t_out;
  std::vector<std::string> t_sets;
  std::optional<int> t_epochs, t_prototypes, t_workers, t_batch;
  std::optional<double> t_lr;
  std::optional<std::uint64_t> t_seed;
  std::optional<std::string> t_backbone;
  train->add_option("--datasets", t_datasets, "Comma-separated id=path list")->required();
  train->add_option("--config", t_config, "key=value config file");
  train->add_option("--out", t_out, "Output directory for checkpoint.ckpt and train_log.jsonl")->required();
  train->add_option("--set", t_sets, "Config override key=value (repeatable)");
  train->add_option("--epochs", t_epochs);
  train->add_option("--prototypes", t_prototypes, "K");
  train->add_option("--batch-size", t_batch);
  train->add_option("--lr", t_lr);
  train->add_option("--seed", t_seed);
  train->add_option("--backbone", t_backbone, "Backbone descriptor name[:path][,seed=INT]");
  train->add_option("--workers", t_workers);

  // index
  auto* index = app.add_subcommand("index", "Assign every image and build the prototype index");
  std::string i_ckpt, i_out, i_net = "teacher";
  std::vector<std::string> i_datasets;
  int i_workers = 1;
  index->add_option("--checkpoint", i_ckpt)->required();
  index->add_option("--dataset", i_datasets, "id=path (repeatable or comma-separated)")->required();
  index->add_option("--out", i_out)->required();
  index->add_option("--workers", i_workers);
  index->add_option("--net", i_net, "teacher or student")->check(CLI::IsMember({"teacher", "student"}));

  // compare
  auto* compare = app.add_subcommand("compare", "Write the comparison report (JSON and HTML)");
  std::string c_index, c_ckpt, c_out, c_kind = "any";
  double c_threshold = kDefaultSpecificityThreshold;
  long long c_min = kDefaultMinOccurrences;
  int c_topk = 12;
  compare->add_option("--index", c_index)->required();
  compare->add_option("--checkpoint", c_ckpt)->required();
  compare->add_option("--threshold", c_threshold)->check(CLI::Range(0.0, 1.0));
  compare->add_option("--min-occurrences", c_min);
  compare->add_option("--top-k", c_topk);
  compare->add_option("--token-kind", c_kind)->check(CLI::IsMember({"class", "patch", "any"}));
  compare->add_option("--out", c_out)->required();

  // probe
  auto* probe = app.add_subcommand("probe", "Train a linear probe on frozen class-token prototype embeddings");
  std::string p_ckpt, p_dataset, p_labels, p_out, p_config;
  std::vector<std::string> p_sets;
  probe->add_option("--checkpoint", p_ckpt)->required();
  probe->add_option("--dataset", p_dataset, "id=path")->required();
  probe->add_option("--labels", p_labels)->required();
  probe->add_option("--config", p_config, "key=value probe config file");
  probe->add_option("--set", p_sets, "Probe config override key=value (repeatable)");
  probe->add_option("--out", p_out, "Probe JSON file")->required();

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Zero class prototypes and re-evaluate a trained probe");
  std::string a_ckpt, a_probe, a_classes = "top:100", a_out, a_mode = "zero";
  ablate->add_option("--checkpoint", a_ckpt)->required();
  ablate->add_option("--probe", a_probe)->required();
  ablate->add_option("--classes", a_classes, "top:N or all");
  ablate->add_option("--mode", a_mode, "zero or reroute")->check(CLI::IsMember({"zero", "reroute"}));
  ablate->add_option("--out", a_out)->required();

  // viz
  auto* viz = app.add_subcommand("viz", "Render a prototype attention overlay for one image");
  std::string v_ckpt, v_image, v_out, v_grid;
  int v_proto = 0;
  bool v_contour = false, v_absolute = false;
  viz->add_option("--checkpoint", v_ckpt)->required();
  viz->add_option("--image", v_image)->required();
  viz->add_option("--prototype", v_proto)->required();
  viz->add_option("--out", v_out)->required();
  viz->add_option("--grid-json", v_grid, "Also write the raw grid as JSON");
  viz->add_flag("--contour", v_contour, "Outline hard-assigned patches");
  viz->add_flag("--absolute", v_absolute, "Do not normalise the grid by its maximum");

  // serve
  auto* srv = app.add_subcommand("serve", "Serve the read-only inspection API");
  std::string s_index, s_ckpt, s_report, s_bind = "127.0.0.1:8080";
  srv->add_option("--index", s_index)->required();
  srv->add_option("--checkpoint", s_ckpt)->required();
  srv->add_option("--report", s_report, "report.json")->required();
  srv->add_option("--bind", s_bind, "host:port");

  // synth
  auto* synth = app.add_subcommand("synth", "Write two planted synthetic datasets (A, B) with labels");
  std::string y_out;
  PlantedSpec y_spec;
  synth->add_option("--out", y_out)->required();
  synth->add_option("--images", y_spec.images_per_dataset, "Images per dataset");
  synth->add_option("--specific", y_spec.specific_per_dataset, "Concepts specific to each dataset");
  synth->add_option("--shared", y_spec.shared, "Concepts shared by both");
  synth->add_option("--size", y_spec.height, "Image side in pixels");
  synth->add_option("--seed", y_spec.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    spdlog::set_level(spdlog::level::from_str(log_level));

    if (*train) {
      auto datasets = parse_dataset_list(t_datasets);
      for (const auto& d : datasets) require_dir(d.root, "dataset '" + d.id + "'");
      TrainConfig cfg;
      if (!t_config.empty()) {
        require_file(t_config, "config file");
        cfg = load_train_config(t_config);
      }
      apply_overrides(cfg, t_sets);
      if (t_epochs) cfg.epochs = *t_epochs;
      if (t_prototypes) cfg.prototypes = *t_prototypes;
      if (t_batch) cfg.batch_size = *t_batch;
      if (t_lr) cfg.learning_rate = *t_lr;
      if (t_seed) cfg.seed = *t_seed;
      if (t_backbone) cfg.backbone = *t_backbone;
      if (t_workers) cfg.workers = *t_workers;
      cfg.validate();
      const BackboneHandle backbone = load_pretrained(cfg.backbone);
      fs::create_directories(t_out);
      TrainOptions opts;
      opts.out_dir = t_out;
      opts.on_epoch = [](const TrainLogEntry& e) { std::cout << e.to_json().dump() << std::endl; };
      const TrainResult res = protosim::train(datasets, cfg, backbone, opts);
      std::cout << "trained " << res.log.size() << " epochs; checkpoint in " << t_out << std::endl;
      return 0;
    }

    if (*index) {
      std::vector<DatasetDescriptor> datasets;
      for (const auto& spec : i_datasets)
        for (auto& d : parse_dataset_list(spec)) datasets.push_back(std::move(d));
      for (const auto& d : datasets) require_dir(d.root, "dataset '" + d.id + "'");
      require_file(i_ckpt, "checkpoint");
      const Checkpoint ckpt = load_checkpoint(i_ckpt);
      PrototypeIndex idx(ckpt.teacher.bank.K(), ckpt.teacher.backbone->config.patch_count());
      idx.set_checkpoint_hash(checkpoint_hash(ckpt));
      IndexOptions opts;
      opts.workers = i_workers;
      opts.net = i_net == "teacher" ? InferenceNet::teacher : InferenceNet::student;
      for (const auto& d : datasets) {
        opts.progress = [&d](std::size_t done, std::size_t total) {
          if (done == total || done % 100 == 0) std::cout << d.id << " " << done << "/" << total << std::endl;
        };
        LoadReport report;
        auto records = index_dataset(ckpt, d, opts, &report);
        if (!report.skipped.empty()) std::cout << d.id << " skipped " << report.skipped.size() << std::endl;
        idx.datasets().push_back(DatasetInfo::from_descriptor(d));
        idx.datasets().back().root = fs::absolute(d.root).string();
        idx.add(records);
      }
      save_index(idx, i_out);
      std::cout << "indexed " << idx.image_count() << " images into " << i_out << std::endl;
      return 0;
    }

    if (*compare) {
      require_dir(c_index, "index");
      require_file(c_ckpt, "checkpoint");
      const PrototypeIndex idx = load_index(c_index);
      const Checkpoint ckpt = load_checkpoint(c_ckpt);
      if (idx.checkpoint_hash() != checkpoint_hash(ckpt))
        throw Error("index '" + c_index + "' was built from a different checkpoint");
      ReportOptions opts;
      opts.specificity = {c_threshold, c_min, parse_token_kind(c_kind)};
      opts.top_k = c_topk;
      const ComparisonReport rep = compare_report(idx, ckpt.teacher.bank, opts);
      if (rep.mode == "summarisation")
        std::cerr << "warning: single-dataset index; report is in summarisation mode" << std::endl;
      write_report(rep, idx, c_out);
      std::cout << "report written to " << c_out << std::endl;
      return 0;
    }

    if (*probe) {
      const DatasetDescriptor d = DatasetDescriptor::parse(p_dataset);
      require_dir(d.root, "dataset '" + d.id + "'");
      require_file(p_labels, "label file");
      require_file(p_ckpt, "checkpoint");
      ProbeConfig cfg;
      if (!p_config.empty()) {
        require_file(p_config, "probe config");
        cfg = load_probe_config(p_config);
      }
      for (const auto& kv : p_sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
      }
      cfg.validate();
      const Checkpoint ckpt = load_checkpoint(p_ckpt);
      const auto images = load_labeled_dataset(d, p_labels);
      const FeatureSet fsx = extract_features(ckpt.teacher, images);
      const ProbeResult res = train_probe(fsx, cfg);
      ProbeFile f;
      f.config = cfg;
      f.probe = res.probe;
      f.dataset = d;
      f.dataset.root = fs::absolute(d.root);
      f.labels = fs::absolute(p_labels);
      for (std::size_t r : res.val_rows) f.val_image_ids.push_back(fsx.image_ids[r]);
      f.checkpoint_hash = checkpoint_hash(ckpt);
      f.validation = res.validation;
      save_probe(f, p_out);
      std::cout << "validation accuracy " << res.validation.accuracy() << std::endl;
      return 0;
    }

    if (*ablate) {
      require_file(a_ckpt, "checkpoint");
      require_file(a_probe, "probe file");
      int top = 0;
      if (a_classes.starts_with("top:")) {
        try {
          top = std::stoi(a_classes.substr(4));
        } catch (const std::logic_error&) {
          throw UsageError("--classes expects top:N or all");
        }
        if (top < 1) throw UsageError("--classes top:N needs N >= 1");
      } else if (a_classes != "all") {
        throw UsageError("--classes expects top:N or all");
      }
      const Checkpoint ckpt = load_checkpoint(a_ckpt);
      const ProbeFile pf = load_probe(a_probe);
      if (!pf.checkpoint_hash.empty() && pf.checkpoint_hash != checkpoint_hash(ckpt))
        throw Error("probe was trained on features from a different checkpoint");
      const auto images = load_labeled_dataset(pf.dataset, pf.labels);
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < images.size(); ++i)
        if (std::find(pf.val_image_ids.begin(), pf.val_image_ids.end(), images[i].image_id) != pf.val_image_ids.end())
          rows.push_back(i);
      const FeatureSet base = extract_features(ckpt.teacher, images, {}, AblationMode::zero, pf.probe.class_names);
      const auto pairs = top_class_prototypes(base, rows, top);
      const AblationResult ab = zero_prototype_ablation(ckpt.teacher, pf.probe, pairs, images, rows,
                                                        parse_ablation_mode(a_mode));
      const Evaluation ev = evaluate(pf.probe, base, rows);
      nlohmann::json out = evaluation_to_json(ev);
      out["config"] = pf.config.to_json();
      out["ablation"] = ablation_to_json(ab);
      write_file_atomic(a_out, out.dump(2) + "\n");
      std::cout << "mean drop " << ab.mean_drop << " over " << ab.rows.size() << " classes" << std::endl;
      return 0;
    }

    if (*viz) {
      require_file(v_ckpt, "checkpoint");
      require_file(v_image, "image");
      const Checkpoint ckpt = load_checkpoint(v_ckpt);
      const Image img = load_image(v_image);
      const AttentionGrid grid = attention_map(ckpt.teacher, img, v_proto);
      OverlayOptions opts;
      opts.contour = v_contour;
      opts.normalization = v_absolute ? GridNormalization::absolute : GridNormalization::per_image;
      write_file_atomic(v_out, render_overlay_png(img, grid, opts));
      if (!v_grid.empty()) write_file_atomic(v_grid, grid_to_json(grid).dump(2) + "\n");
      return 0;
    }

    if (*srv) {
      require_dir(s_index, "index");
      require_file(s_ckpt, "checkpoint");
      require_file(s_report, "report");
      const auto [host, port] = parse_bind_address(s_bind);
      const InspectionService service = InspectionService::open(s_index, s_ckpt, s_report, cache_dir_from_env());
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      ServeOptions opts;
      opts.host = host;
      opts.port = port;
      opts.stop = &g_stop;
      opts.on_listen = [&host](int p) { std::cout << "listening on " << host << ":" << p << std::endl; };
      serve(service, opts);
      return 0;
    }

    if (*synth) {
      y_spec.width = y_spec.height;
      const auto data = make_planted_pair(y_spec);
      write_planted(data, y_out);
      std::cout << "wrote " << y_out << "/A and " << y_out << "/B" << std::endl;
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help() << std::endl;
    return 1;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  }
  return 1;
}
