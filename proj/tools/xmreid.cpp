// xmreid: dataset generation, training, evaluation and diagnostics.

#include "xmreid/data.hpp"
#include "xmreid/errors.hpp"
#include "xmreid/eval.hpp"
#include "xmreid/gradcheck.hpp"
#include "xmreid/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#ifndef XMREID_VERSION
#define XMREID_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using namespace xmreid;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kUsage = 2, kConfig = 3, kNumeric = 4 };

std::string now_utc() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

fs::path output_root() {
  const char* env = std::getenv("XMREID_OUT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

// Options fall back to the config file, and then to their defaults, when the
// flag is absent from the command line.
class Settings {
 public:
  template <typename T>
  CLI::Option* add(CLI::App* app, const std::string& flag, T& target, const std::string& key,
                   const std::string& help) {
    CLI::Option* opt = app->add_option(flag, target, help);
    if constexpr (!std::is_same_v<T, std::string>) opt->capture_default_str();
    bindings_.push_back({app, opt, key, [&target](const std::string& v) {
                           std::istringstream is(v);
                           if constexpr (std::is_same_v<T, std::string>) {
                             target = v;
                           } else if (!(is >> target)) {
                             throw ConfigError("cannot parse '" + v + "'");
                           }
                         }});
    return opt;
  }

  CLI::Option* flag(CLI::App* app, const std::string& name, bool& target, const std::string& key,
                    const std::string& help) {
    CLI::Option* opt = app->add_flag(name, target, help);
    bindings_.push_back({app, opt, key, [&target](const std::string& v) {
                           if (v == "1" || v == "true" || v == "yes" || v == "on") target = true;
                           else if (v == "0" || v == "false" || v == "no" || v == "off") target = false;
                           else throw ConfigError("'" + v + "' is not a boolean");
                         }});
    return opt;
  }

  void apply_file(const std::string& path, const CLI::App* active) {
    if (path.empty()) return;
    boost::property_tree::ptree tree;
    try {
      boost::property_tree::read_ini(path, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError("config file: " + std::string(e.what()));
    }
    for (auto& b : bindings_) {
      if (b.app != active || b.option->count() > 0) continue;
      if (auto v = tree.get_optional<std::string>(b.key)) {
        try {
          b.set(*v);
        } catch (const ConfigError& e) {
          throw ConfigError(b.key + ": " + e.what());
        }
      }
    }
  }

 private:
  struct Binding {
    const CLI::App* app;
    CLI::Option* option;
    std::string key;
    std::function<void(const std::string&)> set;
  };
  std::vector<Binding> bindings_;
};

struct DataOptions {
  std::size_t ids = 40;
  std::size_t per_id = 8;
  std::uint64_t seed = 1;
  std::size_t height = 96;
  std::size_t width = 48;
  std::size_t cameras = 4;
  double noise = 0.02;
  std::size_t twin_every = 5;
  std::size_t red_channel_ids = 0;

  DatasetConfig config() const {
    DatasetConfig c;
    c.identities = ids;
    c.per_identity = per_id;
    c.seed = seed;
    c.height = height;
    c.width = width;
    c.cameras = cameras;
    c.noise_sd = noise;
    c.twin_every = twin_every;
    c.red_channel_identities = red_channel_ids;
    return c;
  }
};

struct ModelOptions {
  std::string channels = "16,32,64,128";
  std::size_t units = 2;
  std::size_t parts = 3;
  std::size_t part_dim = 64;
  std::size_t disc_hidden = 64;
  bool independent_streams = false;

  BackboneConfig config() const {
    BackboneConfig c;
    std::istringstream is(channels);
    std::string item;
    for (std::size_t i = 0; i < kLevels; ++i) {
      if (!std::getline(is, item, ',')) throw ConfigError("--channels needs four comma-separated values");
      try {
        c.stage_channels[i] = std::stoul(item);
      } catch (const std::exception&) {
        throw ConfigError("--channels: '" + item + "' is not a positive integer");
      }
    }
    c.units_per_stage = units;
    c.n_parts = parts;
    c.part_dim = part_dim;
    c.discriminator_hidden = disc_hidden;
    c.mirrored_streams = !independent_streams;
    return c;
  }
};

struct TrainOptions {
  std::size_t epochs = 35;
  std::string granularity = "per-epoch";
  double lr_heads = 0.01;
  double lr_backbone = 0.001;
  bool unify_lr = false;
  double momentum = 0.9;
  std::uint64_t seed = 1;
  std::string ablation = "shallow+weighting";
  double margin = 0.3;
  std::size_t p = 8;
  std::size_t k = 4;
  bool no_augment = false;
  std::size_t d_block = 1;
  std::size_t e_block = 1;
  std::size_t eval_every = 0;

  TrainConfig config() const {
    TrainConfig c;
    c.epochs_per_side = epochs;
    c.granularity = parse_granularity(granularity);
    c.lr_heads = lr_heads;
    c.lr_backbone = lr_backbone;
    c.unify_lr = unify_lr;
    c.momentum = momentum;
    c.seed = seed;
    c.ablation = parse_ablation(ablation);
    c.triplet_margin = margin;
    c.pk = {p, k};
    c.augment = !no_augment;
    c.discriminator_block = d_block;
    c.extractor_block = e_block;
    c.eval_every = eval_every;
    c.validate();
    return c;
  }
};

void add_data_options(Settings& s, CLI::App* app, DataOptions& o) {
  s.add(app, "--ids", o.ids, "data.ids", "Number of identities");
  s.add(app, "--per-id", o.per_id, "data.per_id", "Images per identity and modality");
  s.add(app, "--seed", o.seed, "data.seed", "Generator seed");
  s.add(app, "--height", o.height, "data.height", "Image height");
  s.add(app, "--width", o.width, "data.width", "Image width");
  s.add(app, "--cameras", o.cameras, "data.cameras", "Cameras per modality");
  s.add(app, "--noise", o.noise, "data.noise", "Pixel noise standard deviation");
  s.add(app, "--twin-every", o.twin_every, "data.twin_every", "Hue-twin period (0 disables)");
  s.add(app, "--red-channel-ids", o.red_channel_ids, "data.red_channel_ids",
        "Extra training identities with a red-channel second modality");
}

void add_model_options(Settings& s, CLI::App* app, ModelOptions& o) {
  s.add(app, "--channels", o.channels, "model.channels", "Stage widths, e.g. 16,32,64,128");
  s.add(app, "--units", o.units, "model.units", "Residual units per stage");
  s.add(app, "--parts", o.parts, "model.parts", "Horizontal stripes");
  s.add(app, "--part-dim", o.part_dim, "model.part_dim", "Part feature dimension");
  s.add(app, "--disc-hidden", o.disc_hidden, "model.disc_hidden", "Discriminator hidden width");
  s.flag(app, "--independent-streams", o.independent_streams, "model.independent_streams",
         "Initialise the two private streams independently");
}

void add_train_options(Settings& s, CLI::App* app, TrainOptions& o) {
  s.add(app, "--epochs", o.epochs, "train.epochs", "Epochs per side");
  s.add(app, "--granularity", o.granularity, "train.granularity", "per-epoch or per-batch");
  s.add(app, "--lr-heads", o.lr_heads, "train.lr_heads", "Learning rate of heads and discriminators");
  s.add(app, "--lr-backbone", o.lr_backbone, "train.lr_backbone", "Learning rate of the backbone");
  s.flag(app, "--unify-lr", o.unify_lr, "train.unify_lr", "Use --lr-heads for the backbone too");
  s.add(app, "--momentum", o.momentum, "train.momentum", "SGD momentum");
  s.add(app, "--train-seed", o.seed, "train.seed", "Training seed");
  s.add(app, "--ablation", o.ablation, "train.ablation", "baseline | vanilla | shallow | shallow+weighting");
  s.add(app, "--margin", o.margin, "train.margin", "Triplet margin");
  s.add(app, "--pk-p", o.p, "train.p", "Identities per batch");
  s.add(app, "--pk-k", o.k, "train.k", "Images per identity in a batch (even)");
  s.flag(app, "--no-augment", o.no_augment, "train.no_augment", "Disable flip and random erasing");
  s.add(app, "--d-block", o.d_block, "train.d_block", "Discriminator epochs per block");
  s.add(app, "--e-block", o.e_block, "train.e_block", "Extractor epochs per block");
  s.add(app, "--eval-every", o.eval_every, "train.eval_every", "Evaluate every n extractor epochs");
}

nlohmann::ordered_json data_json(const DataOptions& o) {
  return {{"ids", o.ids},       {"per_id", o.per_id},       {"seed", o.seed},
          {"height", o.height}, {"width", o.width},         {"cameras", o.cameras},
          {"noise", o.noise},   {"twin_every", o.twin_every}, {"red_channel_ids", o.red_channel_ids}};
}

nlohmann::ordered_json model_json(const ModelOptions& o) {
  return {{"channels", o.channels},   {"units", o.units},         {"parts", o.parts},
          {"part_dim", o.part_dim},   {"disc_hidden", o.disc_hidden},
          {"independent_streams", o.independent_streams}};
}

nlohmann::ordered_json train_json(const TrainOptions& o) {
  return {{"epochs", o.epochs},       {"granularity", o.granularity}, {"lr_heads", o.lr_heads},
          {"lr_backbone", o.lr_backbone}, {"unify_lr", o.unify_lr}, {"momentum", o.momentum},
          {"seed", o.seed},           {"ablation", o.ablation},       {"margin", o.margin},
          {"p", o.p},                 {"k", o.k},                     {"augment", !o.no_augment},
          {"d_block", o.d_block},     {"e_block", o.e_block},         {"eval_every", o.eval_every}};
}

void prepare_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw std::runtime_error("cannot create output directory " + dir.string());
  std::ofstream probe(dir / ".write_test");
  if (!probe) throw std::runtime_error("output directory " + dir.string() + " is not writable");
  probe.close();
  fs::remove(dir / ".write_test", ec);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

void write_manifest(const fs::path& dir, const std::string& verb, nlohmann::ordered_json config,
                    std::uint64_t seed, const std::string& started, const std::vector<std::string>& artifacts) {
  nlohmann::ordered_json m;
  m["verb"] = verb;
  m["code_version"] = XMREID_VERSION;
  m["seed"] = seed;
  m["config"] = std::move(config);
  m["started"] = started;
  m["finished"] = now_utc();
  m["output_dir"] = fs::absolute(dir).string();
  m["artifacts"] = artifacts;
  write_text(dir / "run_manifest.json", m.dump(2) + "\n");
}

std::string describe_eval(const EvalResult& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << "rank-1 " << r.rank1 << "  rank-10 " << r.rank10 << "  mAP "
     << r.mAP << "  probe " << r.probe_accuracy << "\ncorrelation g1..g4";
  for (double c : r.layer_correlations) os << ' ' << c;
  os << "  (" << r.correlation_pairs << " pairs)\n";
  return os.str();
}

void check_compatible(const BackboneConfig& model, const Dataset& ds) {
  if (model.input_height != ds.config.height || model.input_width != ds.config.width) {
    throw ConfigError("incompatible checkpoint and dataset: model expects " + std::to_string(model.input_height) +
                      "x" + std::to_string(model.input_width) + " images, dataset has " +
                      std::to_string(ds.config.height) + "x" + std::to_string(ds.config.width));
  }
  if (model.num_identities != ds.num_classes) {
    throw ConfigError("incompatible checkpoint and dataset: model has " + std::to_string(model.num_identities) +
                      " identity classes, dataset trains " + std::to_string(ds.num_classes));
  }
}

fs::path resolve_out(const std::string& out, const std::string& verb) {
  return out.empty() ? output_root() / verb : fs::path(out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal person re-identification with entropy-weighted adversarial training"};
  app.require_subcommand(1);
  app.set_version_flag("--version", XMREID_VERSION);
  Settings settings;
  std::string config_file;
  app.add_option("--config", config_file, "INI file with [data] [model] [train] [eval] sections")
      ->check(CLI::ExistingFile);

  // gen
  CLI::App* gen = app.add_subcommand("gen", "Render a synthetic two-modality dataset");
  DataOptions gen_data;
  std::string gen_out;
  add_data_options(settings, gen, gen_data);
  gen->add_option("--out", gen_out, "Dataset directory (default $XMREID_OUT/gen)");

  // train
  CLI::App* train = app.add_subcommand("train", "Train with alternating min-max optimisation");
  std::string train_data, train_out;
  ModelOptions train_model;
  TrainOptions train_opts;
  bool resume = false;
  std::size_t stop_after = 0;
  train->add_option("--data", train_data, "Dataset directory")->required();
  train->add_option("--out", train_out, "Run directory (default $XMREID_OUT/train)");
  add_model_options(settings, train, train_model);
  add_train_options(settings, train, train_opts);
  train->add_flag("--resume", resume, "Continue from <out>/checkpoint.bin");
  train->add_option("--stop-after", stop_after, "Stop after this many epochs (both sides counted)");

  // eval
  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  std::string eval_ckpt, eval_data, eval_out, eval_corr = "pearson";
  std::uint64_t eval_seed = 1;
  bool eval_test_pairs = false;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--data", eval_data, "Dataset directory")->required();
  eval->add_option("--out", eval_out, "Output directory (default $XMREID_OUT/eval)");
  settings.add(eval, "--correlation", eval_corr, "eval.correlation", "pearson or cosine");
  settings.add(eval, "--probe-seed", eval_seed, "eval.probe_seed", "Domain-probe seed");
  settings.flag(eval, "--test-pairs-only", eval_test_pairs, "eval.test_pairs_only",
                "Correlate test identities only");

  // sweep-partitions
  CLI::App* sweep = app.add_subcommand("sweep-partitions", "Train the baseline for several stripe counts");
  std::string sweep_data, sweep_out, sweep_parts = "1,3";
  ModelOptions sweep_model;
  TrainOptions sweep_opts;
  sweep_opts.ablation = "baseline";
  sweep->add_option("--data", sweep_data, "Dataset directory")->required();
  sweep->add_option("--out", sweep_out, "Output directory (default $XMREID_OUT/sweep-partitions)");
  settings.add(sweep, "--n-list", sweep_parts, "sweep.n_list", "Comma-separated stripe counts");
  add_model_options(settings, sweep, sweep_model);
  add_train_options(settings, sweep, sweep_opts);

  // gradcheck
  CLI::App* grad = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  std::size_t grad_cases = 100;
  std::uint64_t grad_seed = 1;
  double grad_tol = 1e-5;
  std::string grad_out;
  grad->add_option("--cases", grad_cases, "Randomised cases per op")->capture_default_str();
  grad->add_option("--seed", grad_seed, "Seed")->capture_default_str();
  grad->add_option("--tol", grad_tol, "Relative error tolerance")->capture_default_str();
  grad->add_option("--out", grad_out, "Output directory (default $XMREID_OUT/gradcheck)");

  // probe
  CLI::App* probe = app.add_subcommand("probe", "Modality probe on descriptors and g_1..g_4");
  std::string probe_ckpt, probe_data, probe_out;
  std::uint64_t probe_seed = 1;
  probe->add_option("--checkpoint", probe_ckpt, "Checkpoint file")->required();
  probe->add_option("--data", probe_data, "Dataset directory")->required();
  probe->add_option("--out", probe_out, "Output directory (default $XMREID_OUT/probe)");
  probe->add_option("--seed", probe_seed, "Probe seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  const std::string started = now_utc();
  try {
    CLI::App* active = app.get_subcommands().front();
    settings.apply_file(config_file, active);

    if (active == gen) {
      const fs::path out = resolve_out(gen_out, "gen");
      prepare_dir(out);
      Dataset ds = generate_dataset(gen_data.config());
      export_dataset(ds, out);
      std::cout << "wrote " << ds.samples.size() << " images (" << ds.indices(Split::query).size() << " probes, "
                << ds.indices(Split::gallery).size() << " gallery) to " << out.string() << "\n";
      write_manifest(out, "gen", {{"data", data_json(gen_data)}}, gen_data.seed, started,
                     {"dataset.json", "manifest.csv", "images/"});
      return kOk;
    }

    if (active == train) {
      const fs::path out = resolve_out(train_out, "train");
      prepare_dir(out);
      Dataset ds = import_dataset(train_data);
      TrainConfig tc = train_opts.config();
      BackboneConfig bc = fit_to_dataset(train_model.config(), ds);
      ReidModel model(bc, tc.seed);
      Trainer trainer(model, ds, tc);
      const fs::path ckpt = out / "checkpoint.bin";
      if (resume) {
        if (!fs::exists(ckpt)) throw ConfigError("--resume given but " + ckpt.string() + " does not exist");
        trainer.load_state(read_checkpoint(ckpt));
        std::cout << "resuming after epoch " << trainer.epochs_completed() << "\n";
      }
      RunOptions ro;
      ro.checkpoint_path = ckpt;
      ro.stop_after_epochs = stop_after;
      ro.on_epoch = [&](const LogRow& r) {
        std::cout << "epoch " << r.epoch << " " << to_string(r.phase) << " total " << r.total << "\n";
        write_text(out / "train_log.csv", trainer.log_csv());
      };
      TrainResult res = trainer.run(ro);
      write_text(out / "train_log.csv", trainer.log_csv());
      std::vector<std::string> artifacts{"checkpoint.bin", "train_log.csv"};
      if (res.final_eval) {
        write_text(out / "eval.json", res.final_eval->to_json());
        artifacts.push_back("eval.json");
        std::cout << describe_eval(*res.final_eval);
      }
      std::cout << (res.finished ? "finished" : "stopped") << " after " << res.epochs_completed
                << " epochs; parameter checksum " << hex(res.parameter_checksum) << "\n";
      write_manifest(out, "train",
                     {{"data_dir", train_data}, {"model", model_json(train_model)}, {"train", train_json(train_opts)},
                      {"resume", resume}, {"stop_after", stop_after}},
                     tc.seed, started, artifacts);
      return kOk;
    }

    if (active == eval) {
      const fs::path out = resolve_out(eval_out, "eval");
      prepare_dir(out);
      Dataset ds = import_dataset(eval_data);
      Checkpoint ck = read_checkpoint(eval_ckpt);
      const BackboneConfig bc = BackboneConfig::from_meta(ck.meta);
      check_compatible(bc, ds);
      ReidModel model = ReidModel::from_checkpoint(ck);
      EvalOptions eo;
      eo.correlation = parse_correlation(eval_corr);
      eo.correlation_test_only = eval_test_pairs;
      eo.probe.seed = eval_seed;
      EvalResult r = evaluate(model, ds, eo);
      write_text(out / "eval.json", r.to_json());
      write_rank_lists_csv(r, ds, out / "ranklists.csv");
      std::cout << describe_eval(r);
      write_manifest(out, "eval",
                     {{"checkpoint", eval_ckpt}, {"data_dir", eval_data}, {"correlation", eval_corr},
                      {"probe_seed", eval_seed}, {"test_pairs_only", eval_test_pairs}},
                     eval_seed, started, {"eval.json", "ranklists.csv"});
      return kOk;
    }

    if (active == sweep) {
      Dataset ds = import_dataset(sweep_data);
      TrainConfig tc = sweep_opts.config();
      std::vector<std::size_t> parts;
      std::istringstream is(sweep_parts);
      std::string item;
      while (std::getline(is, item, ',')) {
        try {
          parts.push_back(std::stoul(item));
        } catch (const std::exception&) {
          throw ConfigError("--n-list: '" + item + "' is not a positive integer");
        }
      }
      if (parts.empty()) throw ConfigError("--n-list is empty");
      // Reject every invalid n before any training starts.
      std::vector<BackboneConfig> configs;
      for (std::size_t n : parts) {
        BackboneConfig bc = sweep_model.config();
        bc.n_parts = n;
        configs.push_back(fit_to_dataset(bc, ds));
      }
      const fs::path out = resolve_out(sweep_out, "sweep-partitions");
      prepare_dir(out);
      std::ostringstream csv;
      csv << "n,rank1,mAP\n" << std::setprecision(17);
      for (const auto& bc : configs) {
        ReidModel model(bc, tc.seed);
        Trainer trainer(model, ds, tc);
        TrainResult res = trainer.run();
        csv << bc.n_parts << ',' << res.final_eval->rank1 << ',' << res.final_eval->mAP << '\n';
        std::cout << "n=" << bc.n_parts << "  rank-1 " << res.final_eval->rank1 << "  mAP " << res.final_eval->mAP
                  << "\n";
      }
      write_text(out / "sweep.csv", csv.str());
      write_manifest(out, "sweep-partitions",
                     {{"data_dir", sweep_data}, {"n_list", sweep_parts}, {"model", model_json(sweep_model)},
                      {"train", train_json(sweep_opts)}},
                     tc.seed, started, {"sweep.csv"});
      return kOk;
    }

    if (active == grad) {
      const fs::path out = resolve_out(grad_out, "gradcheck");
      prepare_dir(out);
      auto reports = GradCheckSuite::builtin().run(grad_cases, grad_seed, grad_tol);
      bool ok = true;
      std::ostringstream csv;
      csv << "op,cases,worst_relative_error,passed\n" << std::setprecision(6);
      for (const auto& r : reports) {
        std::cout << std::left << std::setw(20) << r.op << std::setw(6) << r.cases << std::scientific
                  << std::setprecision(3) << r.worst_relative_error << std::defaultfloat << "  "
                  << (r.passed ? "ok" : "FAIL") << "\n";
        csv << r.op << ',' << r.cases << ',' << r.worst_relative_error << ',' << (r.passed ? 1 : 0) << '\n';
        ok = ok && r.passed;
      }
      write_text(out / "gradcheck.csv", csv.str());
      write_manifest(out, "gradcheck", {{"cases", grad_cases}, {"tolerance", grad_tol}}, grad_seed, started,
                     {"gradcheck.csv"});
      std::cout << (ok ? "all ops pass\n" : "gradient check FAILED\n");
      return ok ? kOk : kOther;
    }

    if (active == probe) {
      const fs::path out = resolve_out(probe_out, "probe");
      prepare_dir(out);
      Dataset ds = import_dataset(probe_data);
      Checkpoint ck = read_checkpoint(probe_ckpt);
      check_compatible(BackboneConfig::from_meta(ck.meta), ds);
      ReidModel model = ReidModel::from_checkpoint(ck);
      std::vector<std::size_t> test = ds.indices(Split::query);
      for (auto i : ds.indices(Split::gallery)) test.push_back(i);
      for (auto i : ds.indices(Split::unused)) test.push_back(i);
      Descriptors d = describe(model, ds, test);
      ProbeConfig pc;
      pc.seed = probe_seed;
      nlohmann::ordered_json j;
      j["descriptor"] = domain_probe(d.features, d.modalities, pc);
      for (std::size_t level = 0; level < kLevels; ++level) {
        RowMatrix g(static_cast<Eigen::Index>(d.g.size()), d.g.front()[level].size());
        for (std::size_t r = 0; r < d.g.size(); ++r) g.row(static_cast<Eigen::Index>(r)) = d.g[r][level].transpose();
        j["g" + std::to_string(level + 1)] = domain_probe(g, d.modalities, pc);
      }
      write_text(out / "probe.json", j.dump(2) + "\n");
      std::cout << j.dump(2) << "\n";
      write_manifest(out, "probe", {{"checkpoint", probe_ckpt}, {"data_dir", probe_data}}, probe_seed, started,
                     {"probe.json"});
      return kOk;
    }
  } catch (const NumericAbort& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return kNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kConfig;
  } catch (const ProtocolError& e) {
    std::cerr << "protocol error: " << e.what() << "\n";
    return kConfig;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
  return kOther;
}
