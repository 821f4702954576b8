#include "xmreid/trainer.hpp"

#include "xmreid/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <limits>
#include <sstream>

namespace xmreid {

namespace {

std::string hexfloat(double v) {
  std::ostringstream os;
  os << std::hexfloat << v;
  return os.str();
}

double parse_hexfloat(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str()) throw ConfigError("malformed number in checkpoint: '" + s + "'");
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) out.push_back(item);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::string join_hex(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + hexfloat(v[i]);
  return out;
}

std::vector<double> parse_hex_list(const std::string& s) {
  std::vector<double> out;
  if (s.empty()) return out;
  for (const auto& item : split(s, ',')) out.push_back(parse_hexfloat(item));
  return out;
}

std::string encode_row(const LogRow& r) {
  return std::to_string(r.epoch) + ';' + to_string(r.phase) + ';' + join_hex(r.xent) + ';' + hexfloat(r.triplet) +
         ';' + join_hex(r.adv) + ';' + hexfloat(r.total) + ';' + (r.eval_rank1 ? hexfloat(*r.eval_rank1) : "") +
         ';' + (r.eval_mAP ? hexfloat(*r.eval_mAP) : "");
}

LogRow decode_row(const std::string& line) {
  auto f = split(line, ';');
  if (f.size() != 8) throw ConfigError("malformed log row in checkpoint");
  LogRow r;
  r.epoch = std::stoul(f[0]);
  r.phase = f[1] == "discriminator" ? Phase::discriminator : Phase::extractor;
  r.xent = parse_hex_list(f[2]);
  r.triplet = parse_hexfloat(f[3]);
  r.adv = parse_hex_list(f[4]);
  r.total = parse_hexfloat(f[5]);
  if (!f[6].empty()) r.eval_rank1 = parse_hexfloat(f[6]);
  if (!f[7].empty()) r.eval_mAP = parse_hexfloat(f[7]);
  return r;
}

std::vector<ParamGroup> extractor_groups(const ReidModel& model, const TrainConfig& c) {
  return {{model.backbone_parameters(), c.unify_lr ? c.lr_heads : c.lr_backbone},
          {model.head_parameters(), c.lr_heads}};
}

void save_velocities(Checkpoint& ck, const std::string& prefix, const SgdMomentum& opt) {
  for (std::size_t g = 0; g < opt.group_count(); ++g) {
    const auto& vs = opt.velocities(g);
    for (std::size_t i = 0; i < vs.size(); ++i) {
      ck.arrays.push_back({prefix + std::to_string(g) + "." + std::to_string(i),
                           {static_cast<std::size_t>(vs[i].size())},
                           std::vector<double>(vs[i].data(), vs[i].data() + vs[i].size())});
    }
  }
}

void load_velocities(const Checkpoint& ck, const std::string& prefix, SgdMomentum& opt) {
  for (std::size_t g = 0; g < opt.group_count(); ++g) {
    auto& vs = opt.velocities(g);
    for (std::size_t i = 0; i < vs.size(); ++i) {
      const std::string name = prefix + std::to_string(g) + "." + std::to_string(i);
      const NamedArray* a = ck.find(name);
      if (!a || a->values.size() != static_cast<std::size_t>(vs[i].size())) {
        throw ConfigError("checkpoint lacks optimiser state '" + name + "'");
      }
      vs[i] = Eigen::Map<const Eigen::VectorXd>(a->values.data(), vs[i].size());
    }
  }
}

const std::string& meta_at(const Checkpoint& ck, const std::string& key) {
  auto it = ck.meta.find(key);
  if (it == ck.meta.end()) throw ConfigError("checkpoint lacks '" + key + "'");
  return it->second;
}

}  // namespace

std::string to_string(Granularity g) { return g == Granularity::per_epoch ? "per-epoch" : "per-batch"; }

Granularity parse_granularity(const std::string& text) {
  if (text == "per-epoch") return Granularity::per_epoch;
  if (text == "per-batch") return Granularity::per_batch;
  throw ConfigError("unknown alternation granularity '" + text + "' (expected per-epoch or per-batch)");
}

std::string to_string(Phase p) { return p == Phase::discriminator ? "discriminator" : "extractor"; }

LossConfig TrainConfig::loss_config() const {
  LossConfig c = LossConfig::for_ablation(ablation);
  c.triplet_margin = triplet_margin;
  return c;
}

void TrainConfig::validate() const {
  if (epochs_per_side == 0) throw ConfigError("epochs_per_side must be at least 1");
  if (!(lr_heads > 0.0) || !(lr_backbone > 0.0)) throw ConfigError("learning rates must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (discriminator_block == 0 || extractor_block == 0) throw ConfigError("block lengths must be at least 1");
  if (granularity == Granularity::per_batch && (discriminator_block != 1 || extractor_block != 1)) {
    throw ConfigError("block scheduling applies to per-epoch alternation only");
  }
  loss_config().validate();
}

std::map<std::string, std::string> TrainConfig::to_meta() const {
  return {
      {"train.epochs_per_side", std::to_string(epochs_per_side)},
      {"train.granularity", to_string(granularity)},
      {"train.lr_heads", hexfloat(lr_heads)},
      {"train.lr_backbone", hexfloat(lr_backbone)},
      {"train.unify_lr", unify_lr ? "1" : "0"},
      {"train.momentum", hexfloat(momentum)},
      {"train.seed", std::to_string(seed)},
      {"train.ablation", to_string(ablation)},
      {"train.triplet_margin", hexfloat(triplet_margin)},
      {"train.pk", std::to_string(pk.p) + "x" + std::to_string(pk.k)},
      {"train.augment", augment ? "1" : "0"},
      {"train.blocks", std::to_string(discriminator_block) + ":" + std::to_string(extractor_block)},
      {"train.eval_every", std::to_string(eval_every)},
  };
}

Trainer::Trainer(ReidModel& model, const Dataset& dataset, TrainConfig config)
    : model_(model),
      dataset_(dataset),
      config_(std::move(config)),
      loss_(config_.loss_config()),
      sampler_(dataset, config_.pk, config_.seed),
      augment_rng_(make_rng(config_.seed, 8)),
      extractor_opt_(extractor_groups(model, config_), config_.momentum),
      discriminator_opt_({{model.discriminator_parameters(), config_.lr_heads}}, config_.momentum) {
  config_.validate();
  if (model.config().num_identities != dataset.num_classes) {
    throw ConfigError("model has " + std::to_string(model.config().num_identities) +
                      " identity classes but the dataset trains " + std::to_string(dataset.num_classes));
  }
  if (model.config().input_height != dataset.config.height || model.config().input_width != dataset.config.width) {
    throw ConfigError("model input size does not match the dataset image size");
  }
}

Tensor Trainer::batch_images(const Batch& batch) {
  return config_.augment ? stack_images(dataset_, batch.sample_indices, &config_.augment_config, &augment_rng_)
                         : stack_images(dataset_, batch.sample_indices);
}

std::vector<std::string> Trainer::params_with_grad() const {
  std::vector<std::string> out;
  for (const auto& [name, t] : model_.named_parameters()) {
    auto g = t.grad();
    if (std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; })) out.push_back(name);
  }
  return out;
}

void Trainer::check_isolation(const std::vector<std::string>& grad_params, Phase phase) const {
  for (const auto& name : grad_params) {
    const bool discriminator_param = name.rfind("disc.", 0) == 0;
    if (discriminator_param != (phase == Phase::discriminator)) {
      throw std::logic_error("phase isolation violated: " + name + " received a gradient during the " +
                             to_string(phase) + " phase");
    }
  }
}

void Trainer::check_finite(const LossReport& r) {
  for (std::size_t i = 0; i < r.xent_per_part.size(); ++i) {
    if (!std::isfinite(r.xent_per_part[i])) throw NumericAbort("xent_" + std::to_string(i + 1), step_, r.xent_per_part[i]);
  }
  if (!std::isfinite(r.triplet)) throw NumericAbort("triplet", step_, r.triplet);
  for (const auto& [name, v] : r.adv_per_level) {
    if (!std::isfinite(v)) throw NumericAbort(name, step_, v);
  }
  if (!std::isfinite(r.total)) throw NumericAbort("total", step_, r.total);
}

void Trainer::check_forward(const BatchForward& f) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  auto finite = [](const Tensor& t) { return t.vec().allFinite(); };
  for (std::size_t i = 0; i < f.logits.size(); ++i) {
    if (!finite(f.logits[i])) throw NumericAbort("xent_" + std::to_string(i + 1), step_, nan);
  }
  for (const auto& p : f.parts) {
    if (!finite(p)) throw NumericAbort("triplet", step_, nan);
  }
  for (int level : loss_.adv_levels) {
    if (!finite(f.g[static_cast<std::size_t>(level - 1)])) throw NumericAbort("adv_" + std::to_string(level), step_, nan);
  }
}

StepReport Trainer::discriminator_step(const Batch& batch) { return discriminator_step(batch_images(batch), batch); }

StepReport Trainer::extractor_step(const Batch& batch) { return extractor_step(batch_images(batch), batch); }

StepReport Trainer::discriminator_step(const Tensor& images, const Batch& batch) {
  if (!loss_.adversarial_active()) {
    throw UsageError("discriminator_step: ablation '" + to_string(config_.ablation) + "' has no adversarial term");
  }
  model_.set_extractor_trainable(false);
  model_.set_discriminator_trainable(true);
  auto& bank = model_.discriminators();
  bank.reset_evaluations();

  BatchForward f = model_.forward(images, batch.modalities, ForwardMode::train_frozen);
  check_forward(f);
  StepReport out;
  out.report.weights = adversarial_weights(f, loss_);
  AdversarialLoss adv = adversarial_weighted(f, bank, out.report.weights, loss_);
  for (const auto& [name, t] : adv.per_level) out.report.adv_per_level.emplace_back(name, t.item());
  out.report.total = adv.total.item();
  check_finite(out.report);

  backward(adv.total);
  out.grad_params = params_with_grad();
  check_isolation(out.grad_params, Phase::discriminator);
  discriminator_opt_.step();
  out.weight_ratio = out.report.weights.maxCoeff() / out.report.weights.minCoeff();
  out.discriminator_evaluations = bank.evaluations();
  ++step_;
  return out;
}

StepReport Trainer::extractor_step(const Tensor& images, const Batch& batch) {
  model_.set_extractor_trainable(true);
  model_.set_discriminator_trainable(false);
  auto& bank = model_.discriminators();
  bank.reset_evaluations();

  BatchForward f = model_.forward(images, batch.modalities, ForwardMode::train);
  check_forward(f);
  Objective o = total_objective(f, batch.labels, bank, loss_);
  StepReport out;
  out.report = o.report;
  check_finite(out.report);

  backward(o.total);
  out.grad_params = params_with_grad();
  check_isolation(out.grad_params, Phase::extractor);
  extractor_opt_.step();
  out.weight_ratio = out.report.weights.maxCoeff() / out.report.weights.minCoeff();
  out.discriminator_evaluations = bank.evaluations();
  ++step_;
  return out;
}

std::vector<Phase> Trainer::schedule() const {
  std::vector<Phase> out;
  const bool adversarial = loss_.adversarial_active();
  if (!adversarial) {
    // Nothing consumes the discriminators, so their epochs are skipped.
    out.assign(config_.epochs_per_side, Phase::extractor);
    return out;
  }
  if (config_.granularity == Granularity::per_batch) {
    for (std::size_t r = 0; r < config_.epochs_per_side; ++r) {
      out.push_back(Phase::discriminator);
      out.push_back(Phase::extractor);
    }
    return out;
  }
  std::size_t d = 0, e = 0;
  while (d < config_.epochs_per_side || e < config_.epochs_per_side) {
    for (std::size_t i = 0; i < config_.discriminator_block && d < config_.epochs_per_side; ++i, ++d) {
      out.push_back(Phase::discriminator);
    }
    for (std::size_t i = 0; i < config_.extractor_block && e < config_.epochs_per_side; ++i, ++e) {
      out.push_back(Phase::extractor);
    }
  }
  return out;
}

LogRow Trainer::summarise(Phase phase, const std::vector<StepReport>& steps) const {
  LogRow row;
  row.epoch = epoch_;
  row.phase = phase;
  const double n = double(steps.size());
  const auto terms = loss_.adversarial_terms();
  row.adv.assign(terms.size(), 0.0);
  if (phase == Phase::extractor) row.xent.assign(model_.config().n_parts, 0.0);
  for (const auto& s : steps) {
    for (std::size_t i = 0; i < row.xent.size(); ++i) row.xent[i] += s.report.xent_per_part[i] / n;
    row.triplet += s.report.triplet / n;
    for (std::size_t i = 0; i < terms.size(); ++i) row.adv[i] += s.report.adv_per_level.at(i).second / n;
    row.total += s.report.total / n;
  }
  return row;
}

LogRow Trainer::run_epoch(Phase phase) {
  std::vector<StepReport> steps;
  for (std::size_t b = 0; b < sampler_.batches_per_epoch(); ++b) {
    Batch batch = next_batch();
    steps.push_back(phase == Phase::discriminator ? discriminator_step(batch) : extractor_step(batch));
    if (phase == Phase::extractor && extractor_epochs_ >= 1) {
      max_weight_ratio_ = std::max(max_weight_ratio_, steps.back().weight_ratio);
    }
  }
  return summarise(phase, steps);
}

std::vector<LogRow> Trainer::run_round() {
  std::vector<StepReport> d_steps, e_steps;
  for (std::size_t b = 0; b < sampler_.batches_per_epoch(); ++b) {
    Batch batch = next_batch();
    Tensor images = batch_images(batch);
    d_steps.push_back(discriminator_step(images, batch));
    e_steps.push_back(extractor_step(images, batch));
    if (extractor_epochs_ >= 1) max_weight_ratio_ = std::max(max_weight_ratio_, e_steps.back().weight_ratio);
  }
  LogRow d = summarise(Phase::discriminator, d_steps);
  LogRow e = summarise(Phase::extractor, e_steps);
  e.epoch = epoch_ + 1;
  return {d, e};
}

void Trainer::maybe_evaluate(LogRow& row, bool force) {
  if (row.phase != Phase::extractor) return;
  ++extractor_epochs_;
  const bool periodic = config_.eval_every > 0 && extractor_epochs_ % config_.eval_every == 0;
  if (!periodic && !force) return;
  EvalOptions options;
  options.probe.seed = config_.seed;
  options.with_probe = force;
  options.with_correlation = force;
  last_eval_ = evaluate(model_, dataset_, options);
  row.eval_rank1 = last_eval_->rank1;
  row.eval_mAP = last_eval_->mAP;
}

TrainResult Trainer::run(const RunOptions& options) {
  const std::vector<Phase> plan = schedule();
  const bool rounds = loss_.adversarial_active() && config_.granularity == Granularity::per_batch;
  TrainResult result;
  bool evaluated_final = false;
  while (epoch_ < plan.size()) {
    if (options.stop_after_epochs > 0 && epoch_ >= options.stop_after_epochs) break;
    std::vector<LogRow> rows = rounds ? run_round() : std::vector<LogRow>{run_epoch(plan[epoch_])};
    epoch_ += rows.size();
    const bool last = epoch_ == plan.size();
    for (auto& row : rows) {
      const bool force = last && config_.final_eval && row.phase == Phase::extractor;
      maybe_evaluate(row, force);
      evaluated_final = evaluated_final || force;
      log_.push_back(row);
      if (options.on_epoch) options.on_epoch(row);
    }
    if (!options.checkpoint_path.empty()) {
      Checkpoint ck;
      save_state(ck);
      write_checkpoint(options.checkpoint_path, ck);
    }
  }
  result.epochs_completed = epoch_;
  result.finished = epoch_ == plan.size();
  if (result.finished && config_.final_eval) {
    if (!evaluated_final) {
      EvalOptions eo;
      eo.probe.seed = config_.seed;
      last_eval_ = evaluate(model_, dataset_, eo);
    }
    result.final_eval = last_eval_;
  }
  result.max_weight_ratio = max_weight_ratio_;
  result.parameter_checksum = checksum(model_.named_parameters());
  return result;
}

std::string Trainer::log_header() const {
  std::string h = "epoch,phase";
  for (std::size_t i = 1; i <= model_.config().n_parts; ++i) h += ",xent_" + std::to_string(i);
  h += ",triplet";
  for (const auto& t : loss_.adversarial_terms()) h += "," + t;
  h += ",total,eval_rank1,eval_mAP";
  return h;
}

std::string Trainer::log_csv() const {
  std::ostringstream os;
  os << log_header() << '\n' << std::setprecision(17);
  for (const auto& r : log_) {
    os << r.epoch << ',' << to_string(r.phase);
    for (std::size_t i = 0; i < model_.config().n_parts; ++i) {
      os << ',';
      if (i < r.xent.size()) os << r.xent[i];
    }
    os << ',';
    if (r.phase == Phase::extractor) os << r.triplet;
    for (double v : r.adv) os << ',' << v;
    os << ',' << r.total << ',';
    if (r.eval_rank1) os << *r.eval_rank1;
    os << ',';
    if (r.eval_mAP) os << *r.eval_mAP;
    os << '\n';
  }
  return os.str();
}

void Trainer::save_state(Checkpoint& ck) const {
  model_.save(ck);
  for (const auto& [k, v] : config_.to_meta()) ck.meta[k] = v;
  ck.meta["state.epoch"] = std::to_string(epoch_);
  ck.meta["state.extractor_epochs"] = std::to_string(extractor_epochs_);
  ck.meta["state.step"] = std::to_string(step_);
  ck.meta["state.max_weight_ratio"] = hexfloat(max_weight_ratio_);
  ck.meta["state.sampler_rng"] = sampler_.state();
  ck.meta["state.augment_rng"] = rng_state(augment_rng_);
  std::string rows;
  for (const auto& r : log_) rows += encode_row(r) + '\n';
  ck.meta["state.log"] = rows;
  save_velocities(ck, "opt.extractor.", extractor_opt_);
  save_velocities(ck, "opt.discriminator.", discriminator_opt_);
}

void Trainer::load_state(const Checkpoint& ck) {
  for (const auto& [k, v] : config_.to_meta()) {
    if (meta_at(ck, k) != v) {
      throw ConfigError("checkpoint was trained with " + k + " = " + meta_at(ck, k) + ", not " + v);
    }
  }
  model_.load(ck);
  epoch_ = std::stoul(meta_at(ck, "state.epoch"));
  extractor_epochs_ = std::stoul(meta_at(ck, "state.extractor_epochs"));
  step_ = std::stol(meta_at(ck, "state.step"));
  max_weight_ratio_ = parse_hexfloat(meta_at(ck, "state.max_weight_ratio"));
  sampler_.restore(meta_at(ck, "state.sampler_rng"));
  restore_rng_state(augment_rng_, meta_at(ck, "state.augment_rng"));
  log_.clear();
  std::istringstream rows(meta_at(ck, "state.log"));
  std::string line;
  while (std::getline(rows, line)) {
    if (!line.empty()) log_.push_back(decode_row(line));
  }
  load_velocities(ck, "opt.extractor.", extractor_opt_);
  load_velocities(ck, "opt.discriminator.", discriminator_opt_);
}

BackboneConfig fit_to_dataset(BackboneConfig base, const Dataset& dataset) {
  base.input_height = dataset.config.height;
  base.input_width = dataset.config.width;
  base.num_identities = dataset.num_classes;
  base.validate();
  return base;
}

double discriminator_accuracy(ReidModel& model, const Tensor& images, const Batch& batch, const LossConfig& config) {
  BatchForward f = model.forward(images, batch.modalities, ForwardMode::train_frozen);
  auto& bank = model.discriminators();
  std::vector<Tensor> outputs;
  std::vector<int> levels = config.adv_levels;
  if (levels.empty()) levels = {1, 2, 3, 4};
  for (int j : levels) outputs.push_back(bank.discriminate(f.g[static_cast<std::size_t>(j - 1)], j));
  if (config.vanilla_mode) outputs.push_back(bank.discriminate_descriptor(f.raw_descriptor()));
  double correct = 0.0, total = 0.0;
  for (const auto& p : outputs) {
    auto v = p.values();
    for (std::size_t k = 0; k < v.size(); ++k) {
      const bool says_infrared = v[k] > 0.5;
      correct += says_infrared == (batch.modalities[k] == Modality::infrared) ? 1.0 : 0.0;
      total += 1.0;
    }
  }
  return correct / total;
}

bool MinMaxTrace::holds() const {
  return after_discriminator >= initial && std::abs(after_extractor - 0.5) < std::abs(after_discriminator - 0.5);
}

MinMaxTrace minmax_probe(ReidModel& model, const Dataset& dataset, const TrainConfig& config,
                         std::size_t discriminator_steps, std::size_t extractor_steps) {
  Trainer trainer(model, dataset, config);
  const LossConfig loss = trainer.loss_config();
  if (!loss.adversarial_active()) throw UsageError("minmax_probe needs an adversarial ablation");
  Batch batch = trainer.next_batch();
  Tensor images = stack_images(dataset, batch.sample_indices);
  MinMaxTrace t;
  t.initial = discriminator_accuracy(model, images, batch, loss);
  for (std::size_t i = 0; i < discriminator_steps; ++i) trainer.discriminator_step(images, batch);
  t.after_discriminator = discriminator_accuracy(model, images, batch, loss);
  for (std::size_t i = 0; i < extractor_steps; ++i) trainer.extractor_step(images, batch);
  t.after_extractor = discriminator_accuracy(model, images, batch, loss);
  return t;
}

}  // namespace xmreid
