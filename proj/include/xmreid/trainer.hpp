#pragma once

#include "xmreid/checkpoint.hpp"
#include "xmreid/data.hpp"
#include "xmreid/eval.hpp"
#include "xmreid/losses.hpp"
#include "xmreid/model.hpp"
#include "xmreid/optim.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace xmreid {

enum class Granularity { per_epoch, per_batch };
enum class Phase { discriminator, extractor };

std::string to_string(Granularity g);
Granularity parse_granularity(const std::string& text);
std::string to_string(Phase p);

struct TrainConfig {
  std::size_t epochs_per_side = 35;
  Granularity granularity = Granularity::per_epoch;
  double lr_heads = 0.01;  // part heads, classifiers and discriminators
  double lr_backbone = 0.001;
  bool unify_lr = false;  // use lr_heads everywhere
  double momentum = 0.9;
  std::uint64_t seed = 1;
  AblationMode ablation = AblationMode::shallow_weighting;
  double triplet_margin = 0.3;
  PkSpec pk;
  bool augment = true;
  AugmentConfig augment_config;
  /// Epochs per discriminator block and per extractor block.
  std::size_t discriminator_block = 1;
  std::size_t extractor_block = 1;
  /// Evaluate retrieval after every n-th extractor epoch (0: only at the end).
  std::size_t eval_every = 0;
  bool final_eval = true;

  LossConfig loss_config() const;
  void validate() const;
  std::map<std::string, std::string> to_meta() const;
};

/// One optimisation step's outcome.
struct StepReport {
  LossReport report;
  /// Parameters holding a nonzero gradient right before the update.
  std::vector<std::string> grad_params;
  double weight_ratio = 1.0;  // max w / min w in the batch
  std::size_t discriminator_evaluations = 0;
};

struct LogRow {
  std::size_t epoch = 0;
  Phase phase = Phase::extractor;
  std::vector<double> xent;
  double triplet = 0.0;
  std::vector<double> adv;  // in LossConfig::adversarial_terms() order
  double total = 0.0;
  std::optional<double> eval_rank1;
  std::optional<double> eval_mAP;
};

struct RunOptions {
  /// Written after every completed epoch when set.
  std::filesystem::path checkpoint_path;
  /// Stop once this many epochs (both sides counted) are complete; 0 runs to the end.
  std::size_t stop_after_epochs = 0;
  std::function<void(const LogRow&)> on_epoch;
};

struct TrainResult {
  std::size_t epochs_completed = 0;
  bool finished = false;
  std::optional<EvalResult> final_eval;
  double max_weight_ratio = 1.0;  // over extractor steps after the first epoch
  std::uint64_t parameter_checksum = 0;
};

class Trainer {
 public:
  Trainer(ReidModel& model, const Dataset& dataset, TrainConfig config);

  const TrainConfig& config() const { return config_; }
  const LossConfig& loss_config() const { return loss_; }

  Batch next_batch() { return sampler_.next_batch(); }
  /// Stacked batch images, augmented when enabled.
  Tensor batch_images(const Batch& batch);

  /// Extractor frozen; minimises the adversarial loss over the discriminators.
  StepReport discriminator_step(const Batch& batch);
  /// Discriminators frozen; minimises the full objective.
  StepReport extractor_step(const Batch& batch);
  /// Same steps on prepared inputs, without augmentation.
  StepReport discriminator_step(const Tensor& images, const Batch& batch);
  StepReport extractor_step(const Tensor& images, const Batch& batch);

  /// Epoch phases in execution order; per-batch alternation lists each side once per round.
  std::vector<Phase> schedule() const;

  TrainResult run(const RunOptions& options = {});

  const std::vector<LogRow>& log() const { return log_; }
  std::string log_header() const;
  std::string log_csv() const;

  /// Model, optimiser velocities, RNG streams, epoch position and log.
  void save_state(Checkpoint& checkpoint) const;
  void load_state(const Checkpoint& checkpoint);
  std::size_t epochs_completed() const { return epoch_; }

 private:
  void check_isolation(const std::vector<std::string>& grad_params, Phase phase) const;
  std::vector<std::string> params_with_grad() const;
  void check_finite(const LossReport& report);
  void check_forward(const BatchForward& forward);
  LogRow run_epoch(Phase phase);
  std::vector<LogRow> run_round();
  LogRow summarise(Phase phase, const std::vector<StepReport>& steps) const;
  void maybe_evaluate(LogRow& row, bool force);

  ReidModel& model_;
  const Dataset& dataset_;
  TrainConfig config_;
  LossConfig loss_;
  PkSampler sampler_;
  Rng augment_rng_;
  SgdMomentum extractor_opt_;
  SgdMomentum discriminator_opt_;
  std::size_t epoch_ = 0;        // schedule entries completed
  std::size_t extractor_epochs_ = 0;
  long step_ = 0;
  double max_weight_ratio_ = 1.0;
  std::vector<LogRow> log_;
  std::optional<EvalResult> last_eval_;
};

/// `base` with the input size and class count taken from the dataset.
BackboneConfig fit_to_dataset(BackboneConfig base, const Dataset& dataset);

/// Modality accuracy of the active discriminators on one batch (train_frozen BN),
/// averaged over levels.
double discriminator_accuracy(ReidModel& model, const Tensor& images, const Batch& batch,
                              const LossConfig& config);

struct MinMaxTrace {
  double initial = 0.0;
  double after_discriminator = 0.0;
  double after_extractor = 0.0;
  /// D gains (or keeps) accuracy, then the extractor moves it back toward 0.5.
  bool holds() const;
};

/// k discriminator steps then k extractor steps on one fixed batch.
MinMaxTrace minmax_probe(ReidModel& model, const Dataset& dataset, const TrainConfig& config,
                         std::size_t discriminator_steps, std::size_t extractor_steps);

}  // namespace xmreid
