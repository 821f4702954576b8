#pragma once

#include "xmreid/checkpoint.hpp"
#include "xmreid/ops.hpp"
#include "xmreid/rng.hpp"
#include "xmreid/tensor.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace xmreid {

enum class Modality : int { colour = 0, infrared = 1 };

inline int label_of(Modality m) { return static_cast<int>(m); }

inline constexpr int kLevels = 4;

struct BackboneConfig {
  std::array<std::size_t, kLevels> stage_channels{16, 32, 64, 128};
  std::size_t input_channels = 3;
  std::size_t input_height = 96;
  std::size_t input_width = 48;
  std::size_t units_per_stage = 2;
  std::size_t n_parts = 3;
  std::size_t part_dim = 64;
  std::size_t num_identities = 0;
  std::size_t discriminator_hidden = 64;
  /// Both private streams start from the same initial weights, as two copies
  /// of one pretrained network would. They remain separate parameters.
  bool mirrored_streams = true;

  // Stage 1 keeps the input resolution, stages 2-4 halve it.
  std::size_t final_height() const { return input_height / 8; }
  std::size_t final_width() const { return input_width / 8; }
  std::size_t descriptor_dim() const { return n_parts * part_dim; }

  /// Part counts that tile the final map height exactly.
  std::vector<std::size_t> valid_part_counts() const;
  /// Throws ConfigError on any violated constraint.
  void validate() const;

  std::map<std::string, std::string> to_meta() const;
  static BackboneConfig from_meta(const std::map<std::string, std::string>& meta);
  bool operator==(const BackboneConfig&) const = default;
};

/// [begin, end) rows of each horizontal stripe, top to bottom.
std::vector<std::pair<std::size_t, std::size_t>> stripe_bounds(std::size_t height, std::size_t n_parts);

/// Which batch-norm statistics a forward pass uses.
enum class ForwardMode {
  train,         // batch statistics, running statistics updated
  train_frozen,  // batch statistics, running statistics left alone
  eval,          // running statistics; deterministic
};

struct Conv2d {
  Tensor weight;
  std::size_t stride = 1;
  std::size_t pad = 0;

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, stride, pad); }
};

struct BatchNorm {
  Tensor gamma, beta, running_mean, running_var;

  Tensor operator()(const Tensor& x, ForwardMode mode);
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out], undefined when the layer has none

  Tensor operator()(const Tensor& x) const;
};

struct ResidualUnit {
  Conv2d conv1, conv2;
  BatchNorm bn1, bn2;
  bool has_projection = false;
  Conv2d projection;
  BatchNorm projection_bn;

  Tensor forward(const Tensor& x, ForwardMode mode);
};

struct ResidualStage {
  std::vector<ResidualUnit> units;

  Tensor forward(const Tensor& x, ForwardMode mode);
};

/// Stages 1-3 exist once per modality; stage 4 is a single shared object.
class DualStreamBackbone {
 public:
  DualStreamBackbone() = default;
  DualStreamBackbone(const BackboneConfig& config, Rng& rng);

  /// Stage `index` (0-based, 0..2) of the given modality's private stream.
  ResidualStage& stream_stage(Modality m, std::size_t index) {
    return streams_[static_cast<std::size_t>(label_of(m))][index];
  }
  ResidualStage& shared_stage() { return shared_; }

  void collect(NamedTensors& params, NamedTensors& buffers);

 private:
  std::array<std::array<ResidualStage, 3>, 2> streams_;
  ResidualStage shared_;
};

/// Independent embedding block and classifier W_i per horizontal stripe.
struct PartHeads {
  std::vector<Linear> embeddings;   // [C4 -> part_dim], with bias
  std::vector<Linear> classifiers;  // [part_dim -> identities], no bias

  PartHeads() = default;
  PartHeads(const BackboneConfig& config, Rng& rng);
  void collect(NamedTensors& params);
};

struct Discriminator {
  Linear hidden, output;

  Tensor operator()(const Tensor& x) const;
};

/// One two-layer perceptron per abstraction level, plus one on the
/// concatenated part descriptor (used only by the vanilla ablation).
class DomainClassifierBank {
 public:
  DomainClassifierBank() = default;
  DomainClassifierBank(const BackboneConfig& config, Rng& rng);

  /// P(infrared | g) for each row of g ([N, C_level] or [C_level]), as [N, 1].
  Tensor discriminate(const Tensor& g, int level);
  Tensor discriminate_descriptor(const Tensor& f);

  std::size_t evaluations() const { return evaluations_; }
  void reset_evaluations() { evaluations_ = 0; }
  void collect(NamedTensors& params);

 private:
  std::array<Discriminator, kLevels> levels_;
  Discriminator descriptor_;
  std::size_t descriptor_dim_ = 0;
  std::size_t evaluations_ = 0;
};

/// Plain per-sample view of a forward pass.
struct ForwardRecord {
  std::array<Eigen::VectorXd, kLevels> g;
  std::vector<Eigen::VectorXd> parts;
  std::vector<Eigen::VectorXd> logits;
  Eigen::VectorXd avg_distribution;
  double entropy = 0.0;
  Modality modality = Modality::colour;
};

/// Graph-attached outputs of a batched forward pass, rows in input order.
struct BatchForward {
  std::array<Tensor, kLevels> g;  // [N, C_j]
  std::vector<Tensor> parts;      // n_parts x [N, part_dim]
  std::vector<Tensor> logits;     // n_parts x [N, identities]
  RowMatrix avg_distribution;     // [N, identities]
  Eigen::VectorXd entropy;        // [N]
  std::vector<Modality> modalities;

  std::size_t batch_size() const { return modalities.size(); }
  /// [f_1, ..., f_n] before normalisation, [N, n_parts * part_dim].
  Tensor raw_descriptor() const;
  ForwardRecord record(std::size_t row) const;
};

/// Concatenated part features, L2-normalised.
Eigen::VectorXd extract_descriptor(const ForwardRecord& record);
/// Row-wise extract_descriptor for a whole batch.
RowMatrix extract_descriptors(const BatchForward& forward);

class ReidModel {
 public:
  ReidModel(const BackboneConfig& config, std::uint64_t seed);

  const BackboneConfig& config() const { return config_; }

  /// images: [N, C, H, W]; one modality per row.
  BatchForward forward(const Tensor& images, std::span<const Modality> modalities, ForwardMode mode);
  /// Single image [C, H, W].
  ForwardRecord forward(const Tensor& image, Modality modality, bool train_mode);

  Tensor discriminate(const Tensor& g, int level) { return bank_.discriminate(g, level); }

  DualStreamBackbone& backbone() { return backbone_; }
  PartHeads& heads() { return heads_; }
  DomainClassifierBank& discriminators() { return bank_; }

  const NamedTensors& named_parameters() const { return params_; }
  const NamedTensors& named_buffers() const { return buffers_; }
  std::vector<Tensor> parameters_with_prefix(std::span<const std::string> prefixes) const;
  std::vector<Tensor> backbone_parameters() const;
  std::vector<Tensor> head_parameters() const;
  std::vector<Tensor> extractor_parameters() const;
  std::vector<Tensor> discriminator_parameters() const;
  std::size_t parameter_count(const std::string& prefix) const;

  void set_extractor_trainable(bool trainable);
  void set_discriminator_trainable(bool trainable);

  /// Config in meta (prefixed "model."), parameters and buffers as arrays.
  void save(Checkpoint& checkpoint) const;
  /// Throws ConfigError when the checkpoint was written for another config.
  void load(const Checkpoint& checkpoint);
  static ReidModel from_checkpoint(const Checkpoint& checkpoint);

 private:
  void index_tensors();

  BackboneConfig config_;
  DualStreamBackbone backbone_;
  PartHeads heads_;
  DomainClassifierBank bank_;
  NamedTensors params_;
  NamedTensors buffers_;
};

}  // namespace xmreid
