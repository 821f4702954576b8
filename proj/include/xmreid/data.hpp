#pragma once

#include "xmreid/model.hpp"
#include "xmreid/rng.hpp"
#include "xmreid/tensor.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace xmreid {

enum class Split { train, query, gallery, unused };

std::string to_string(Split split);
Split parse_split(const std::string& text);

struct DatasetConfig {
  std::size_t identities = 40;
  std::size_t per_identity = 8;  // images per identity per modality
  std::uint64_t seed = 1;
  std::size_t height = 96;
  std::size_t width = 48;
  std::size_t cameras = 4;
  double noise_sd = 0.02;
  double brightness_jitter = 0.1;
  /// Every `twin_every`-th identity copies its predecessor's geometry with
  /// hue-rotated, luminance-matched clothing. 0 disables twins.
  std::size_t twin_every = 5;
  /// Extra colour identities whose second modality is the red channel alone.
  std::size_t red_channel_identities = 0;

  std::size_t test_identities() const { return identities / 4; }
  std::size_t train_identities() const { return identities - test_identities(); }
  void validate() const;
};

/// Per-identity rendering latent, sampled once.
struct IdentityLatent {
  double head_height = 0.0;   // fractions of image height
  double torso_bottom = 0.0;
  double shoulder_width = 0.0;  // fractions of image width
  double leg_width = 0.0;
  double leg_gap = 0.0;
  std::vector<Eigen::Vector3d> albedos;  // torso, legs, then optional shoes / sleeves
  Eigen::Vector3d skin;
  Eigen::Vector3d logo_colour;
  double logo_x = 0.0, logo_y = 0.0, logo_w = 0.0, logo_h = 0.0;  // relative to the torso box
  double emissivity = 1.0;
};

/// 0.299 R + 0.587 G + 0.114 B.
double luminance(const Eigen::Vector3d& rgb);
/// Infrared intensity of a surface: emissivity-scaled luminance plus a warm
/// offset for exposed skin.
double infrared_intensity(const Eigen::Vector3d& albedo, double emissivity, bool skin);
/// A random colour with the same luminance as `rgb`.
Eigen::Vector3d luminance_matched_colour(const Eigen::Vector3d& rgb, Rng& rng);

IdentityLatent sample_identity(Rng& rng);

struct RenderOptions {
  std::size_t height = 96;
  std::size_t width = 48;
  double noise_sd = 0.02;
  double brightness = 1.0;
  int dx = 0, dy = 0;  // pose jitter in pixels
  double background = 0.3;
  bool red_channel_only = false;
};

/// Planar [3, H, W] image in [0, 1].
Eigen::VectorXd render(const IdentityLatent& id, Modality modality, const RenderOptions& options,
                       Rng& rng);

struct Sample {
  Eigen::VectorXd pixels;  // planar [3, H, W]
  int identity = 0;
  Modality modality = Modality::colour;
  int camera = 0;
  Split split = Split::train;
};

struct Dataset {
  DatasetConfig config;
  std::vector<Sample> samples;
  /// Training classes are identities 0..num_classes-1.
  std::size_t num_classes = 0;
  Eigen::Vector3d channel_means = Eigen::Vector3d::Zero();

  std::vector<std::size_t> indices(Split split) const;
  std::size_t channels() const { return 3; }
};

/// Train identities first, then red-channel extras, then the test identities.
/// Test split: every infrared image is a probe; the first colour image of each
/// test identity forms the single-shot gallery.
Dataset generate_dataset(const DatasetConfig& config);

/// Mean of each channel over the training images.
Eigen::Vector3d compute_channel_means(const Dataset& dataset);

/// Restrict to the first `identities` training classes; test splits are kept.
Dataset subset_train_identities(const Dataset& dataset, std::size_t identities);

struct AugmentConfig {
  double flip_p = 0.5;
  double erase_p = 0.2;
  double area_min = 0.02;
  double area_max = 0.2;
  double aspect_min = 0.3;
  double aspect_max = 3.3;
  std::size_t erase_attempts = 100;
};

struct EraseRect {
  std::size_t top = 0, left = 0, height = 0, width = 0;
};

struct AugmentTrace {
  bool flipped = false;
  std::optional<EraseRect> erased;
};

void flip_horizontal(Eigen::VectorXd& image, std::size_t height, std::size_t width);

Eigen::VectorXd augment(const Eigen::VectorXd& image, std::size_t height, std::size_t width,
                        const Eigen::Vector3d& fill, const AugmentConfig& config, Rng& rng,
                        AugmentTrace* trace = nullptr);

struct PkSpec {
  std::size_t p = 8;
  std::size_t k = 4;  // k/2 colour plus k/2 infrared per identity

  std::size_t batch_size() const { return p * k; }
};

struct Batch {
  std::vector<std::size_t> sample_indices;
  std::vector<int> labels;
  std::vector<Modality> modalities;
};

class PkSampler {
 public:
  /// Throws ConfigError when the training split cannot satisfy the spec.
  PkSampler(const Dataset& dataset, PkSpec spec, std::uint64_t seed);

  Batch next_batch();
  /// ceil(training identities / P).
  std::size_t batches_per_epoch() const;
  const PkSpec& spec() const { return spec_; }

  std::string state() const { return rng_state(rng_); }
  void restore(const std::string& state) { restore_rng_state(rng_, state); }

 private:
  PkSpec spec_;
  std::vector<int> identities_;
  // per identity: colour and infrared training sample indices
  std::vector<std::array<std::vector<std::size_t>, 2>> pools_;
  Rng rng_;
};

/// Stacks the selected samples into [N, 3, H, W], optionally augmented.
Tensor stack_images(const Dataset& dataset, std::span<const std::size_t> indices,
                    const AugmentConfig* augment_config = nullptr, Rng* rng = nullptr);

/// manifest.csv (index,file,identity,modality,camera,split), dataset.json and
/// images/<index>.bin holding little-endian float64 pixels.
void export_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset import_dataset(const std::filesystem::path& dir);

}  // namespace xmreid
