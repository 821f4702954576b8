#pragma once

#include "xmreid/errors.hpp"
#include "xmreid/model.hpp"
#include "xmreid/tensor.hpp"

#include <Eigen/Core>

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace xmreid {

/// The four training configurations compared in the ablation table.
enum class AblationMode { baseline, vanilla, shallow, shallow_weighting };

std::string to_string(AblationMode mode);
/// Accepts baseline | vanilla | shallow | shallow+weighting.
AblationMode parse_ablation(const std::string& text);

struct LossConfig {
  double triplet_margin = 0.3;
  /// Backbone levels (1..4) that carry an adversarial term.
  std::vector<int> adv_levels{1, 2, 3, 4};
  bool weighting_enabled = true;
  /// Unweighted adversarial loss on the concatenated descriptor and g_4 only.
  bool vanilla_mode = false;

  static LossConfig for_ablation(AblationMode mode);
  bool adversarial_active() const { return vanilla_mode || !adv_levels.empty(); }
  /// Names of the active adversarial terms in reporting order (adv_1.., adv_f).
  std::vector<std::string> adversarial_terms() const;
  void validate() const;
};

struct LossReport {
  std::vector<double> xent_per_part;
  double triplet = 0.0;
  std::vector<std::pair<std::string, double>> adv_per_level;
  Eigen::VectorXd weights;
  double total = 0.0;

  double xent_sum() const;
  double adv_sum() const;
  /// sum(xent) + triplet - sum(adv), recomputed from the parts.
  double recomputed_total() const { return xent_sum() + triplet - adv_sum(); }
};

/// Shannon entropy (natural log) with 0 log 0 = 0. Throws UsageError unless
/// p is non-negative and sums to 1 within 1e-6.
template <typename Derived>
double entropy(const Eigen::MatrixBase<Derived>& p);

/// w_k = (1 + exp(-H_k)) / sum_k' (1 + exp(-H_k')).
template <typename Derived>
Eigen::VectorXd batch_weights(const Eigen::MatrixBase<Derived>& entropies) {
  Eigen::VectorXd w = (1.0 + (-entropies.array()).exp()).matrix();
  return w / w.sum();
}

/// -m log D - (1 - m) log(1 - D), D clamped to [1e-7, 1 - 1e-7].
double adversarial_vanilla(double d_out, int modality);

/// -log softmax(logits)[label] for one part; logits is [C].
Tensor cross_entropy_part(const Tensor& logits, int label);
/// Batch mean of the per-sample part cross-entropy; logits is [N, C].
Tensor cross_entropy_part(const Tensor& logits, std::span<const int> labels);

/// Mean over anchors of max(0, hardest positive - hardest negative + margin)
/// using Euclidean distances between rows of `descriptors`. Every identity
/// needs at least two rows and at least two identities must be present.
Tensor triplet_batch_hard(const Tensor& descriptors, std::span<const int> labels, double margin);

/// -sum_k w_k (m_k log D_k + (1 - m_k) log(1 - D_k)) for probabilities [N, 1].
Tensor weighted_domain_loss(const Tensor& probabilities, std::span<const Modality> modalities,
                            const Eigen::VectorXd& weights);

struct AdversarialLoss {
  Tensor total;
  std::vector<std::pair<std::string, Tensor>> per_level;
};

/// Sum over active levels of weighted_domain_loss on each level's features.
AdversarialLoss adversarial_weighted(const BatchForward& forward, DomainClassifierBank& bank,
                                     const Eigen::VectorXd& weights, const LossConfig& config);

/// Entropy weights when weighting is enabled, uniform 1/M otherwise.
Eigen::VectorXd adversarial_weights(const BatchForward& forward, const LossConfig& config);

struct Objective {
  Tensor total;
  LossReport report;
};

/// sum_i xent(f_i) + triplet - adversarial.
Objective total_objective(const BatchForward& forward, std::span<const int> labels,
                          DomainClassifierBank& bank, const LossConfig& config);

// ---------------------------------------------------------------------------

template <typename Derived>
double entropy(const Eigen::MatrixBase<Derived>& p) {
  if (p.size() == 0) throw UsageError("entropy: empty distribution");
  if ((p.array() < 0.0).any() || !p.allFinite() || std::abs(p.sum() - 1.0) > 1e-6) {
    throw UsageError("entropy: argument is not a probability distribution");
  }
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double v = p(i);
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

}  // namespace xmreid
