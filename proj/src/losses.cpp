#include "xmreid/losses.hpp"

#include "xmreid/ops.hpp"

#include <algorithm>
#include <map>
#include <set>

namespace xmreid {

std::string to_string(AblationMode mode) {
  switch (mode) {
    case AblationMode::baseline: return "baseline";
    case AblationMode::vanilla: return "vanilla";
    case AblationMode::shallow: return "shallow";
    case AblationMode::shallow_weighting: return "shallow+weighting";
  }
  return "unknown";
}

AblationMode parse_ablation(const std::string& text) {
  for (auto m : {AblationMode::baseline, AblationMode::vanilla, AblationMode::shallow,
                 AblationMode::shallow_weighting}) {
    if (text == to_string(m)) return m;
  }
  throw ConfigError("unknown ablation '" + text +
                    "' (expected baseline, vanilla, shallow or shallow+weighting)");
}

LossConfig LossConfig::for_ablation(AblationMode mode) {
  LossConfig c;
  switch (mode) {
    case AblationMode::baseline:
      c.adv_levels.clear();
      c.weighting_enabled = false;
      break;
    case AblationMode::vanilla:
      c.adv_levels = {4};
      c.weighting_enabled = false;
      c.vanilla_mode = true;
      break;
    case AblationMode::shallow:
      c.weighting_enabled = false;
      break;
    case AblationMode::shallow_weighting:
      break;
  }
  return c;
}

std::vector<std::string> LossConfig::adversarial_terms() const {
  std::vector<std::string> out;
  for (int j : adv_levels) out.push_back("adv_" + std::to_string(j));
  if (vanilla_mode) out.push_back("adv_f");
  return out;
}

void LossConfig::validate() const {
  if (!(triplet_margin >= 0.0)) throw ConfigError("triplet_margin must be non-negative");
  std::set<int> seen;
  for (int j : adv_levels) {
    if (j < 1 || j > kLevels) throw ConfigError("adversarial level " + std::to_string(j) + " outside 1..4");
    if (!seen.insert(j).second) throw ConfigError("adversarial level " + std::to_string(j) + " repeated");
  }
  if (vanilla_mode && adv_levels.empty()) {
    throw ConfigError("vanilla adversarial mode needs the deepest level in adv_levels");
  }
  if (vanilla_mode && weighting_enabled) {
    throw ConfigError("vanilla adversarial mode is unweighted");
  }
}

double LossReport::xent_sum() const {
  double s = 0.0;
  for (double v : xent_per_part) s += v;
  return s;
}

double LossReport::adv_sum() const {
  double s = 0.0;
  for (const auto& [name, v] : adv_per_level) s += v;
  return s;
}

double adversarial_vanilla(double d_out, int modality) {
  if (modality != 0 && modality != 1) throw UsageError("adversarial_vanilla: modality must be 0 or 1");
  const double d = std::clamp(d_out, kLogClamp, 1.0 - kLogClamp);
  return modality == 1 ? -std::log(d) : -std::log(1.0 - d);
}

Tensor cross_entropy_part(const Tensor& logits, int label) {
  if (logits.rank() != 1) throw DimensionError("cross_entropy_part: expected [C], got " + to_string(logits.shape()));
  const int labels[1] = {label};
  return cross_entropy(reshape(logits, {1, logits.dim(0)}), labels);
}

Tensor cross_entropy_part(const Tensor& logits, std::span<const int> labels) {
  return cross_entropy(logits, labels);
}

Tensor triplet_batch_hard(const Tensor& descriptors, std::span<const int> labels, double margin) {
  if (descriptors.rank() != 2) {
    throw DimensionError("triplet_batch_hard: expected [M,d], got " + to_string(descriptors.shape()));
  }
  const std::size_t m = descriptors.dim(0);
  if (labels.size() != m) throw UsageError("triplet_batch_hard: one label per descriptor row required");
  std::map<int, std::size_t> counts;
  for (int l : labels) ++counts[l];
  if (counts.size() < 2) throw UsageError("triplet_batch_hard: batch holds a single identity");
  for (const auto& [id, c] : counts) {
    if (c < 2) throw UsageError("triplet_batch_hard: identity " + std::to_string(id) + " has one sample");
  }

  Tensor dist = pairwise_distances(descriptors);
  const auto& d = dist.values();
  std::vector<std::size_t> pos_idx(m), neg_idx(m);
  for (std::size_t a = 0; a < m; ++a) {
    std::size_t best_pos = m, best_neg = m;
    for (std::size_t j = 0; j < m; ++j) {
      if (j == a) continue;
      const double v = d[a * m + j];
      if (labels[j] == labels[a]) {
        if (best_pos == m || v > d[a * m + best_pos]) best_pos = j;
      } else if (best_neg == m || v < d[a * m + best_neg]) {
        best_neg = j;
      }
    }
    pos_idx[a] = a * m + best_pos;
    neg_idx[a] = a * m + best_neg;
  }
  Tensor hinge = relu(add_scalar(sub(take(dist, pos_idx), take(dist, neg_idx)), margin));
  return mean(hinge);
}

Tensor weighted_domain_loss(const Tensor& probabilities, std::span<const Modality> modalities,
                            const Eigen::VectorXd& weights) {
  const std::size_t n = modalities.size();
  if (probabilities.rank() != 2 || probabilities.dim(0) != n || probabilities.dim(1) != 1) {
    throw UsageError("weighted_domain_loss: expected probabilities [" + std::to_string(n) + ",1], got " +
                     to_string(probabilities.shape()));
  }
  if (static_cast<std::size_t>(weights.size()) != n) {
    throw UsageError("weighted_domain_loss: one weight per sample required");
  }
  std::vector<double> infrared(n), colour(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double w = weights[static_cast<Eigen::Index>(k)];
    const bool ir = modalities[k] == Modality::infrared;
    infrared[k] = ir ? -w : 0.0;
    colour[k] = ir ? 0.0 : -w;
  }
  Tensor log_d = log_clamped(probabilities);
  Tensor log_not_d = log_clamped(add_scalar(scale(probabilities, -1.0), 1.0));
  Tensor a = sum(mul(Tensor({n, 1}, std::move(infrared), false), log_d));
  Tensor b = sum(mul(Tensor({n, 1}, std::move(colour), false), log_not_d));
  return add(a, b);
}

Eigen::VectorXd adversarial_weights(const BatchForward& forward, const LossConfig& config) {
  const auto m = static_cast<Eigen::Index>(forward.batch_size());
  if (m == 0) throw UsageError("adversarial_weights: empty batch");
  if (config.weighting_enabled) return batch_weights(forward.entropy);
  return Eigen::VectorXd::Constant(m, 1.0 / static_cast<double>(m));
}

AdversarialLoss adversarial_weighted(const BatchForward& forward, DomainClassifierBank& bank,
                                     const Eigen::VectorXd& weights, const LossConfig& config) {
  AdversarialLoss out;
  for (int j : config.adv_levels) {
    Tensor p = bank.discriminate(forward.g[static_cast<std::size_t>(j - 1)], j);
    out.per_level.emplace_back("adv_" + std::to_string(j),
                               weighted_domain_loss(p, forward.modalities, weights));
  }
  if (config.vanilla_mode) {
    Tensor p = bank.discriminate_descriptor(forward.raw_descriptor());
    out.per_level.emplace_back("adv_f", weighted_domain_loss(p, forward.modalities, weights));
  }
  for (const auto& [name, t] : out.per_level) out.total = out.total.defined() ? add(out.total, t) : t;
  if (!out.total.defined()) out.total = Tensor::scalar(0.0);
  return out;
}

Objective total_objective(const BatchForward& forward, std::span<const int> labels,
                          DomainClassifierBank& bank, const LossConfig& config) {
  config.validate();
  Objective out;
  Tensor total;
  for (const auto& logits : forward.logits) {
    Tensor x = cross_entropy_part(logits, labels);
    out.report.xent_per_part.push_back(x.item());
    total = total.defined() ? add(total, x) : x;
  }
  Tensor tri = triplet_batch_hard(forward.raw_descriptor(), labels, config.triplet_margin);
  out.report.triplet = tri.item();
  total = total.defined() ? add(total, tri) : tri;

  out.report.weights = adversarial_weights(forward, config);
  if (config.adversarial_active()) {
    AdversarialLoss adv = adversarial_weighted(forward, bank, out.report.weights, config);
    for (const auto& [name, t] : adv.per_level) out.report.adv_per_level.emplace_back(name, t.item());
    total = sub(total, adv.total);
  }
  out.report.total = total.item();
  out.total = total;
  return out;
}

}  // namespace xmreid
