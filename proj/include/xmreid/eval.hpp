#pragma once

#include "xmreid/data.hpp"
#include "xmreid/model.hpp"

#include <Eigen/Core>

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace xmreid {

using DistanceFn = std::function<double(const Eigen::Ref<const Eigen::VectorXd>&,
                                        const Eigen::Ref<const Eigen::VectorXd>&)>;

double euclidean_distance(const Eigen::Ref<const Eigen::VectorXd>& a,
                          const Eigen::Ref<const Eigen::VectorXd>& b);
/// 1 - cosine similarity.
double cosine_distance(const Eigen::Ref<const Eigen::VectorXd>& a,
                       const Eigen::Ref<const Eigen::VectorXd>& b);

struct RankList {
  int probe_identity = 0;
  std::vector<std::size_t> order;  // gallery indices, nearest first
  std::vector<bool> relevant;      // relevant[r] for the item at rank r
};

/// Stable ascending sort by distance; equal distances keep gallery order.
RankList rank_gallery(const Eigen::Ref<const Eigen::VectorXd>& probe, int probe_identity,
                      const RowMatrix& gallery, std::span<const int> gallery_identities,
                      const DistanceFn& distance = euclidean_distance);

std::vector<RankList> rank_all(const RowMatrix& probes, std::span<const int> probe_identities,
                               const RowMatrix& gallery, std::span<const int> gallery_identities,
                               const DistanceFn& distance = euclidean_distance);

/// Fraction of probes with a relevant item in the top k. Throws ProtocolError
/// for a probe with no relevant gallery item.
double cmc(std::span<const RankList> lists, std::size_t k);
std::vector<double> cmc_curve(std::span<const RankList> lists, std::size_t max_rank);

double average_precision(const RankList& list);
double mean_average_precision(std::span<const RankList> lists);

struct ProbeConfig {
  std::size_t hidden = 16;
  std::size_t iterations = 300;
  double lr = 0.1;
  double momentum = 0.9;
  double train_fraction = 0.5;
  std::uint64_t seed = 1;
};

/// Held-out accuracy of a fresh two-layer classifier predicting the modality
/// from standardised features. Throws UsageError when one modality is absent.
double domain_probe(const RowMatrix& features, std::span<const int> modality_labels,
                    const ProbeConfig& config = {});

enum class CorrelationMeasure { pearson, cosine };

std::string to_string(CorrelationMeasure measure);
CorrelationMeasure parse_correlation(const std::string& text);

/// Empty when either vector has zero variance (pearson) or zero norm (cosine).
std::optional<double> correlation(const Eigen::Ref<const Eigen::VectorXd>& a,
                                  const Eigen::Ref<const Eigen::VectorXd>& b,
                                  CorrelationMeasure measure = CorrelationMeasure::pearson);

struct LayerCorrelation {
  std::array<double, kLevels> mean{};
  std::array<std::size_t, kLevels> skipped{};
  std::size_t pairs = 0;
};

/// colour[k] and infrared[k] hold g_1..g_4 of the k-th same-identity pair.
LayerCorrelation layer_correlation(std::span<const std::array<Eigen::VectorXd, kLevels>> colour,
                                   std::span<const std::array<Eigen::VectorXd, kLevels>> infrared,
                                   CorrelationMeasure measure = CorrelationMeasure::pearson);

/// Eval-mode forward of the given samples in chunks.
BatchForward forward_samples(ReidModel& model, const Dataset& dataset,
                             std::span<const std::size_t> indices, std::size_t chunk = 64);

struct Descriptors {
  RowMatrix features;
  std::vector<int> identities;
  std::vector<int> modalities;
  std::vector<std::array<Eigen::VectorXd, kLevels>> g;
};

Descriptors describe(ReidModel& model, const Dataset& dataset, std::span<const std::size_t> indices);

/// (colour, infrared) index pairs: the k-th colour image of an identity with
/// its k-th infrared image. `test_only` restricts to query/gallery identities.
std::vector<std::pair<std::size_t, std::size_t>> cross_modal_pairs(const Dataset& dataset, bool test_only);

struct EvalOptions {
  CorrelationMeasure correlation = CorrelationMeasure::pearson;
  bool correlation_test_only = false;
  ProbeConfig probe;
  bool with_probe = true;
  bool with_correlation = true;
};

struct EvalResult {
  double rank1 = 0.0;
  double rank10 = 0.0;
  double mAP = 0.0;
  double probe_accuracy = 0.0;
  std::array<double, kLevels> layer_correlations{};
  std::array<std::size_t, kLevels> correlation_skipped{};
  std::size_t correlation_pairs = 0;
  std::size_t num_probes = 0;
  std::size_t gallery_size = 0;
  std::vector<RankList> rank_lists;
  std::vector<std::size_t> query_samples;
  std::vector<std::size_t> gallery_samples;

  /// Keys in a fixed order; equal results serialise to equal bytes.
  std::string to_json() const;
};

/// Infrared probes against the single-shot colour gallery.
EvalResult evaluate(ReidModel& model, const Dataset& dataset, const EvalOptions& options = {});

/// probe,identity,top1..top10 gallery identities,relevance flags.
void write_rank_lists_csv(const EvalResult& result, const Dataset& dataset,
                          const std::filesystem::path& path);

}  // namespace xmreid
