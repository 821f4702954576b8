#include "xmreid/eval.hpp"

#include "xmreid/errors.hpp"
#include "xmreid/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

namespace xmreid {

double euclidean_distance(const Eigen::Ref<const Eigen::VectorXd>& a,
                          const Eigen::Ref<const Eigen::VectorXd>& b) {
  return (a - b).norm();
}

double cosine_distance(const Eigen::Ref<const Eigen::VectorXd>& a,
                       const Eigen::Ref<const Eigen::VectorXd>& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 1.0;
  return 1.0 - a.dot(b) / (na * nb);
}

RankList rank_gallery(const Eigen::Ref<const Eigen::VectorXd>& probe, int probe_identity,
                      const RowMatrix& gallery, std::span<const int> gallery_identities,
                      const DistanceFn& distance) {
  const auto n = static_cast<std::size_t>(gallery.rows());
  if (gallery_identities.size() != n) throw UsageError("rank_gallery: one identity per gallery row required");
  if (gallery.cols() != probe.size()) throw DimensionError("rank_gallery: probe and gallery dimensions differ");
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) {
    d[i] = distance(probe, gallery.row(static_cast<Eigen::Index>(i)).transpose());
  }
  RankList list;
  list.probe_identity = probe_identity;
  list.order.resize(n);
  std::iota(list.order.begin(), list.order.end(), std::size_t{0});
  std::stable_sort(list.order.begin(), list.order.end(), [&](std::size_t a, std::size_t b) { return d[a] < d[b]; });
  for (std::size_t i : list.order) list.relevant.push_back(gallery_identities[i] == probe_identity);
  return list;
}

std::vector<RankList> rank_all(const RowMatrix& probes, std::span<const int> probe_identities,
                               const RowMatrix& gallery, std::span<const int> gallery_identities,
                               const DistanceFn& distance) {
  if (probe_identities.size() != static_cast<std::size_t>(probes.rows())) {
    throw UsageError("rank_all: one identity per probe row required");
  }
  std::vector<RankList> out;
  for (Eigen::Index r = 0; r < probes.rows(); ++r) {
    out.push_back(rank_gallery(probes.row(r).transpose(), probe_identities[static_cast<std::size_t>(r)],
                               gallery, gallery_identities, distance));
  }
  return out;
}

namespace {

void require_relevant(const RankList& list) {
  if (std::find(list.relevant.begin(), list.relevant.end(), true) == list.relevant.end()) {
    throw ProtocolError("probe of identity " + std::to_string(list.probe_identity) +
                        " has no relevant gallery item");
  }
}

}  // namespace

double cmc(std::span<const RankList> lists, std::size_t k) {
  if (lists.empty()) throw UsageError("cmc: no probes");
  if (k == 0) throw UsageError("cmc: k must be at least 1");
  std::size_t hits = 0;
  for (const auto& list : lists) {
    require_relevant(list);
    const std::size_t top = std::min(k, list.relevant.size());
    if (std::find(list.relevant.begin(), list.relevant.begin() + static_cast<std::ptrdiff_t>(top), true) !=
        list.relevant.begin() + static_cast<std::ptrdiff_t>(top)) {
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(lists.size());
}

std::vector<double> cmc_curve(std::span<const RankList> lists, std::size_t max_rank) {
  std::vector<double> out;
  for (std::size_t k = 1; k <= max_rank; ++k) out.push_back(cmc(lists, k));
  return out;
}

double average_precision(const RankList& list) {
  require_relevant(list);
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < list.relevant.size(); ++r) {
    if (!list.relevant[r]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  return sum / static_cast<double>(hits);
}

double mean_average_precision(std::span<const RankList> lists) {
  if (lists.empty()) throw UsageError("mean_average_precision: no probes");
  double sum = 0.0;
  for (const auto& list : lists) sum += average_precision(list);
  return sum / static_cast<double>(lists.size());
}

double domain_probe(const RowMatrix& features, std::span<const int> labels, const ProbeConfig& config) {
  const auto n = static_cast<std::size_t>(features.rows());
  if (labels.size() != n) throw UsageError("domain_probe: one label per feature row required");
  std::array<std::vector<std::size_t>, 2> by_class;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw UsageError("domain_probe: labels must be 0 or 1");
    by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  if (by_class[0].size() < 2 || by_class[1].size() < 2) {
    throw UsageError("domain_probe: both modalities need at least two samples");
  }

  // Stratified split. A row repeated under both labels stays on one side.
  std::map<std::vector<double>, std::vector<std::size_t>> by_row;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = features.row(static_cast<Eigen::Index>(i));
    by_row[std::vector<double>(row.begin(), row.end())].push_back(i);
  }
  std::vector<std::vector<std::size_t>> groups;
  for (auto& [_, members] : by_row) {
    const bool mixed = std::any_of(members.begin(), members.end(),
                                   [&](std::size_t i) { return labels[i] != labels[members[0]]; });
    if (mixed) {
      groups.push_back(std::move(members));
    } else {
      for (std::size_t i : members) groups.push_back({i});
    }
  }
  std::sort(groups.begin(), groups.end());
  Rng rng = make_rng(config.seed, 11);
  shuffle(std::span<std::vector<std::size_t>>(groups), rng);
  std::array<std::size_t, 2> target{}, taken{};
  for (std::size_t c = 0; c < 2; ++c) {
    const auto want = static_cast<std::size_t>(std::lround(config.train_fraction * double(by_class[c].size())));
    target[c] = std::clamp<std::size_t>(want, 1, by_class[c].size() - 1);
  }
  std::vector<std::size_t> train, test;
  for (const auto& g : groups) {
    std::array<std::size_t, 2> count{};
    for (std::size_t i : g) ++count[static_cast<std::size_t>(labels[i])];
    const bool fits = taken[0] + count[0] <= target[0] && taken[1] + count[1] <= target[1];
    auto& side = fits ? train : test;
    side.insert(side.end(), g.begin(), g.end());
    if (fits) {
      taken[0] += count[0];
      taken[1] += count[1];
    }
  }
  if (taken[0] == 0 || taken[1] == 0 || taken[0] == by_class[0].size() || taken[1] == by_class[1].size()) {
    throw UsageError("domain_probe: duplicate features leave no stratified split");
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  auto gather = [&](const std::vector<std::size_t>& rows) {
    RowMatrix x(static_cast<Eigen::Index>(rows.size()), features.cols());
    Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      x.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(rows[i]));
      y[static_cast<Eigen::Index>(i)] = labels[rows[i]];
    }
    return std::pair{x, y};
  };
  auto [xtr, ytr] = gather(train);
  auto [xte, yte] = gather(test);

  const Eigen::RowVectorXd mu = xtr.colwise().mean();
  Eigen::RowVectorXd sd = ((xtr.rowwise() - mu).array().square().colwise().mean()).sqrt().matrix();
  for (Eigen::Index j = 0; j < sd.size(); ++j) {
    if (sd[j] < 1e-8) sd[j] = 1.0;
  }
  auto standardise = [&](RowMatrix& x) { x = ((x.rowwise() - mu).array().rowwise() / sd.array()).matrix(); };
  standardise(xtr);
  standardise(xte);

  const auto d = features.cols(), h = static_cast<Eigen::Index>(config.hidden);
  RowMatrix w1(d, h);
  for (Eigen::Index i = 0; i < w1.size(); ++i) w1.data()[i] = std::sqrt(2.0 / double(d)) * normal(rng);
  Eigen::RowVectorXd b1 = Eigen::RowVectorXd::Zero(h);
  Eigen::VectorXd w2(h);
  for (Eigen::Index i = 0; i < h; ++i) w2[i] = std::sqrt(1.0 / double(h)) * normal(rng);
  double b2 = 0.0;
  RowMatrix vw1 = RowMatrix::Zero(d, h);
  Eigen::RowVectorXd vb1 = Eigen::RowVectorXd::Zero(h);
  Eigen::VectorXd vw2 = Eigen::VectorXd::Zero(h);
  double vb2 = 0.0;

  const double m = double(xtr.rows());
  for (std::size_t it = 0; it < config.iterations; ++it) {
    RowMatrix pre = (xtr * w1).rowwise() + b1;
    RowMatrix act = pre.cwiseMax(0.0);
    Eigen::VectorXd z = (act * w2).array() + b2;
    Eigen::VectorXd p = (1.0 / (1.0 + (-z.array()).exp())).matrix();
    Eigen::VectorXd dz = (p - ytr) / m;
    Eigen::VectorXd gw2 = act.transpose() * dz;
    const double gb2 = dz.sum();
    RowMatrix dact = dz * w2.transpose();
    RowMatrix dpre = (pre.array() > 0.0).select(dact, 0.0);
    RowMatrix gw1 = xtr.transpose() * dpre;
    Eigen::RowVectorXd gb1 = dpre.colwise().sum();
    vw1 = config.momentum * vw1 + gw1;
    vb1 = config.momentum * vb1 + gb1;
    vw2 = config.momentum * vw2 + gw2;
    vb2 = config.momentum * vb2 + gb2;
    w1 -= config.lr * vw1;
    b1 -= config.lr * vb1;
    w2 -= config.lr * vw2;
    b2 -= config.lr * vb2;
  }

  RowMatrix act = ((xte * w1).rowwise() + b1).cwiseMax(0.0);
  Eigen::VectorXd z = (act * w2).array() + b2;
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double predicted = z[i] > 0.0 ? 1.0 : 0.0;
    if (predicted == yte[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(z.size());
}

std::string to_string(CorrelationMeasure measure) {
  return measure == CorrelationMeasure::pearson ? "pearson" : "cosine";
}

CorrelationMeasure parse_correlation(const std::string& text) {
  if (text == "pearson") return CorrelationMeasure::pearson;
  if (text == "cosine") return CorrelationMeasure::cosine;
  throw ConfigError("unknown correlation measure '" + text + "' (expected pearson or cosine)");
}

std::optional<double> correlation(const Eigen::Ref<const Eigen::VectorXd>& a,
                                  const Eigen::Ref<const Eigen::VectorXd>& b, CorrelationMeasure measure) {
  if (a.size() != b.size() || a.size() == 0) throw DimensionError("correlation: vectors differ in length");
  Eigen::VectorXd x = a, y = b;
  if (measure == CorrelationMeasure::pearson) {
    x.array() -= x.mean();
    y.array() -= y.mean();
  }
  const double nx = x.norm(), ny = y.norm();
  const double floor = 1e-12 * std::max({1.0, a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff()});
  if (nx <= floor || ny <= floor) return std::nullopt;
  return std::clamp(x.dot(y) / (nx * ny), -1.0, 1.0);
}

LayerCorrelation layer_correlation(std::span<const std::array<Eigen::VectorXd, kLevels>> colour,
                                   std::span<const std::array<Eigen::VectorXd, kLevels>> infrared,
                                   CorrelationMeasure measure) {
  if (colour.size() != infrared.size()) throw UsageError("layer_correlation: pair lists differ in length");
  LayerCorrelation out;
  out.pairs = colour.size();
  for (std::size_t j = 0; j < kLevels; ++j) {
    double sum = 0.0;
    std::size_t used = 0;
    for (std::size_t k = 0; k < colour.size(); ++k) {
      if (auto r = correlation(colour[k][j], infrared[k][j], measure)) {
        sum += *r;
        ++used;
      } else {
        ++out.skipped[j];
      }
    }
    out.mean[j] = used ? sum / double(used) : 0.0;
  }
  return out;
}

BatchForward forward_samples(ReidModel& model, const Dataset& dataset, std::span<const std::size_t> indices,
                             std::size_t chunk) {
  if (indices.empty()) throw UsageError("forward_samples: no samples");
  BatchForward merged;
  const std::size_t n = indices.size();
  merged.avg_distribution.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(model.config().num_identities));
  merged.entropy.resize(static_cast<Eigen::Index>(n));
  std::array<RowMatrix, kLevels> g;
  std::vector<RowMatrix> parts(model.config().n_parts), logits(model.config().n_parts);
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    const std::size_t end = std::min(n, begin + chunk);
    auto idx = indices.subspan(begin, end - begin);
    std::vector<Modality> mods;
    for (auto i : idx) mods.push_back(dataset.samples.at(i).modality);
    BatchForward f = model.forward(stack_images(dataset, idx), mods, ForwardMode::eval);
    auto append = [&](RowMatrix& dst, const RowMatrix& src) {
      if (dst.size() == 0) dst.resize(static_cast<Eigen::Index>(n), src.cols());
      dst.middleRows(static_cast<Eigen::Index>(begin), src.rows()) = src;
    };
    for (std::size_t j = 0; j < kLevels; ++j) append(g[j], f.g[j].matrix());
    for (std::size_t i = 0; i < parts.size(); ++i) {
      append(parts[i], f.parts[i].matrix());
      append(logits[i], f.logits[i].matrix());
    }
    merged.avg_distribution.middleRows(static_cast<Eigen::Index>(begin), f.avg_distribution.rows()) = f.avg_distribution;
    merged.entropy.segment(static_cast<Eigen::Index>(begin), f.entropy.size()) = f.entropy;
    merged.modalities.insert(merged.modalities.end(), mods.begin(), mods.end());
  }
  for (std::size_t j = 0; j < kLevels; ++j) merged.g[j] = Tensor::from_matrix(g[j]);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    merged.parts.push_back(Tensor::from_matrix(parts[i]));
    merged.logits.push_back(Tensor::from_matrix(logits[i]));
  }
  return merged;
}

Descriptors describe(ReidModel& model, const Dataset& dataset, std::span<const std::size_t> indices) {
  BatchForward f = forward_samples(model, dataset, indices);
  Descriptors d;
  d.features = extract_descriptors(f);
  for (auto i : indices) {
    d.identities.push_back(dataset.samples.at(i).identity);
    d.modalities.push_back(label_of(dataset.samples.at(i).modality));
  }
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::array<Eigen::VectorXd, kLevels> g;
    for (std::size_t j = 0; j < kLevels; ++j) g[j] = f.g[j].matrix().row(static_cast<Eigen::Index>(r)).transpose();
    d.g.push_back(std::move(g));
  }
  return d;
}

std::vector<std::pair<std::size_t, std::size_t>> cross_modal_pairs(const Dataset& dataset, bool test_only) {
  std::map<int, std::array<std::vector<std::size_t>, 2>> by_id;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const auto& s = dataset.samples[i];
    if (test_only && s.split == Split::train) continue;
    by_id[s.identity][static_cast<std::size_t>(label_of(s.modality))].push_back(i);
  }
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& [id, pools] : by_id) {
    const std::size_t n = std::min(pools[0].size(), pools[1].size());
    for (std::size_t k = 0; k < n; ++k) out.emplace_back(pools[0][k], pools[1][k]);
  }
  return out;
}

std::string EvalResult::to_json() const {
  nlohmann::ordered_json j;
  j["rank1"] = rank1;
  j["rank10"] = rank10;
  j["mAP"] = mAP;
  j["probe_accuracy"] = probe_accuracy;
  j["layer_correlations"] = layer_correlations;
  j["correlation_skipped"] = correlation_skipped;
  j["correlation_pairs"] = correlation_pairs;
  j["num_probes"] = num_probes;
  j["gallery_size"] = gallery_size;
  return j.dump(2) + "\n";
}

EvalResult evaluate(ReidModel& model, const Dataset& dataset, const EvalOptions& options) {
  EvalResult r;
  r.query_samples = dataset.indices(Split::query);
  r.gallery_samples = dataset.indices(Split::gallery);
  if (r.query_samples.empty() || r.gallery_samples.empty()) {
    throw ProtocolError("dataset has no query or gallery split");
  }
  Descriptors q = describe(model, dataset, r.query_samples);
  Descriptors g = describe(model, dataset, r.gallery_samples);
  r.rank_lists = rank_all(q.features, q.identities, g.features, g.identities);
  r.rank1 = cmc(r.rank_lists, 1);
  r.rank10 = cmc(r.rank_lists, 10);
  r.mAP = mean_average_precision(r.rank_lists);
  r.num_probes = r.query_samples.size();
  r.gallery_size = r.gallery_samples.size();

  if (options.with_probe) {
    // Final descriptors of every test image, both modalities.
    std::vector<std::size_t> test = r.query_samples;
    for (auto i : dataset.indices(Split::gallery)) test.push_back(i);
    for (auto i : dataset.indices(Split::unused)) test.push_back(i);
    Descriptors t = describe(model, dataset, test);
    r.probe_accuracy = domain_probe(t.features, t.modalities, options.probe);
  }
  if (options.with_correlation) {
    auto pairs = cross_modal_pairs(dataset, options.correlation_test_only);
    std::vector<std::size_t> colour, infrared;
    for (auto [c, i] : pairs) {
      colour.push_back(c);
      infrared.push_back(i);
    }
    Descriptors dc = describe(model, dataset, colour);
    Descriptors di = describe(model, dataset, infrared);
    LayerCorrelation lc = layer_correlation(dc.g, di.g, options.correlation);
    r.layer_correlations = lc.mean;
    r.correlation_skipped = lc.skipped;
    r.correlation_pairs = lc.pairs;
  }
  return r;
}

void write_rank_lists_csv(const EvalResult& result, const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "probe,identity";
  for (int k = 1; k <= 10; ++k) out << ",top" << k;
  for (int k = 1; k <= 10; ++k) out << ",relevant" << k;
  out << '\n';
  for (std::size_t p = 0; p < result.rank_lists.size(); ++p) {
    const auto& list = result.rank_lists[p];
    out << result.query_samples.at(p) << ',' << list.probe_identity;
    const std::size_t top = std::min<std::size_t>(10, list.order.size());
    for (std::size_t k = 0; k < 10; ++k) {
      out << ',';
      if (k < top) out << dataset.samples.at(result.gallery_samples.at(list.order[k])).identity;
    }
    for (std::size_t k = 0; k < 10; ++k) {
      out << ',';
      if (k < top) out << (list.relevant[k] ? 1 : 0);
    }
    out << '\n';
  }
}

}  // namespace xmreid
