#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fixtures.hpp"
#include "oracles.hpp"

#include "xmreid/errors.hpp"
#include "xmreid/eval.hpp"
#include "xmreid/rng.hpp"

#include <numeric>

using namespace xmreid;
using doctest::Approx;

namespace {

RankList pattern(std::vector<bool> relevant) {
  RankList l;
  l.relevant = relevant;
  l.order.resize(relevant.size());
  std::iota(l.order.begin(), l.order.end(), std::size_t{0});
  return l;
}

RowMatrix to_matrix(const oracle::Rows& rows) {
  RowMatrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return m;
}

struct Instance {
  oracle::Rows probes, gallery;
  std::vector<int> probe_ids, gallery_ids;
};

// Every probe identity appears in the gallery at least once.
Instance random_instance(Rng& rng) {
  Instance in;
  const std::size_t dim = 1 + uniform_index(rng, 6);
  const std::size_t n_ids = 1 + uniform_index(rng, 8);
  const std::size_t n_gallery = n_ids + uniform_index(rng, 50 - n_ids + 1);
  const std::size_t n_probes = 1 + uniform_index(rng, 20);
  auto vec = [&] {
    std::vector<double> v(dim);
    for (auto& x : v) x = normal(rng);
    return v;
  };
  for (std::size_t j = 0; j < n_gallery; ++j) {
    in.gallery.push_back(vec());
    in.gallery_ids.push_back(j < n_ids ? static_cast<int>(j) : static_cast<int>(uniform_index(rng, n_ids)));
  }
  for (std::size_t q = 0; q < n_probes; ++q) {
    in.probes.push_back(vec());
    in.probe_ids.push_back(static_cast<int>(uniform_index(rng, n_ids)));
  }
  return in;
}

}  // namespace

TEST_CASE("average precision examples") {
  CHECK(average_precision(pattern({true, false, true})) == Approx(5.0 / 6.0).epsilon(1e-15));
  CHECK(average_precision(pattern({true, true, false, false})) == 1.0);
  for (std::size_t r = 1; r <= 10; ++r) {
    std::vector<bool> rel(10, false);
    rel[r - 1] = true;
    CHECK(average_precision(pattern(rel)) == Approx(1.0 / static_cast<double>(r)).epsilon(1e-15));
  }
  std::vector<RankList> perfect{pattern({true, true, false}), pattern({true, false, false})};
  CHECK(mean_average_precision(perfect) == 1.0);
  CHECK(cmc(perfect, 1) == 1.0);
}

TEST_CASE("cmc examples") {
  std::vector<bool> rel(12, false);
  rel[2] = true;
  std::vector<RankList> one{pattern(rel)};
  CHECK(cmc(one, 1) == 0.0);
  CHECK(cmc(one, 2) == 0.0);
  CHECK(cmc(one, 3) == 1.0);
  CHECK(cmc(one, 10) == 1.0);
}

TEST_CASE("a probe with no relevant item is a protocol error") {
  std::vector<RankList> lists{pattern({true, false}), pattern({false, false})};
  CHECK_THROWS_AS(cmc(lists, 1), ProtocolError);
  CHECK_THROWS_AS(mean_average_precision(lists), ProtocolError);
  CHECK_THROWS_AS(average_precision(lists[1]), ProtocolError);

  RowMatrix g = RowMatrix::Zero(2, 3);
  std::vector<int> gids{1, 2};
  RowMatrix q = RowMatrix::Ones(1, 3);
  std::vector<int> qids{7};
  CHECK_THROWS_AS(cmc(rank_all(q, qids, g, gids), 1), ProtocolError);
}

TEST_CASE("metrics agree with the brute-force oracle") {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    Instance in = random_instance(rng);
    auto lists = rank_all(to_matrix(in.probes), in.probe_ids, to_matrix(in.gallery), in.gallery_ids);
    const std::size_t max_rank = in.gallery.size();
    oracle::Metrics expected = oracle::retrieval(in.probes, in.probe_ids, in.gallery, in.gallery_ids, max_rank);
    auto curve = cmc_curve(lists, max_rank);
    for (std::size_t k = 1; k <= max_rank; ++k) {
      CHECK(std::abs(curve[k - 1] - expected.cmc[k - 1]) <= 1e-12);
      CHECK(cmc(lists, k) == curve[k - 1]);
      if (k > 1) CHECK(curve[k - 1] >= curve[k - 2]);
    }
    CHECK(std::abs(mean_average_precision(lists) - expected.mAP) <= 1e-12);
  }
}

TEST_CASE("ties are broken by gallery index") {
  RowMatrix g = RowMatrix::Zero(4, 2);
  std::vector<int> gids{3, 1, 2, 1};
  Eigen::VectorXd q = Eigen::VectorXd::Ones(2);
  RankList l = rank_gallery(q, 1, g, gids);
  CHECK(l.order == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK(l.relevant == std::vector<bool>{false, true, false, true});
}

TEST_CASE("rank lists are gallery permutations") {
  Rng rng(7);
  Instance in = random_instance(rng);
  for (const auto& l : rank_all(to_matrix(in.probes), in.probe_ids, to_matrix(in.gallery), in.gallery_ids)) {
    std::vector<std::size_t> sorted = l.order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
  }
}

TEST_CASE("permuting the gallery leaves the metrics unchanged") {
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    Instance in = random_instance(rng);
    std::vector<std::size_t> perm(in.gallery.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    shuffle(std::span<std::size_t>(perm), rng);
    oracle::Rows g2;
    std::vector<int> ids2;
    for (std::size_t i : perm) {
      g2.push_back(in.gallery[i]);
      ids2.push_back(in.gallery_ids[i]);
    }
    auto a = rank_all(to_matrix(in.probes), in.probe_ids, to_matrix(in.gallery), in.gallery_ids);
    auto b = rank_all(to_matrix(in.probes), in.probe_ids, to_matrix(g2), ids2);
    CHECK(mean_average_precision(a) == Approx(mean_average_precision(b)).epsilon(1e-14));
    CHECK(cmc_curve(a, in.gallery.size()) == cmc_curve(b, in.gallery.size()));
  }
}

TEST_CASE("distances are symmetric and vanish on the diagonal") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::VectorXd a(16), b(16);
    for (int i = 0; i < 16; ++i) {
      a[i] = normal(rng);
      b[i] = normal(rng);
    }
    for (const DistanceFn& d : {DistanceFn(euclidean_distance), DistanceFn(cosine_distance)}) {
      CHECK(d(a, a) == Approx(0.0).epsilon(1e-12).scale(1.0));
      CHECK(d(a, b) == d(b, a));
      CHECK(d(a, b) >= 0.0);
    }
    CHECK(euclidean_distance(a, b) == Approx((a - b).norm()).epsilon(1e-14));
  }
}

TEST_CASE("domain probe on indistinguishable features") {
  Rng rng(5);
  RowMatrix f(200, 8);
  std::vector<int> labels(200);
  for (Eigen::Index i = 0; i < 100; ++i) {
    for (Eigen::Index j = 0; j < 8; ++j) f(i, j) = f(i + 100, j) = normal(rng);
    labels[static_cast<std::size_t>(i)] = 0;
    labels[static_cast<std::size_t>(i + 100)] = 1;
  }
  CHECK(domain_probe(f, labels) == Approx(0.5).epsilon(0.05 / 0.5));
}

TEST_CASE("domain probe on label features") {
  RowMatrix f(120, 4);
  std::vector<int> labels(120);
  for (Eigen::Index i = 0; i < 120; ++i) {
    labels[static_cast<std::size_t>(i)] = static_cast<int>(i % 2);
    f.row(i).setConstant(static_cast<double>(i % 2));
  }
  CHECK(domain_probe(f, labels) >= 0.99);
}

TEST_CASE("domain probe on random features is near chance") {
  double mean = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    RowMatrix f(200, 16);
    std::vector<int> labels(200);
    for (Eigen::Index i = 0; i < 200; ++i) {
      for (Eigen::Index j = 0; j < 16; ++j) f(i, j) = normal(rng);
      labels[static_cast<std::size_t>(i)] = bernoulli(rng, 0.5) ? 1 : 0;
    }
    ProbeConfig c;
    c.seed = seed;
    mean += domain_probe(f, labels, c) / 5.0;
  }
  CHECK(mean >= 0.4);
  CHECK(mean <= 0.6);
}

TEST_CASE("domain probe rejects a single modality") {
  RowMatrix f = RowMatrix::Ones(10, 3);
  std::vector<int> labels(10, 1);
  CHECK_THROWS_AS(domain_probe(f, labels), UsageError);
}

TEST_CASE("correlation examples") {
  Rng rng(11);
  Eigen::VectorXd g(32);
  for (int i = 0; i < 32; ++i) g[i] = normal(rng);
  for (auto m : {CorrelationMeasure::pearson, CorrelationMeasure::cosine}) {
    CHECK(*correlation(g, g, m) == Approx(1.0).epsilon(1e-12));
    CHECK(*correlation(g, -g, m) == Approx(-1.0).epsilon(1e-12));
  }
  CHECK_FALSE(correlation(Eigen::VectorXd::Constant(8, 2.0), g.head(8)).has_value());
  CHECK_FALSE(correlation(Eigen::VectorXd::Zero(8), g.head(8), CorrelationMeasure::cosine).has_value());
  CHECK(parse_correlation("cosine") == CorrelationMeasure::cosine);
  CHECK_THROWS_AS(parse_correlation("spearman"), ConfigError);
}

TEST_CASE("layer correlation of independent vectors is near zero") {
  Rng rng(17);
  std::vector<std::array<Eigen::VectorXd, kLevels>> a(200), b(200);
  for (std::size_t k = 0; k < 200; ++k) {
    for (std::size_t j = 0; j < kLevels; ++j) {
      a[k][j].resize(128);
      b[k][j].resize(128);
      for (int i = 0; i < 128; ++i) {
        a[k][j][i] = normal(rng);
        b[k][j][i] = normal(rng);
      }
    }
  }
  LayerCorrelation c = layer_correlation(a, b);
  CHECK(c.pairs == 200);
  for (double v : c.mean) CHECK(std::abs(v) < 0.1);

  // anti-correlated pairs and a skipped zero-variance pair
  for (std::size_t k = 0; k < 200; ++k)
    for (std::size_t j = 0; j < kLevels; ++j) b[k][j] = -a[k][j];
  a[0][2].setConstant(1.0);
  b[0][2].setConstant(-1.0);
  c = layer_correlation(a, b);
  for (double v : c.mean) CHECK(v == Approx(-1.0).epsilon(1e-12));
  CHECK(c.skipped[2] == 1);
  CHECK(c.skipped[0] == 0);
}

TEST_CASE("identical inputs through mirrored streams correlate fully") {
  const Dataset ds = generate_dataset(fixture::tiny_data(4));
  ReidModel m(fixture::tiny_model(ds.num_classes), 4);
  std::vector<std::size_t> idx{0, 1, 2};
  Tensor one = stack_images(ds, idx);
  Tensor both = concat(std::vector<Tensor>{one, one}, 0);
  std::vector<Modality> mods{Modality::colour, Modality::colour, Modality::colour,
                             Modality::infrared, Modality::infrared, Modality::infrared};
  BatchForward f = m.forward(both, mods, ForwardMode::eval);
  std::vector<std::array<Eigen::VectorXd, kLevels>> a(3), b(3);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t j = 0; j < kLevels; ++j) {
      a[k][j] = f.g[j].matrix().row(static_cast<Eigen::Index>(k)).transpose();
      b[k][j] = f.g[j].matrix().row(static_cast<Eigen::Index>(k + 3)).transpose();
    }
  LayerCorrelation c = layer_correlation(a, b);
  for (double v : c.mean) CHECK(v == Approx(1.0).epsilon(1e-12));
}

TEST_CASE("evaluation of a model") {
  const Dataset ds = generate_dataset(fixture::tiny_data(6));
  ReidModel m(fixture::tiny_model(ds.num_classes), 6);
  EvalResult r = evaluate(m, ds);
  CHECK(r.num_probes == ds.indices(Split::query).size());
  CHECK(r.gallery_size == ds.indices(Split::gallery).size());
  CHECK(r.rank1 <= r.rank10);
  CHECK(r.rank1 >= 0.0);
  CHECK(r.mAP <= 1.0);
  CHECK(r.probe_accuracy >= 0.0);
  CHECK(r.correlation_pairs > 0);
  for (double v : r.layer_correlations) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  CHECK(evaluate(m, ds).to_json() == r.to_json());
  CHECK(r.to_json().find("\"rank1\"") != std::string::npos);
}
