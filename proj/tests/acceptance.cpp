// Acceptance gate. Prints one PASS/FAIL line per criterion; exits nonzero if
// a criterion fails that is not listed in --allow-fail. Pass criterion numbers
// as arguments to run a subset.

#include "oracles.hpp"

#include <CLI11.hpp>

#include "xmreid/checkpoint.hpp"
#include "xmreid/data.hpp"
#include "xmreid/eval.hpp"
#include "xmreid/gradcheck.hpp"
#include "xmreid/losses.hpp"
#include "xmreid/model.hpp"
#include "xmreid/rng.hpp"
#include "xmreid/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace xmreid;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

constexpr std::uint64_t kSeeds = 5;

// Reduced model and image size so the five-seed ablation fits the time budget.
DatasetConfig profile_data(std::uint64_t seed) {
  DatasetConfig c;
  c.identities = 40;
  c.per_identity = 8;
  c.seed = seed;
  c.height = 48;
  c.width = 24;
  return c;
}

BackboneConfig profile_model(std::size_t classes, std::size_t parts = 3) {
  BackboneConfig c;
  c.stage_channels = {8, 16, 32, 64};
  c.input_height = 48;
  c.input_width = 24;
  c.units_per_stage = 2;
  c.n_parts = parts;
  c.part_dim = 32;
  c.num_identities = classes;
  return c;
}

TrainConfig profile_train(std::uint64_t seed, AblationMode mode) {
  TrainConfig c;
  c.seed = seed;
  c.ablation = mode;
  return c;
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  auto reports = GradCheckSuite::builtin().run(100, 1, 1e-5);
  const double elapsed = seconds_since(t0);
  bool ok = !reports.empty();
  double worst = 0.0;
  std::size_t min_cases = reports.empty() ? 0 : reports.front().cases;
  std::string failed;
  for (const auto& r : reports) {
    ok = ok && r.passed && r.cases >= 100;
    worst = std::max(worst, r.worst_relative_error);
    min_cases = std::min(min_cases, r.cases);
    if (!r.passed) failed += " " + r.op;
  }
  ok = ok && elapsed < 120.0;
  return {ok, fmt("%zu ops, >= %zu cases each, worst rel err %.2e, %.1f s%s", reports.size(), min_cases, worst,
                  elapsed, failed.empty() ? "" : (", failed:" + failed).c_str())};
}

Outcome loss_oracles() {
  std::vector<std::string> bad;
  auto expect = [&](const std::string& what, double got, double want, double tol) {
    if (!(std::abs(got - want) <= tol)) bad.push_back(what + fmt(" (%.12g vs %.12g)", got, want));
  };
  const double ln2 = std::numbers::ln2;

  Eigen::VectorXd uniform10 = Eigen::VectorXd::Constant(10, 0.1);
  expect("entropy uniform", entropy(uniform10), std::log(10.0), 1e-9);
  Eigen::VectorXd onehot = Eigen::VectorXd::Zero(10);
  onehot[3] = 1.0;
  expect("entropy one-hot", entropy(onehot), 0.0, 1e-9);
  Eigen::VectorXd half = Eigen::VectorXd::Zero(10);
  half[0] = half[1] = 0.5;
  expect("entropy two-point", entropy(half), ln2, 1e-9);

  Eigen::Vector4d h(0.0, 20.0, 20.0, 20.0);
  Eigen::VectorXd w = batch_weights(h);
  const double e20 = std::exp(-20.0);
  expect("weights w1", w[0], 2.0 / (2.0 + 3.0 * (1.0 + e20)), 1e-9);
  expect("weights w2", w[1], (1.0 + e20) / (2.0 + 3.0 * (1.0 + e20)), 1e-9);
  expect("weights M=1", batch_weights(Eigen::VectorXd::Constant(1, 0.7))[0], 1.0, 1e-9);

  expect("vanilla m=1", adversarial_vanilla(0.5, 1), ln2, 1e-9);
  expect("vanilla m=0", adversarial_vanilla(0.5, 0), ln2, 1e-9);
  expect("vanilla confident", adversarial_vanilla(1.0 - 1e-7, 1), -std::log(1.0 - 1e-7), 1e-9);

  Tensor d({2, 1}, {0.8, 0.3});
  std::vector<Modality> mods{Modality::infrared, Modality::colour};
  expect("weighted hand", weighted_domain_loss(d, mods, Eigen::Vector2d(0.6, 0.4)).item(),
         0.6 * -std::log(0.8) + 0.4 * -std::log(0.7), 1e-9);
  {
    Tensor half_d({6, 1}, std::vector<double>(6, 0.5));
    std::vector<Modality> m6{Modality::colour,   Modality::infrared, Modality::colour,
                             Modality::infrared, Modality::colour,   Modality::infrared};
    Eigen::VectorXd u = Eigen::VectorXd::Constant(6, 1.0 / 6.0);
    double four = 0.0;
    for (int level = 0; level < 4; ++level) four += weighted_domain_loss(half_d, m6, u).item();
    expect("weighted 4 ln 2", four, 4.0 * ln2, 1e-9);
    expect("weighted uniform entropies", weighted_domain_loss(half_d, m6, batch_weights(Eigen::VectorXd::Constant(6, 1.3))).item(),
           weighted_domain_loss(half_d, m6, u).item(), 1e-12);
  }

  expect("xent uniform", cross_entropy_part(Tensor({2}, {0.0, 0.0}), 0).item(), ln2, 1e-9);
  expect("xent confident", cross_entropy_part(Tensor({2}, {10.0, -10.0}), 0).item(), std::log1p(std::exp(-20.0)), 1e-9);
  expect("xent ln 3", cross_entropy_part(Tensor({2}, {0.0, std::log(3.0)}), 0).item(), std::log(4.0), 1e-9);

  std::vector<int> ab{0, 0, 1, 1};
  expect("triplet satisfied", triplet_batch_hard(Tensor({4, 1}, {0.0, 1.0, 10.0, 11.0}), ab, 0.3).item(), 0.0, 1e-9);
  expect("triplet hand", triplet_batch_hard(Tensor({4, 1}, {0.0, 5.0, 4.0, 9.0}), ab, 0.3).item(), 2.8, 1e-9);

  Rng rng(314);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t p = 2 + uniform_index(rng, 4), k = 2 + uniform_index(rng, 3), dim = 1 + uniform_index(rng, 8);
    std::vector<int> ids;
    oracle::Rows rows(p * k, std::vector<double>(dim));
    std::vector<double> flat;
    for (std::size_t r = 0; r < p * k; ++r) {
      ids.push_back(static_cast<int>(r / k));
      for (auto& v : rows[r]) {
        v = normal(rng);
        flat.push_back(v);
      }
    }
    const double margin = uniform(rng, 0.0, 2.0);
    const double got = triplet_batch_hard(Tensor({p * k, dim}, flat), ids, margin).item();
    worst = std::max(worst, std::abs(got - oracle::triplet(rows, ids, margin)));
  }
  if (!(worst <= 1e-12)) bad.push_back(fmt("triplet brute force (%.3e)", worst));

  std::string detail = fmt("examples within 1e-9, 100 random triplet batches max diff %.2e", worst);
  for (const auto& b : bad) detail += "; mismatch " + b;
  return {bad.empty(), detail};
}

Outcome metric_oracles() {
  Rng rng(2718);
  double worst = 0.0;
  bool monotone = true;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t dim = 1 + uniform_index(rng, 6), n_ids = 1 + uniform_index(rng, 8);
    const std::size_t n_gallery = n_ids + uniform_index(rng, 50 - n_ids + 1), n_probes = 1 + uniform_index(rng, 20);
    oracle::Rows probes(n_probes, std::vector<double>(dim)), gallery(n_gallery, std::vector<double>(dim));
    std::vector<int> pids, gids;
    RowMatrix pm(static_cast<Eigen::Index>(n_probes), static_cast<Eigen::Index>(dim));
    RowMatrix gm(static_cast<Eigen::Index>(n_gallery), static_cast<Eigen::Index>(dim));
    for (std::size_t j = 0; j < n_gallery; ++j) {
      gids.push_back(j < n_ids ? static_cast<int>(j) : static_cast<int>(uniform_index(rng, n_ids)));
      for (std::size_t c = 0; c < dim; ++c) gm(Eigen::Index(j), Eigen::Index(c)) = gallery[j][c] = normal(rng);
    }
    for (std::size_t q = 0; q < n_probes; ++q) {
      pids.push_back(static_cast<int>(uniform_index(rng, n_ids)));
      for (std::size_t c = 0; c < dim; ++c) pm(Eigen::Index(q), Eigen::Index(c)) = probes[q][c] = normal(rng);
    }
    auto lists = rank_all(pm, pids, gm, gids);
    auto curve = cmc_curve(lists, n_gallery);
    auto expected = oracle::retrieval(probes, pids, gallery, gids, n_gallery);
    for (std::size_t k = 0; k < n_gallery; ++k) {
      worst = std::max(worst, std::abs(curve[k] - expected.cmc[k]));
      if (k > 0 && curve[k] < curve[k - 1]) monotone = false;
    }
    worst = std::max(worst, std::abs(mean_average_precision(lists) - expected.mAP));
  }
  return {worst <= 1e-12 && monotone, fmt("100 random instances, max |diff| %.2e, cmc monotone %s", worst,
                                         monotone ? "yes" : "no")};
}

Outcome weight_properties() {
  Rng rng(42);
  double worst_sum = 0.0, worst_uniform = 0.0;
  bool antitone = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t m = 1 + uniform_index(rng, 64);
    Eigen::VectorXd h(static_cast<Eigen::Index>(m));
    for (Eigen::Index i = 0; i < h.size(); ++i) h[i] = uniform(rng, 0.0, std::log(40.0));
    Eigen::VectorXd w = batch_weights(h);
    worst_sum = std::max(worst_sum, std::abs(w.sum() - 1.0));
    for (Eigen::Index i = 0; i < h.size(); ++i)
      for (Eigen::Index j = 0; j < h.size(); ++j)
        if (h[i] < h[j] && !(w[i] > w[j])) antitone = false;
    Eigen::VectorXd u = batch_weights(Eigen::VectorXd::Constant(h.size(), h[0]));
    worst_uniform = std::max(worst_uniform, (u.array() - 1.0 / double(m)).abs().maxCoeff());
  }
  return {worst_sum <= 1e-9 && antitone && worst_uniform <= 1e-12,
          fmt("1000 batches: max |sum-1| %.2e, strictly antitone %s, uniform max |w-1/M| %.2e", worst_sum,
              antitone ? "yes" : "no", worst_uniform)};
}

Outcome minmax_wiring() {
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t holds = 0;
  std::string trace;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    const Dataset ds = generate_dataset(profile_data(seed));
    ReidModel m(profile_model(ds.num_classes), seed);
    TrainConfig c = profile_train(seed, AblationMode::shallow_weighting);
    c.pk = {4, 4};
    c.augment = false;
    MinMaxTrace t = minmax_probe(m, ds, c, 100, 30);
    holds += t.holds();
    trace += fmt(" %.3f>%.3f>%.3f", t.initial, t.after_discriminator, t.after_extractor);
  }
  const double elapsed = seconds_since(t0);
  return {holds >= 4 && elapsed < 180.0,
          fmt("holds in %zu/5 seeds (acc init>after D>after E:%s), %.1f s", holds, trace.c_str(), elapsed)};
}

// Shared by criteria 6, 7 and 8.
struct AblationRuns {
  std::map<AblationMode, std::vector<EvalResult>> results;
  std::vector<EvalResult> single_part;
  double seconds = 0.0;
};

AblationRuns& ablation_runs() {
  static AblationRuns runs = [] {
    AblationRuns r;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
      const Dataset ds = generate_dataset(profile_data(seed));
      for (auto mode : {AblationMode::baseline, AblationMode::vanilla, AblationMode::shallow,
                        AblationMode::shallow_weighting}) {
        ReidModel m(profile_model(ds.num_classes), seed);
        Trainer t(m, ds, profile_train(seed, mode));
        r.results[mode].push_back(*t.run().final_eval);
        const auto& e = r.results[mode].back();
        std::printf("  seed %llu %-17s rank1 %.3f mAP %.3f probe %.3f corr %.3f %.3f %.3f %.3f\n",
                    static_cast<unsigned long long>(seed), to_string(mode).c_str(), e.rank1, e.mAP,
                    e.probe_accuracy, e.layer_correlations[0], e.layer_correlations[1],
                    e.layer_correlations[2], e.layer_correlations[3]);
        std::fflush(stdout);
      }
    }
    r.seconds = seconds_since(t0);
    return r;
  }();
  return runs;
}

double mean_rank1(const std::vector<EvalResult>& rs) {
  double s = 0.0;
  for (const auto& r : rs) s += r.rank1;
  return s / double(rs.size());
}

Outcome ablation_trend() {
  auto& runs = ablation_runs();
  const double base = mean_rank1(runs.results[AblationMode::baseline]);
  const double van = mean_rank1(runs.results[AblationMode::vanilla]);
  const double sh = mean_rank1(runs.results[AblationMode::shallow]);
  const double sw = mean_rank1(runs.results[AblationMode::shallow_weighting]);
  std::size_t lower_probe = 0;
  for (std::size_t i = 0; i < kSeeds; ++i) {
    lower_probe += runs.results[AblationMode::shallow_weighting][i].probe_accuracy <
                   runs.results[AblationMode::baseline][i].probe_accuracy;
  }
  const bool ok = sw >= base && sh >= van && lower_probe >= 3 && runs.seconds < 1800.0;
  return {ok, fmt("mean rank1 baseline %.3f vanilla %.3f shallow %.3f shallow+weighting %.3f; probe lower in %zu/5; "
                  "%.0f s",
                  base, van, sh, sw, lower_probe, runs.seconds)};
}

Outcome correlation_depth() {
  auto& runs = ablation_runs();
  std::size_t decreasing = 0, min_pairs = std::numeric_limits<std::size_t>::max();
  std::string values;
  for (const auto& r : runs.results[AblationMode::baseline]) {
    min_pairs = std::min(min_pairs, r.correlation_pairs);
    decreasing += r.layer_correlations[0] > r.layer_correlations[3];
    values += fmt(" %.3f/%.3f", r.layer_correlations[0], r.layer_correlations[3]);
  }
  return {decreasing >= 4 && min_pairs >= 200,
          fmt("corr(g1) > corr(g4) in %zu/5 seeds (g1/g4:%s), >= %zu pairs", decreasing, values.c_str(), min_pairs)};
}

Outcome partition_sweep() {
  auto& runs = ablation_runs();
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t better = 0;
  std::string values;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    const Dataset ds = generate_dataset(profile_data(seed));
    ReidModel m(profile_model(ds.num_classes, 1), seed);
    EvalResult one = *Trainer(m, ds, profile_train(seed, AblationMode::baseline)).run().final_eval;
    const EvalResult& three = runs.results[AblationMode::baseline][seed - 1];
    better += three.rank1 > one.rank1;
    values += fmt(" %.3f/%.3f", one.rank1, three.rank1);
  }
  return {better >= 3, fmt("rank1(3) > rank1(1) in %zu/5 seeds (n=1/n=3:%s), %.0f s", better, values.c_str(),
                           seconds_since(t0))};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "xmreid_acceptance_determinism";
  fs::remove_all(root);
  std::vector<std::string> differs;
  std::array<std::map<std::string, std::string>, 2> artefacts;
  for (int run = 0; run < 2; ++run) {
    const fs::path dir = root / std::to_string(run);
    fs::create_directories(dir);
    DatasetConfig dc = profile_data(7);
    dc.identities = 16;
    dc.per_identity = 4;
    Dataset generated = generate_dataset(dc);
    export_dataset(generated, dir / "data");
    const Dataset ds = import_dataset(dir / "data");
    ReidModel m(profile_model(ds.num_classes), 7);
    TrainConfig tc = profile_train(7, AblationMode::shallow_weighting);
    tc.epochs_per_side = 3;
    Trainer t(m, ds, tc);
    TrainResult r = t.run({dir / "checkpoint.bin", 0, {}});
    EvalResult again = evaluate(m, ds);
    auto& a = artefacts[static_cast<std::size_t>(run)];
    a["manifest"] = slurp(dir / "data" / "manifest.csv");
    a["image"] = slurp(dir / "data" / "images" / "000003.bin");
    a["checkpoint"] = slurp(dir / "checkpoint.bin");
    a["log"] = t.log_csv();
    a["eval"] = r.final_eval->to_json();
    a["re-eval"] = again.to_json();
  }
  for (const auto& [k, v] : artefacts[0]) {
    if (v.empty() || artefacts[1][k] != v) differs.push_back(k);
  }
  if (artefacts[0]["eval"] != artefacts[0]["re-eval"]) differs.push_back("eval vs re-eval");
  fs::remove_all(root);
  std::string detail = "dataset, checkpoint, log and EvalResult JSON compared across two runs";
  for (const auto& d : differs) detail += "; differs: " + d;
  return {differs.empty(), detail};
}

Outcome overfit() {
  const Dataset full = generate_dataset(profile_data(1));
  const Dataset ds = subset_train_identities(full, 4);
  ReidModel m(profile_model(ds.num_classes), 1);
  TrainConfig c = profile_train(1, AblationMode::baseline);
  c.pk = {4, 4};
  Trainer t(m, ds, c);
  std::size_t step = 0;
  double mean_xent = 0.0;
  while (step < 200) {
    StepReport r = t.extractor_step(t.next_batch());
    ++step;
    mean_xent = r.report.xent_sum() / double(r.report.xent_per_part.size());
    if (mean_xent < 0.1) break;
  }
  return {mean_xent < 0.1, fmt("mean part cross-entropy %.4f after %zu steps", mean_xent, step)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},       {"loss oracles", loss_oracles},
      {"metric oracles", metric_oracles},       {"weight properties", weight_properties},
      {"min-max wiring", minmax_wiring},        {"ablation trend", ablation_trend},
      {"correlation vs depth", correlation_depth}, {"partition sweep", partition_sweep},
      {"determinism", determinism},             {"overfit sanity", overfit},
  };
  std::vector<int> only, allowed;
  std::string report;
  CLI::App app{"Acceptance criteria"};
  app.add_option("criteria", only, "Criterion numbers to run (default: all)");
  app.add_option("--allow-fail", allowed, "Criteria whose FAIL does not change the exit status")->delimiter(',');
  app.add_option("--report", report, "Also write the summary to this file");
  CLI11_PARSE(app, argc, argv);
  const std::set<int> selected(only.begin(), only.end()), tolerated(allowed.begin(), allowed.end());

  bool gate = true;
  std::vector<std::string> lines;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(number)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const bool allowed_fail = !o.pass && tolerated.count(number);
    gate = gate && (o.pass || allowed_fail);
    lines.push_back(fmt("%s %2d %s: ", o.pass ? "PASS" : "FAIL", number, criteria[i].first.c_str()) + o.detail +
                    (allowed_fail ? " [allowed]" : ""));
    std::printf("%s\n", lines.back().c_str());
    std::fflush(stdout);
  }
  std::printf("\nsummary\n");
  for (const auto& l : lines) std::printf("%s\n", l.c_str());
  if (!report.empty()) {
    std::ofstream out(report);
    for (const auto& l : lines) out << l << '\n';
  }
  return gate ? 0 : 1;
}
