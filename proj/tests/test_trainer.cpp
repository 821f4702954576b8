#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fixtures.hpp"

#include "xmreid/errors.hpp"

#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>

using namespace xmreid;
using doctest::Approx;

namespace {

const Dataset& tiny_dataset() {
  static const Dataset ds = generate_dataset(fixture::tiny_data());
  return ds;
}

std::uint64_t extractor_checksum(const ReidModel& m) { return checksum(m.extractor_parameters()); }
std::uint64_t discriminator_checksum(const ReidModel& m) { return checksum(m.discriminator_parameters()); }

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("per-epoch schedule alternates one to one") {
  const Dataset& ds = tiny_dataset();
  ReidModel m(fixture::tiny_model(ds.num_classes), 1);
  TrainConfig c = fixture::tiny_train();
  c.epochs_per_side = 1;
  CHECK(Trainer(m, ds, c).schedule() == std::vector<Phase>{Phase::discriminator, Phase::extractor});
  c.epochs_per_side = 3;
  CHECK(Trainer(m, ds, c).schedule() ==
        std::vector<Phase>{Phase::discriminator, Phase::extractor, Phase::discriminator, Phase::extractor,
                           Phase::discriminator, Phase::extractor});
  c.discriminator_block = 2;
  c.extractor_block = 1;
  auto s = Trainer(m, ds, c).schedule();
  CHECK(std::count(s.begin(), s.end(), Phase::discriminator) == 3);
  CHECK(std::count(s.begin(), s.end(), Phase::extractor) == 3);
  CHECK(s[0] == Phase::discriminator);
  CHECK(s[1] == Phase::discriminator);
  CHECK(s[2] == Phase::extractor);
  c.ablation = AblationMode::baseline;
  CHECK(Trainer(m, ds, c).schedule() == std::vector<Phase>(3, Phase::extractor));
}

TEST_CASE("training configuration validation") {
  const Dataset& ds = tiny_dataset();
  ReidModel m(fixture::tiny_model(ds.num_classes), 1);
  TrainConfig c = fixture::tiny_train();
  c.lr_heads = -1.0;
  CHECK_THROWS_AS(Trainer(m, ds, c), ConfigError);
  c = fixture::tiny_train();
  c.momentum = 1.0;
  CHECK_THROWS_AS(Trainer(m, ds, c), ConfigError);
  c = fixture::tiny_train();
  c.epochs_per_side = 0;
  CHECK_THROWS_AS(Trainer(m, ds, c), ConfigError);
  CHECK_THROWS_AS(parse_granularity("per-step"), ConfigError);

  ReidModel wrong(fixture::tiny_model(ds.num_classes + 1), 1);
  CHECK_THROWS_AS(Trainer(wrong, ds, fixture::tiny_train()), ConfigError);
}

TEST_CASE("each phase updates only its own side") {
  const Dataset& ds = tiny_dataset();
  ReidModel m(fixture::tiny_model(ds.num_classes), 2);
  Trainer t(m, ds, fixture::tiny_train(2));
  const auto extractor_names = [&] {
    std::set<std::string> names;
    for (const auto& [n, _] : m.named_parameters())
      if (n.rfind("disc.", 0) != 0) names.insert(n);
    return names;
  }();

  for (int round = 0; round < 3; ++round) {
    const std::uint64_t e0 = extractor_checksum(m), bufs0 = checksum(m.named_buffers());
    const std::uint64_t d0 = discriminator_checksum(m);
    StepReport d = t.discriminator_step(t.next_batch());
    CHECK(extractor_checksum(m) == e0);
    CHECK(checksum(m.named_buffers()) == bufs0);
    CHECK(discriminator_checksum(m) != d0);
    CHECK_FALSE(d.grad_params.empty());
    for (const auto& n : d.grad_params) CHECK(n.rfind("disc.", 0) == 0);

    const std::uint64_t d1 = discriminator_checksum(m);
    StepReport e = t.extractor_step(t.next_batch());
    CHECK(discriminator_checksum(m) == d1);
    CHECK(extractor_checksum(m) != e0);
    std::set<std::string> got(e.grad_params.begin(), e.grad_params.end());
    for (const auto& n : got) CHECK(extractor_names.count(n) == 1);
    // every extractor parameter is reached by the objective
    CHECK(got == extractor_names);
  }
}

TEST_CASE("the baseline never evaluates a discriminator") {
  const Dataset& ds = tiny_dataset();
  ReidModel m(fixture::tiny_model(ds.num_classes), 3);
  TrainConfig c = fixture::tiny_train(3);
  c.ablation = AblationMode::baseline;
  Trainer t(m, ds, c);
  const std::uint64_t d0 = discriminator_checksum(m);
  for (int i = 0; i < 3; ++i) {
    StepReport r = t.extractor_step(t.next_batch());
    CHECK(r.discriminator_evaluations == 0);
    CHECK(r.report.adv_per_level.empty());
    CHECK(r.report.total == Approx(r.report.xent_sum() + r.report.triplet).epsilon(1e-14));
  }
  CHECK(discriminator_checksum(m) == d0);
  CHECK_THROWS_AS(t.discriminator_step(t.next_batch()), UsageError);
}

TEST_CASE("discriminator evaluations per step follow the ablation") {
  const Dataset& ds = tiny_dataset();
  for (auto [mode, expected] : std::vector<std::pair<AblationMode, std::size_t>>{
           {AblationMode::vanilla, 2}, {AblationMode::shallow, 4}, {AblationMode::shallow_weighting, 4}}) {
    ReidModel m(fixture::tiny_model(ds.num_classes), 4);
    TrainConfig c = fixture::tiny_train(4);
    c.ablation = mode;
    Trainer t(m, ds, c);
    CHECK(t.discriminator_step(t.next_batch()).discriminator_evaluations == expected);
    CHECK(t.extractor_step(t.next_batch()).discriminator_evaluations == expected);
  }
}

TEST_CASE("initial adversarial loss is ln 2 per level") {
  const Dataset& ds = tiny_dataset();
  ReidModel m(fixture::tiny_model(ds.num_classes), 5);
  Trainer t(m, ds, fixture::tiny_train(5));
  StepReport r = t.discriminator_step(t.next_batch());
  REQUIRE(r.report.adv_per_level.size() == 4);
  for (const auto& [name, v] : r.report.adv_per_level) CHECK(v == Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("a non-finite loss aborts with the term and step") {
  const Dataset& ds = tiny_dataset();
  ReidModel m(fixture::tiny_model(ds.num_classes), 6);
  Trainer t(m, ds, fixture::tiny_train(6));
  t.extractor_step(t.next_batch());
  for (auto& [name, p] : const_cast<NamedTensors&>(m.named_parameters())) {
    if (name == "heads.classifier1.weight") p.values()[0] = std::numeric_limits<double>::quiet_NaN();
  }
  try {
    t.extractor_step(t.next_batch());
    FAIL("expected NumericAbort");
  } catch (const NumericAbort& e) {
    CHECK(e.term() == "xent_2");
    CHECK(e.step() == 1);
  }
}

TEST_CASE("log rows carry every active term") {
  const Dataset& ds = tiny_dataset();
  for (auto mode : {AblationMode::baseline, AblationMode::vanilla, AblationMode::shallow_weighting}) {
    ReidModel m(fixture::tiny_model(ds.num_classes), 7);
    TrainConfig c = fixture::tiny_train(7);
    c.ablation = mode;
    c.final_eval = false;
    Trainer t(m, ds, c);
    t.run();
    const auto terms = LossConfig::for_ablation(mode).adversarial_terms();
    for (const auto& row : t.log()) {
      CHECK(row.adv.size() == terms.size());
      if (row.phase == Phase::extractor) {
        CHECK(row.xent.size() == 2);
        CHECK(row.total == Approx(row.xent[0] + row.xent[1] + row.triplet -
                                  std::accumulate(row.adv.begin(), row.adv.end(), 0.0))
                               .epsilon(1e-12));
      }
    }
    const std::string header = t.log_header();
    for (const auto& term : terms) CHECK(header.find(term) != std::string::npos);
    CHECK(header.find("xent_2") != std::string::npos);
  }
}

TEST_CASE("training is deterministic") {
  const Dataset& ds = tiny_dataset();
  auto once = [&] {
    ReidModel m(fixture::tiny_model(ds.num_classes), 8);
    Trainer t(m, ds, fixture::tiny_train(8));
    TrainResult r = t.run();
    return std::make_tuple(r.parameter_checksum, t.log_csv(), r.final_eval->to_json());
  };
  CHECK(once() == once());
  ReidModel m(fixture::tiny_model(ds.num_classes), 9);
  CHECK(Trainer(m, ds, fixture::tiny_train(9)).run().parameter_checksum != std::get<0>(once()));
}

TEST_CASE("resuming from a checkpoint reproduces an uninterrupted run") {
  namespace fs = std::filesystem;
  const Dataset& ds = tiny_dataset();
  const fs::path dir = fs::temp_directory_path() / "xmreid_resume_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  for (auto granularity : {Granularity::per_epoch, Granularity::per_batch}) {
    TrainConfig c = fixture::tiny_train(10);
    c.granularity = granularity;

    ReidModel full_model(fixture::tiny_model(ds.num_classes), 10);
    Trainer full(full_model, ds, c);
    TrainResult expected = full.run({dir / "full.bin", 0, {}});

    ReidModel first_model(fixture::tiny_model(ds.num_classes), 10);
    Trainer first(first_model, ds, c);
    TrainResult partial = first.run({dir / "part.bin", 2, {}});
    CHECK_FALSE(partial.finished);
    CHECK(partial.epochs_completed == 2);

    ReidModel resumed_model(fixture::tiny_model(ds.num_classes), 99);
    Trainer resumed(resumed_model, ds, c);
    resumed.load_state(read_checkpoint(dir / "part.bin"));
    TrainResult finished = resumed.run({dir / "part.bin", 0, {}});
    CHECK(finished.finished);
    CHECK(finished.parameter_checksum == expected.parameter_checksum);
    CHECK(resumed.log_csv() == full.log_csv());
    CHECK(finished.final_eval->to_json() == expected.final_eval->to_json());
    CHECK(slurp(dir / "part.bin") == slurp(dir / "full.bin"));
  }

  TrainConfig other = fixture::tiny_train(11);
  ReidModel m(fixture::tiny_model(ds.num_classes), 11);
  Trainer t(m, ds, other);
  CHECK_THROWS_AS(t.load_state(read_checkpoint(dir / "full.bin")), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("entropy weights move away from uniform once the heads learn") {
  const Dataset& ds = tiny_dataset();
  ReidModel m(fixture::tiny_model(ds.num_classes), 12);
  TrainConfig c = fixture::tiny_train(12);
  c.epochs_per_side = 4;
  c.final_eval = false;
  TrainResult r = Trainer(m, ds, c).run();
  CHECK(r.max_weight_ratio > 1.01);

  ReidModel m2(fixture::tiny_model(ds.num_classes), 12);
  c.ablation = AblationMode::shallow;
  CHECK(Trainer(m2, ds, c).run().max_weight_ratio == 1.0);
}

TEST_CASE("training moves the two private streams apart") {
  const Dataset& ds = tiny_dataset();
  ReidModel m(fixture::tiny_model(ds.num_classes), 13);
  TrainConfig c = fixture::tiny_train(13);
  c.final_eval = false;
  Trainer(m, ds, c).run();
  CHECK(m.backbone().stream_stage(Modality::colour, 0).units[0].conv1.weight.vec() !=
        m.backbone().stream_stage(Modality::infrared, 0).units[0].conv1.weight.vec());
}

TEST_CASE("min-max probe on a frozen batch") {
  const Dataset& ds = tiny_dataset();
  std::size_t holds = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ReidModel m(fixture::tiny_model(ds.num_classes), seed);
    TrainConfig c = fixture::tiny_train(seed);
    c.augment = false;
    MinMaxTrace t = minmax_probe(m, ds, c, 100, 30);
    holds += t.holds();
  }
  CHECK(holds >= 4);
}
