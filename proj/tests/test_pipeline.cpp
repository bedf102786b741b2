#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>

#include "mapu/config.hpp"
#include "mapu/pipeline.hpp"

namespace {

template <class T>
mapu::TrainConfig small_cfg(int epochs, std::uint64_t seed) {
  mapu::TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 16;
  cfg.lr = 1e-3;
  cfg.seed = seed;
  return cfg;
}

template <class T>
bool snapshots_equal(const std::vector<std::vector<T>>& a,
                     const std::vector<std::vector<T>>& b) {
  return a == b;
}

}  // namespace

TEST_CASE("pretraining fits an easily separable source domain") {
  mapu::ShiftSpec shift{mapu::ShiftKind::additive_noise, 0.0, 0};
  auto [src, tgt] = mapu::synth_domain_pair<float>(3, 40, shift, 11);
  mapu::normalize(src);
  auto cfg = small_cfg<float>(8, 11);
  auto res = mapu::pretrain_source(src, cfg, 3);
  auto ev = mapu::evaluate(res.bundle, src);
  CHECK(ev.mf1 > 0.95);
  // CE must have dropped substantially from its first epoch
  REQUIRE(res.curves.ce.size() == 8);
  CHECK(res.curves.ce.back() < 0.5 * res.curves.ce.front());
  CHECK(res.curves.imputation.size() == 8);
  (void)tgt;
}

TEST_CASE("zero epochs is a no-op with empty curves") {
  mapu::ShiftSpec shift{mapu::ShiftKind::additive_noise, 0.0, 0};
  auto [src, tgt] = mapu::synth_domain_pair<double>(2, 10, shift, 3);
  auto cfg = small_cfg<double>(0, 3);
  auto res = mapu::pretrain_source(src, cfg, 2);
  CHECK(res.curves.ce.empty());

  // params equal a freshly initialized bundle drawn from the same stream
  mapu::Rng rng(mapu::derive_seed(cfg.seed, "init"));
  mapu::ModelBundle<double> fresh(
      {src.channels, src.length, 2, 128, 128}, rng);
  CHECK(snapshots_equal(res.bundle.snapshot(res.bundle.all_params()),
                        fresh.snapshot(fresh.all_params())));

  auto before = res.bundle.snapshot(res.bundle.all_params());
  auto log = mapu::adapt_target(res.bundle, mapu::strip_labels(tgt), cfg);
  CHECK(log.curves.shot.empty());
  CHECK(snapshots_equal(res.bundle.snapshot(res.bundle.all_params()), before));
}

TEST_CASE("pretraining is deterministic in the seed") {
  mapu::ShiftSpec shift{mapu::ShiftKind::additive_noise, 0.0, 0};
  auto [src, tgt] = mapu::synth_domain_pair<double>(2, 12, shift, 4);
  mapu::normalize(src);
  auto cfg = small_cfg<double>(2, 21);
  auto a = mapu::pretrain_source(src, cfg, 2);
  auto b = mapu::pretrain_source(src, cfg, 2);
  CHECK(snapshots_equal(a.bundle.snapshot(a.bundle.all_params()),
                        b.bundle.snapshot(b.bundle.all_params())));
  CHECK(a.curves.ce == b.curves.ce);

  cfg.seed = 22;
  auto c = mapu::pretrain_source(src, cfg, 2);
  CHECK_FALSE(snapshots_equal(a.bundle.snapshot(a.bundle.all_params()),
                              c.bundle.snapshot(c.bundle.all_params())));
  (void)tgt;
}

TEST_CASE("imputation term never changes encoder or classifier updates") {
  mapu::ShiftSpec shift{mapu::ShiftKind::additive_noise, 0.0, 0};
  auto [src, tgt] = mapu::synth_domain_pair<double>(2, 12, shift, 5);
  mapu::normalize(src);
  auto cfg = small_cfg<double>(2, 31);

  cfg.pretrain_imputation = true;
  auto with = mapu::pretrain_source(src, cfg, 2);
  cfg.pretrain_imputation = false;
  auto without = mapu::pretrain_source(src, cfg, 2);

  CHECK(snapshots_equal(
      with.bundle.snapshot(with.bundle.encoder_params()),
      without.bundle.snapshot(without.bundle.encoder_params())));
  CHECK(snapshots_equal(
      with.bundle.snapshot(with.bundle.classifier_params()),
      without.bundle.snapshot(without.bundle.classifier_params())));
  // while the imputer itself did move
  CHECK_FALSE(snapshots_equal(
      with.bundle.snapshot(with.bundle.imputer_params()),
      without.bundle.snapshot(without.bundle.imputer_params())));
  (void)tgt;
}

TEST_CASE("adaptation freezes classifier and imputer exactly") {
  mapu::ShiftSpec shift{mapu::ShiftKind::phase_shift, 1.0, 0};
  auto [src, tgt] = mapu::synth_domain_pair<double>(2, 15, shift, 6);
  mapu::normalize(src);
  auto cfg = small_cfg<double>(2, 41);
  auto res = mapu::pretrain_source(src, cfg, 2);

  auto cls_before = res.bundle.snapshot(res.bundle.classifier_params());
  auto imp_before = res.bundle.snapshot(res.bundle.imputer_params());
  auto enc_before = res.bundle.snapshot(res.bundle.encoder_params());

  mapu::adapt_target(res.bundle, mapu::strip_labels(tgt), cfg);

  CHECK(snapshots_equal(res.bundle.snapshot(res.bundle.classifier_params()),
                        cls_before));
  CHECK(snapshots_equal(res.bundle.snapshot(res.bundle.imputer_params()),
                        imp_before));
  CHECK_FALSE(snapshots_equal(res.bundle.snapshot(res.bundle.encoder_params()),
                              enc_before));
}

TEST_CASE("alpha=0 adaptation equals a run that never builds the masked branch") {
  mapu::ShiftSpec shift{mapu::ShiftKind::phase_shift, 1.0, 0};
  auto [src, tgt] = mapu::synth_domain_pair<double>(2, 15, shift, 7);
  mapu::normalize(src);
  auto cfg = small_cfg<double>(2, 51);
  auto a = mapu::pretrain_source(src, cfg, 2);
  auto b = mapu::pretrain_source(src, cfg, 2);

  auto cfg_a = cfg;
  cfg_a.weights.alpha = 0.0;
  mapu::adapt_target(a.bundle, mapu::strip_labels(tgt), cfg_a);
  mapu::adapt_target(b.bundle, mapu::strip_labels(tgt), cfg_a);
  CHECK(snapshots_equal(a.bundle.snapshot(a.bundle.all_params()),
                        b.bundle.snapshot(b.bundle.all_params())));
}

TEST_CASE("adaptation contract and config errors") {
  mapu::ShiftSpec shift{mapu::ShiftKind::additive_noise, 0.0, 0};
  auto [src, tgt] = mapu::synth_domain_pair<double>(2, 10, shift, 8);
  auto cfg = small_cfg<double>(1, 61);
  auto res = mapu::pretrain_source(src, cfg, 2);

  // shape mismatch between bundle arch and target data
  mapu::UnlabeledDomain<double> wrong = mapu::strip_labels(tgt);
  wrong.length = 16;
  wrong.x.resize(wrong.n * wrong.channels * 16);
  CHECK_THROWS_AS(mapu::adapt_target(res.bundle, wrong, cfg),
                  mapu::contract_error);

  auto dead = cfg;
  dead.weights.alpha = 0.0;
  dead.sfda = mapu::SfdaMethod::none;
  CHECK_THROWS_AS(mapu::adapt_target(res.bundle, mapu::strip_labels(tgt), dead),
                  mapu::config_error);

  auto bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(mapu::pretrain_source(src, bad, 2), mapu::config_error);
  bad = cfg;
  bad.mask.mask_ratio = 1.0;
  CHECK_THROWS_AS(mapu::pretrain_source(src, bad, 2), mapu::config_error);

  CHECK_THROWS_AS(mapu::parse_sfda("mystery"), mapu::config_error);
  CHECK(mapu::parse_sfda("none") == mapu::SfdaMethod::none);
}

TEST_CASE("run_scenario aggregates one entry per seed") {
  mapu::ShiftSpec shift{mapu::ShiftKind::additive_noise, 0.05, 0};
  auto [src, tgt] = mapu::synth_domain_pair<float>(2, 15, shift, 9);
  mapu::normalize(src);
  mapu::TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.seed = 71;
  cfg.seeds_per_scenario = 2;
  auto rep = mapu::run_scenario(src, tgt, cfg, 2);
  REQUIRE(rep.runs.size() == 2);
  CHECK(rep.runs[0].seed == 71);
  CHECK(rep.runs[1].seed == 72);
  CHECK(rep.mean_mf1 ==
        doctest::Approx(0.5 * (rep.runs[0].mf1 + rep.runs[1].mf1)));
  auto j = mapu::report_json(rep);
  CHECK(j["runs"].size() == 2);
  CHECK(j["mean_mf1"].get<double>() == doctest::Approx(rep.mean_mf1));

  tgt.y.reset();
  CHECK_THROWS_AS(mapu::run_scenario(src, tgt, cfg, 2), mapu::contract_error);
}

TEST_CASE("config files override defaults and reject unknown keys") {
  namespace fs = std::filesystem;
  auto path = fs::temp_directory_path() / "mapu_test_cfg.txt";
  {
    std::ofstream out(path);
    out << "# comment line\n"
        << "epochs = 7\n"
        << "lr = 0.01\n"
        << "mask.ratio = 0.25\n"
        << "loss.alpha = 1.0\n"
        << "sfda = shot\n"
        << "carry_bn_stats = false\n";
  }
  auto kv = mapu::parse_config_file(path);
  mapu::TrainConfig cfg;
  mapu::apply_config(cfg, kv);
  CHECK(cfg.epochs == 7);
  CHECK(cfg.lr == doctest::Approx(0.01));
  CHECK(cfg.mask.mask_ratio == doctest::Approx(0.25));
  CHECK(cfg.weights.alpha == doctest::Approx(1.0));
  CHECK_FALSE(cfg.carry_bn_stats);

  {
    std::ofstream out(path);
    out << "not_a_key = 1\n";
  }
  auto bad = mapu::parse_config_file(path);
  CHECK_THROWS_AS(mapu::apply_config(cfg, bad), mapu::config_error);

  {
    std::ofstream out(path);
    out << "epochs\n";
  }
  CHECK_THROWS_AS(mapu::parse_config_file(path), mapu::config_error);
  fs::remove(path);
}
