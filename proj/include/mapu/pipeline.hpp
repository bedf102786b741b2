#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mapu/data.hpp"
#include "mapu/eval.hpp"
#include "mapu/losses.hpp"
#include "mapu/masking.hpp"
#include "mapu/model.hpp"
#include "mapu/nn.hpp"

namespace mapu {

enum class SfdaMethod { shot, none };

inline SfdaMethod parse_sfda(const std::string& s) {
  if (s == "shot") return SfdaMethod::shot;
  if (s == "none") return SfdaMethod::none;
  throw config_error("unknown sfda method: " + s +
                     " (plug-ins beyond shot are not bundled)");
}

struct TrainConfig {
  int epochs = 40;
  int batch_size = 32;
  double lr = 2.5e-4;
  std::uint64_t seed = 0;
  int seeds_per_scenario = 3;
  MaskSpec mask;
  LossWeights weights;
  SfdaMethod sfda = SfdaMethod::shot;
  bool pretrain_imputation = true;  // off = plain CE pretraining
  bool carry_bn_stats = true;       // keep source BN buffers at adapt start
  bool checked = false;

  void validate() const {
    if (epochs < 0) throw config_error("epochs must be >= 0");
    if (batch_size < 1) throw config_error("batch_size must be >= 1");
    if (!(lr > 0)) throw config_error("lr must be > 0");
    if (seeds_per_scenario < 1)
      throw config_error("seeds_per_scenario must be >= 1");
    if (mask.mask_ratio < 0 || mask.mask_ratio >= 1)
      throw config_error("mask.ratio must be in [0,1)");
    if (weights.alpha < 0 || weights.shot_pl_weight < 0 ||
        weights.shot_im_weight < 0)
      throw config_error("loss weights must be >= 0");
  }
};

struct LossCurves {
  std::vector<double> ce;          // pretraining
  std::vector<double> imputation;  // both stages
  std::vector<double> shot;        // adaptation
};

template <class T>
struct PretrainResult {
  ModelBundle<T> bundle;
  LossCurves curves;
};

namespace detail {

struct CheckedGuard {
  bool prev;
  explicit CheckedGuard(bool on) : prev(checked_mode()) { checked_mode() = on; }
  ~CheckedGuard() { checked_mode() = prev; }
};

}  // namespace detail

// Source pretraining: CE trains encoder + classifier; the imputation MSE,
// computed on detached features, trains only the imputer.
template <class T>
PretrainResult<T> pretrain_source(const DomainData<T>& data,
                                  const TrainConfig& cfg,
                                  std::size_t num_classes) {
  cfg.validate();
  if (data.n == 0) throw config_error("pretrain_source: empty dataset");
  if (!data.y) throw config_error("pretrain_source: labels required");
  detail::CheckedGuard guard(cfg.checked);

  ArchMeta arch;
  arch.in_channels = data.channels;
  arch.seq_len = data.length;
  arch.num_classes = num_classes;
  Rng init_rng(derive_seed(cfg.seed, "init"));
  PretrainResult<T> res{ModelBundle<T>(arch, init_rng), {}};
  auto& bundle = res.bundle;

  Adam<T> opt(bundle.all_params(), cfg.lr);
  Rng shuffle_rng(derive_seed(cfg.seed, "pretrain.shuffle"));
  Rng mask_rng(derive_seed(cfg.seed, "pretrain.mask"));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double ce_sum = 0.0, imp_sum = 0.0;
    std::size_t batches = 0;
    for (const auto& idx : batch_indices(data.n, cfg.batch_size, &shuffle_rng)) {
      auto batch = slice_batch(data, idx);
      opt.zero_grads();

      auto h = bundle.encode(batch, /*train=*/true);
      auto logits = bundle.classify(h);
      auto ce = cross_entropy(logits, *batch.labels);

      Tensor<T> loss = ce;
      if (cfg.pretrain_imputation) {
        MaskSpec ms = cfg.mask;
        ms.seed = mask_rng.next_u64();
        auto masked = apply_temporal_mask(batch, ms);
        auto h_masked = bundle.encode(masked.masked, /*train=*/true);
        // Stop-gradient on both sides: the imputation term trains only j.
        auto imputed = bundle.impute(detach(h_masked));
        auto imp = imputation_mse(detach(h), imputed);
        loss = pretrain_loss(ce, imp);
        imp_sum += static_cast<double>(imp.item());
      }
      backward(loss);
      opt.step();
      ce_sum += static_cast<double>(ce.item());
      ++batches;
    }
    if (batches) {
      res.curves.ce.push_back(ce_sum / static_cast<double>(batches));
      res.curves.imputation.push_back(imp_sum / static_cast<double>(batches));
    }
  }
  return res;
}

struct AdaptLog {
  LossCurves curves;
};

// Source-free adaptation: only the encoder is optimized; classifier and
// imputer parameters are never touched. Pseudo labels refresh once per
// epoch. alpha == 0 skips the masked branch entirely (SHOT-only), and
// sfda == none runs imputation-only adaptation.
template <class T>
AdaptLog adapt_target(ModelBundle<T>& bundle, const UnlabeledDomain<T>& data,
                      const TrainConfig& cfg) {
  cfg.validate();
  if (data.n == 0) throw config_error("adapt_target: empty dataset");
  if (data.channels != bundle.meta.in_channels ||
      data.length != bundle.meta.seq_len)
    throw contract_error("adapt_target: data shape does not match bundle arch");
  if (bundle.imputer_rnn.hidden_dim == 0)
    throw contract_error("adapt_target: bundle has no pretrained imputer");
  detail::CheckedGuard guard(cfg.checked);

  const bool use_imputation = cfg.weights.alpha > 0.0;
  const bool use_sfda = cfg.sfda != SfdaMethod::none;
  if (!use_imputation && !use_sfda)
    throw config_error("adapt_target: alpha=0 with sfda=none trains nothing");

  if (!cfg.carry_bn_stats) bundle.reset_bn_stats();

  Adam<T> opt(bundle.encoder_params(), cfg.lr);
  Rng shuffle_rng(derive_seed(cfg.seed, "adapt.shuffle"));
  Rng mask_rng(derive_seed(cfg.seed, "adapt.mask"));

  AdaptLog log;
  auto as_domain = [&]() {
    DomainData<T> d;
    d.n = data.n;
    d.channels = data.channels;
    d.length = data.length;
    d.x = data.x;
    d.domain_id = data.domain_id;
    return d;
  };
  const DomainData<T> plain = as_domain();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Epoch-start pseudo labels from an eval-mode pass over the full set.
    std::vector<int> pl;
    if (use_sfda) {
      std::vector<T> feats(data.n * bundle.meta.feature_dim);
      std::vector<T> logit_buf(data.n * bundle.meta.num_classes);
      for (const auto& idx : batch_indices(data.n, 256, nullptr)) {
        auto b = slice_batch(plain, idx);
        auto h = bundle.encode(b, /*train=*/false);
        auto pooled = bundle.pool(h);
        auto lg = bundle.classify(h);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          std::copy(pooled.value().begin() +
                        static_cast<long>(i * bundle.meta.feature_dim),
                    pooled.value().begin() +
                        static_cast<long>((i + 1) * bundle.meta.feature_dim),
                    feats.begin() +
                        static_cast<long>(idx[i] * bundle.meta.feature_dim));
          std::copy(lg.value().begin() +
                        static_cast<long>(i * bundle.meta.num_classes),
                    lg.value().begin() +
                        static_cast<long>((i + 1) * bundle.meta.num_classes),
                    logit_buf.begin() +
                        static_cast<long>(idx[i] * bundle.meta.num_classes));
        }
      }
      Tensor<T> ft({data.n, bundle.meta.feature_dim}, std::move(feats));
      Tensor<T> lt({data.n, bundle.meta.num_classes}, std::move(logit_buf));
      pl = compute_pseudo_labels(ft, lt).labels;
    }

    double sf_sum = 0.0, imp_sum = 0.0;
    std::size_t batches = 0;
    for (const auto& idx : batch_indices(data.n, cfg.batch_size, &shuffle_rng)) {
      auto batch = slice_batch(plain, idx);
      opt.zero_grads();

      auto h = bundle.encode(batch, /*train=*/true);

      Tensor<T> loss;
      if (use_sfda) {
        auto logits = bundle.classify(h);
        std::vector<int> batch_pl(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) batch_pl[i] = pl[idx[i]];
        auto sf =
            shot_loss(logits, bundle.pool(h), &batch_pl, cfg.weights);
        sf_sum += static_cast<double>(sf.item());
        loss = sf;
      }
      if (use_imputation) {
        MaskSpec ms = cfg.mask;
        ms.seed = mask_rng.next_u64();
        auto masked = apply_temporal_mask(batch, ms);
        auto h_masked = bundle.encode(masked.masked, /*train=*/true);
        auto imputed = bundle.impute(h_masked);
        auto imp = imputation_mse(h, imputed);
        imp_sum += static_cast<double>(imp.item());
        loss = loss.defined() ? adapt_loss(loss, imp, cfg.weights)
                              : scale(imp, static_cast<T>(cfg.weights.alpha));
      }
      backward(loss);
      opt.step();
      ++batches;
    }
    if (batches) {
      log.curves.shot.push_back(sf_sum / static_cast<double>(batches));
      log.curves.imputation.push_back(imp_sum / static_cast<double>(batches));
    }
  }
  return log;
}

struct SeedRun {
  std::uint64_t seed = 0;
  double mf1 = 0.0;
  double accuracy = 0.0;
  LossCurves pretrain_curves;
  LossCurves adapt_curves;
  ConfusionMatrix confusion;
};

struct ScenarioReport {
  std::string source_id, target_id;
  std::vector<SeedRun> runs;
  double mean_mf1 = 0.0;
  double std_mf1 = 0.0;

  void aggregate() {
    double m = 0.0;
    for (const auto& r : runs) m += r.mf1;
    mean_mf1 = runs.empty() ? 0.0 : m / static_cast<double>(runs.size());
    double v = 0.0;
    for (const auto& r : runs) v += (r.mf1 - mean_mf1) * (r.mf1 - mean_mf1);
    std_mf1 = runs.empty()
                  ? 0.0
                  : std::sqrt(v / static_cast<double>(runs.size()));
  }
};

// Full scenario: for each seed, pretrain on source, adapt to target,
// evaluate MF1 on the labeled target set.
template <class T>
ScenarioReport run_scenario(const DomainData<T>& source,
                            const DomainData<T>& target,
                            const TrainConfig& cfg, std::size_t num_classes) {
  if (!target.y) throw contract_error("run_scenario: target labels required "
                                      "for post-hoc evaluation");
  ScenarioReport report;
  report.source_id = source.domain_id;
  report.target_id = target.domain_id;
  for (int s = 0; s < cfg.seeds_per_scenario; ++s) {
    TrainConfig run_cfg = cfg;
    run_cfg.seed = cfg.seed + static_cast<std::uint64_t>(s);
    auto pre = pretrain_source(source, run_cfg, num_classes);
    auto adapt = adapt_target(pre.bundle, strip_labels(target), run_cfg);
    auto ev = evaluate(pre.bundle, target);
    SeedRun run;
    run.seed = run_cfg.seed;
    run.mf1 = ev.mf1;
    run.accuracy = ev.accuracy;
    run.pretrain_curves = std::move(pre.curves);
    run.adapt_curves = std::move(adapt.curves);
    run.confusion = std::move(ev.confusion);
    report.runs.push_back(std::move(run));
  }
  report.aggregate();
  return report;
}

inline nlohmann::json curves_json(const LossCurves& c) {
  return {{"ce", c.ce}, {"imputation", c.imputation}, {"shot", c.shot}};
}

inline nlohmann::json report_json(const ScenarioReport& r) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& run : r.runs) {
    runs.push_back({{"seed", run.seed},
                    {"mf1", run.mf1},
                    {"accuracy", run.accuracy},
                    {"pretrain_curves", curves_json(run.pretrain_curves)},
                    {"adapt_curves", curves_json(run.adapt_curves)},
                    {"confusion", run.confusion.counts}});
  }
  return {{"source", r.source_id},
          {"target", r.target_id},
          {"mean_mf1", r.mean_mf1},
          {"std_mf1", r.std_mf1},
          {"runs", runs}};
}

}  // namespace mapu
