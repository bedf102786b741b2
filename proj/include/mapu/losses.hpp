#pragma once

#include <cmath>
#include <vector>

#include "mapu/tensor.hpp"

namespace mapu {

struct LossWeights {
  double alpha = 0.5;
  double shot_im_weight = 1.0;
  double shot_pl_weight = 0.3;
};

struct PseudoLabels {
  std::vector<int> labels;              // per-sample class id
  std::vector<std::vector<double>> centroids;  // K x feature_dim
};

// Mean squared error over all elements.
template <class T>
Tensor<T> imputation_mse(const Tensor<T>& h_orig, const Tensor<T>& h_imputed) {
  if (h_orig.shape() != h_imputed.shape())
    throw dimension_error("imputation_mse: shapes differ: " +
                          shape_str(h_orig.shape()) + " vs " +
                          shape_str(h_imputed.shape()));
  return mean(square(sub(h_orig, h_imputed)));
}

// Mean over the batch of -log softmax(logits)[label], stabilized by
// max-subtraction inside log_softmax.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  return nll(log_softmax_rows(logits), labels);
}

// SHOT objective: information maximization (low conditional entropy, high
// marginal entropy) plus optional centroid pseudo-label supervision.
//   im_weight * (H_cond - H_marg) + pl_weight * CE(logits, pseudo labels)
template <class T>
Tensor<T> shot_loss(const Tensor<T>& logits, const Tensor<T>& features,
                    const std::vector<int>* pseudo_labels,
                    const LossWeights& w = {}) {
  (void)features;  // reserved for SFDA plug-ins that need feature geometry
  if (logits.shape().size() != 2)
    throw dimension_error("shot_loss expects [B,K] logits");
  const std::size_t K = logits.shape()[1];

  auto logp = log_softmax_rows(logits);
  auto p = exp_op(logp);
  (void)K;
  // H_cond: mean per-sample entropy.
  auto h_cond = neg(mean(sum_axis(mul(p, logp), 1, true)));
  // H_marg: entropy of the batch-mean prediction.
  auto p_bar = mean_axis(p, 0, false);  // [K]
  auto h_marg = neg(sum(mul(p_bar, log_op(add_scalar(p_bar, static_cast<T>(1e-12))))));

  auto im = sub(h_cond, h_marg);
  auto loss = scale(im, static_cast<T>(w.shot_im_weight));
  if (pseudo_labels) {
    auto pl_ce = cross_entropy(logits, *pseudo_labels);
    loss = add(loss, scale(pl_ce, static_cast<T>(w.shot_pl_weight)));
  }
  return loss;
}

// Two-round centroid pseudo-labeling over the full target set (cosine
// distance). Round 1: prediction-weighted centroids, nearest-centroid
// labels. Round 2: recompute centroids from hard labels (empty clusters
// keep their round-1 centroid) and reassign.
template <class T>
PseudoLabels compute_pseudo_labels(const Tensor<T>& features,
                                   const Tensor<T>& logits) {
  if (features.shape().size() != 2 || logits.shape().size() != 2 ||
      features.shape()[0] != logits.shape()[0])
    throw dimension_error("compute_pseudo_labels: expected [N,F] and [N,K]");
  const std::size_t N = features.shape()[0], F = features.shape()[1],
                    K = logits.shape()[1];
  if (N < K)
    throw config_error("compute_pseudo_labels: need at least K samples");

  const auto& fv = features.value();
  const auto& lv = logits.value();

  // Softmax probabilities.
  std::vector<double> p(N * K);
  for (std::size_t i = 0; i < N; ++i) {
    double m = static_cast<double>(lv[i * K]);
    for (std::size_t k = 1; k < K; ++k)
      m = std::max(m, static_cast<double>(lv[i * K + k]));
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      p[i * K + k] = std::exp(static_cast<double>(lv[i * K + k]) - m);
      z += p[i * K + k];
    }
    for (std::size_t k = 0; k < K; ++k) p[i * K + k] /= z;
  }

  auto assign = [&](const std::vector<std::vector<double>>& centroids) {
    std::vector<int> labels(N);
    for (std::size_t i = 0; i < N; ++i) {
      double best = -2.0;
      int best_k = 0;
      double fn = 1e-8;
      for (std::size_t f = 0; f < F; ++f) {
        const double v = static_cast<double>(fv[i * F + f]);
        fn += v * v;
      }
      fn = std::sqrt(fn);
      for (std::size_t k = 0; k < K; ++k) {
        double dot = 0.0, cn = 1e-8;
        for (std::size_t f = 0; f < F; ++f) {
          dot += static_cast<double>(fv[i * F + f]) * centroids[k][f];
          cn += centroids[k][f] * centroids[k][f];
        }
        const double cos_sim = dot / (fn * std::sqrt(cn));
        if (cos_sim > best) {
          best = cos_sim;
          best_k = static_cast<int>(k);
        }
      }
      labels[i] = best_k;
    }
    return labels;
  };

  // Round 1: prediction-weighted feature means.
  std::vector<std::vector<double>> centroids(K, std::vector<double>(F, 0.0));
  for (std::size_t k = 0; k < K; ++k) {
    double wsum = 1e-8;
    for (std::size_t i = 0; i < N; ++i) {
      wsum += p[i * K + k];
      for (std::size_t f = 0; f < F; ++f)
        centroids[k][f] += p[i * K + k] * static_cast<double>(fv[i * F + f]);
    }
    for (std::size_t f = 0; f < F; ++f) centroids[k][f] /= wsum;
  }
  auto labels = assign(centroids);

  // Round 2: hard-label centroids; empty clusters keep round-1 centroids.
  std::vector<std::vector<double>> centroids2 = centroids;
  std::vector<std::size_t> counts(K, 0);
  for (std::size_t k = 0; k < K; ++k)
    std::fill(centroids2[k].begin(), centroids2[k].end(), 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    const auto k = static_cast<std::size_t>(labels[i]);
    ++counts[k];
    for (std::size_t f = 0; f < F; ++f)
      centroids2[k][f] += static_cast<double>(fv[i * F + f]);
  }
  for (std::size_t k = 0; k < K; ++k) {
    if (counts[k] == 0) {
      centroids2[k] = centroids[k];
    } else {
      for (std::size_t f = 0; f < F; ++f)
        centroids2[k][f] /= static_cast<double>(counts[k]);
    }
  }
  labels = assign(centroids2);

  PseudoLabels out;
  out.labels = std::move(labels);
  out.centroids = std::move(centroids2);
  return out;
}

// Eq-style total pretraining loss: CE + imputation, unweighted. The caller
// detaches the encoder path of the imputation term.
template <class T>
Tensor<T> pretrain_loss(const Tensor<T>& ce, const Tensor<T>& imp) {
  return add(ce, imp);
}

// Adaptation loss: sf + alpha * imputation.
template <class T>
Tensor<T> adapt_loss(const Tensor<T>& sf, const Tensor<T>& imp,
                     const LossWeights& w) {
  return add(sf, scale(imp, static_cast<T>(w.alpha)));
}

}  // namespace mapu
