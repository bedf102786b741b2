#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mapu/data.hpp"
#include "mapu/model.hpp"

namespace mapu {

struct ConfusionMatrix {
  std::size_t num_classes = 0;
  std::vector<std::size_t> counts;  // rows = true, cols = predicted

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t k)
      : num_classes(k), counts(k * k, 0) {}

  std::size_t& at(std::size_t t, std::size_t p) {
    return counts[t * num_classes + p];
  }
  std::size_t at(std::size_t t, std::size_t p) const {
    return counts[t * num_classes + p];
  }
  std::size_t total() const {
    std::size_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }
  std::size_t trace() const {
    std::size_t s = 0;
    for (std::size_t k = 0; k < num_classes; ++k) s += at(k, k);
    return s;
  }

  std::string to_csv() const {
    std::string out;
    for (std::size_t t = 0; t < num_classes; ++t) {
      for (std::size_t p = 0; p < num_classes; ++p) {
        if (p) out += ",";
        out += std::to_string(at(t, p));
      }
      out += "\n";
    }
    return out;
  }
};

inline ConfusionMatrix confusion_matrix(const std::vector<int>& truth,
                                        const std::vector<int>& pred,
                                        std::size_t k) {
  if (truth.size() != pred.size())
    throw contract_error("confusion_matrix: length mismatch");
  ConfusionMatrix cm(k);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || pred[i] < 0 ||
        static_cast<std::size_t>(truth[i]) >= k ||
        static_cast<std::size_t>(pred[i]) >= k)
      throw contract_error("confusion_matrix: label out of range");
    ++cm.at(static_cast<std::size_t>(truth[i]),
            static_cast<std::size_t>(pred[i]));
  }
  return cm;
}

// Unweighted mean of per-class F1. Classes absent from both truth and
// prediction are excluded from the average; a class that is predicted but
// never true (or vice versa) scores 0.
inline double macro_f1_from_confusion(const ConfusionMatrix& cm) {
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t k = 0; k < cm.num_classes; ++k) {
    std::size_t tp = cm.at(k, k), fp = 0, fn = 0;
    for (std::size_t j = 0; j < cm.num_classes; ++j) {
      if (j == k) continue;
      fp += cm.at(j, k);
      fn += cm.at(k, j);
    }
    if (tp + fp + fn == 0) continue;
    sum += 2.0 * static_cast<double>(tp) /
           static_cast<double>(2 * tp + fp + fn);
    ++counted;
  }
  return counted ? sum / static_cast<double>(counted) : 0.0;
}

inline double macro_f1(const std::vector<int>& truth,
                       const std::vector<int>& pred, std::size_t k) {
  return macro_f1_from_confusion(confusion_matrix(truth, pred, k));
}

struct EvalResult {
  double mf1 = 0.0;
  double accuracy = 0.0;
  ConfusionMatrix confusion;
};

// Argmax prediction over eval-mode logits, metrics in one pass. Does not
// touch BN running statistics.
template <class T>
EvalResult evaluate(ModelBundle<T>& bundle, const DomainData<T>& data,
                    std::size_t batch_size = 256) {
  if (!data.y) throw contract_error("evaluate: labels required");
  std::vector<int> pred(data.n);
  for (const auto& idx : batch_indices(data.n, batch_size, nullptr)) {
    auto batch = slice_batch(data, idx);
    auto logits = bundle.classify(bundle.encode(batch, /*train=*/false));
    const std::size_t K = logits.shape()[1];
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k)
        if (logits.value()[i * K + k] > logits.value()[i * K + best])
          best = k;
      pred[idx[i]] = static_cast<int>(best);
    }
  }
  EvalResult r;
  r.confusion = confusion_matrix(*data.y, pred,
                                 bundle.meta.num_classes);
  r.mf1 = macro_f1_from_confusion(r.confusion);
  r.accuracy = static_cast<double>(r.confusion.trace()) /
               static_cast<double>(r.confusion.total());
  return r;
}

}  // namespace mapu
