#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "mapu/data.hpp"
#include "mapu/rng.hpp"

namespace mapu {

struct MaskSpec {
  std::size_t num_blocks = 8;
  double mask_ratio = 0.125;
  std::uint64_t seed = 0;

  std::size_t num_masked() const {
    return static_cast<std::size_t>(
        std::llround(mask_ratio * static_cast<double>(num_blocks)));
  }
};

template <class T>
struct MaskResult {
  TimeSeriesBatch<T> masked;
  std::vector<std::vector<std::size_t>> block_indices;      // per sample
  std::vector<std::pair<std::size_t, std::size_t>> block_bounds;  // [start,end)
};

// Partitions [0, L) into num_blocks contiguous ranges of floor(L/num_blocks)
// steps, remainder attached to the last block.
inline std::vector<std::pair<std::size_t, std::size_t>> block_bounds(
    std::size_t length, std::size_t num_blocks) {
  const std::size_t bs = length / num_blocks;
  std::vector<std::pair<std::size_t, std::size_t>> out(num_blocks);
  for (std::size_t i = 0; i < num_blocks; ++i)
    out[i] = {i * bs, (i + 1 == num_blocks) ? length : (i + 1) * bs};
  return out;
}

// Zeroes num_masked distinct blocks per sample, chosen uniformly without
// replacement, across all channels. Deterministic in (batch, spec, seed).
template <class T>
MaskResult<T> apply_temporal_mask(const TimeSeriesBatch<T>& batch,
                                  const MaskSpec& spec) {
  const Shape& s = batch.values.shape();
  const std::size_t B = s[0], C = s[1], L = s[2];
  if (spec.num_blocks == 0 || L < spec.num_blocks)
    throw config_error("masking: sequence length " + std::to_string(L) +
                       " shorter than num_blocks " +
                       std::to_string(spec.num_blocks));
  const std::size_t k = spec.num_masked();
  if (k > spec.num_blocks)
    throw config_error("masking: mask_ratio selects more blocks than exist");

  MaskResult<T> res;
  res.block_bounds = block_bounds(L, spec.num_blocks);
  res.block_indices.resize(B);
  std::vector<T> buf = batch.values.value();
  Rng rng(spec.seed);
  std::vector<std::size_t> ids(spec.num_blocks);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < spec.num_blocks; ++i) ids[i] = i;
    // Partial Fisher-Yates: first k entries are a uniform k-subset.
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + rng.uniform_int(spec.num_blocks - i);
      std::swap(ids[i], ids[j]);
    }
    auto& chosen = res.block_indices[b];
    chosen.assign(ids.begin(), ids.begin() + static_cast<long>(k));
    for (std::size_t bi : chosen) {
      const auto [lo, hi] = res.block_bounds[bi];
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t t = lo; t < hi; ++t) buf[(b * C + c) * L + t] = T(0);
    }
  }
  res.masked.values = Tensor<T>({B, C, L}, std::move(buf));
  res.masked.labels = batch.labels;
  res.masked.domain_id = batch.domain_id;
  return res;
}

}  // namespace mapu
