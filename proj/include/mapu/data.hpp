#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mapu/common.hpp"
#include "mapu/rng.hpp"
#include "mapu/tensor.hpp"

namespace mapu {

struct DatasetMeta {
  std::size_t channels = 0;
  std::size_t length = 0;
  std::size_t num_classes = 0;
  std::vector<std::string> domains;
};

// One domain's full sample set, kept as a flat [N, C, L] buffer.
template <class T>
struct DomainData {
  std::size_t n = 0, channels = 0, length = 0;
  std::vector<T> x;                          // row-major [N, C, L]
  std::optional<std::vector<int>> y;         // class ids, when labeled
  std::string domain_id;

  std::size_t sample_size() const { return channels * length; }
};

// A batch handed to the model: values as a constant tensor plus optional
// labels. Built by slicing a DomainData by index list.
template <class T>
struct TimeSeriesBatch {
  Tensor<T> values;  // [B, C, L]
  std::optional<std::vector<int>> labels;
  std::string domain_id;

  std::size_t batch_size() const { return values.shape()[0]; }
};

template <class T>
TimeSeriesBatch<T> slice_batch(const DomainData<T>& d,
                               const std::vector<std::size_t>& idx) {
  const std::size_t ss = d.sample_size();
  std::vector<T> buf(idx.size() * ss);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(d.x.begin() + static_cast<long>(idx[i] * ss),
              d.x.begin() + static_cast<long>((idx[i] + 1) * ss),
              buf.begin() + static_cast<long>(i * ss));
  TimeSeriesBatch<T> b;
  b.values = Tensor<T>({idx.size(), d.channels, d.length}, std::move(buf));
  if (d.y) {
    std::vector<int> lab(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) lab[i] = (*d.y)[idx[i]];
    b.labels = std::move(lab);
  }
  b.domain_id = d.domain_id;
  return b;
}

// Label-free view used by the adaptation stage so target labels can never
// enter a gradient path.
template <class T>
struct UnlabeledDomain {
  std::size_t n = 0, channels = 0, length = 0;
  std::vector<T> x;
  std::string domain_id;
};

template <class T>
UnlabeledDomain<T> strip_labels(const DomainData<T>& d) {
  return UnlabeledDomain<T>{d.n, d.channels, d.length, d.x, d.domain_id};
}

// ---- on-disk format ----
// meta.json: {"channels": C, "length": L, "num_classes": K,
//             "domains": [...]}
// <domain>_x.f32: raw little-endian float32, row-major [N, C, L]
// <domain>_y.u8:  one byte per sample (optional for unlabeled domains)

namespace detail {

inline std::vector<float> read_f32_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary | std::ios::ate);
  if (!in) throw io_error("cannot open " + p.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes % 4 != 0)
    throw io_error(p.string() + ": size is not a multiple of 4 bytes");
  std::vector<float> out(bytes / 4);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(out.data()),
          static_cast<std::streamsize>(bytes));
  if (!in) throw io_error("short read on " + p.string());
  return out;
}

}  // namespace detail

template <class T>
std::pair<DatasetMeta, std::map<std::string, DomainData<T>>> load_dataset(
    const std::filesystem::path& dir) {
  const auto meta_path = dir / "meta.json";
  std::ifstream meta_file(meta_path);
  if (!meta_file) throw io_error("missing " + meta_path.string());
  nlohmann::json j;
  try {
    meta_file >> j;
  } catch (const std::exception& e) {
    throw io_error(meta_path.string() + ": " + e.what());
  }
  DatasetMeta meta;
  meta.channels = j.at("channels").get<std::size_t>();
  meta.length = j.at("length").get<std::size_t>();
  meta.num_classes = j.at("num_classes").get<std::size_t>();
  meta.domains = j.at("domains").get<std::vector<std::string>>();

  std::map<std::string, DomainData<T>> domains;
  for (const auto& dom : meta.domains) {
    const auto xp = dir / (dom + "_x.f32");
    auto raw = detail::read_f32_file(xp);
    const std::size_t ss = meta.channels * meta.length;
    if (ss == 0 || raw.size() % ss != 0)
      throw io_error(xp.string() + ": size implies a non-integer sample count "
                     "for channels=" + std::to_string(meta.channels) +
                     " length=" + std::to_string(meta.length));
    DomainData<T> d;
    d.n = raw.size() / ss;
    d.channels = meta.channels;
    d.length = meta.length;
    d.domain_id = dom;
    d.x.resize(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (!std::isfinite(raw[i]))
        throw io_error(xp.string() + ": non-finite value at index " +
                       std::to_string(i));
      d.x[i] = static_cast<T>(raw[i]);
    }
    const auto yp = dir / (dom + "_y.u8");
    if (std::filesystem::exists(yp)) {
      std::ifstream yin(yp, std::ios::binary | std::ios::ate);
      if (!yin) throw io_error("cannot open " + yp.string());
      const auto bytes = static_cast<std::size_t>(yin.tellg());
      if (bytes != d.n)
        throw io_error(yp.string() + ": " + std::to_string(bytes) +
                       " labels for " + std::to_string(d.n) + " samples");
      std::vector<unsigned char> lab(bytes);
      yin.seekg(0);
      yin.read(reinterpret_cast<char*>(lab.data()),
               static_cast<std::streamsize>(bytes));
      std::vector<int> y(bytes);
      for (std::size_t i = 0; i < bytes; ++i) {
        y[i] = static_cast<int>(lab[i]);
        if (y[i] >= static_cast<int>(meta.num_classes))
          throw io_error(yp.string() + ": label " + std::to_string(y[i]) +
                         " out of range");
      }
      d.y = std::move(y);
    }
    domains.emplace(dom, std::move(d));
  }
  return {meta, std::move(domains)};
}

template <class T>
void save_dataset(const std::filesystem::path& dir, const DatasetMeta& meta,
                  const std::map<std::string, DomainData<T>>& domains) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["channels"] = meta.channels;
  j["length"] = meta.length;
  j["num_classes"] = meta.num_classes;
  j["domains"] = meta.domains;
  std::ofstream meta_file(dir / "meta.json");
  meta_file << j.dump(2) << "\n";
  if (!meta_file) throw io_error("cannot write " + (dir / "meta.json").string());
  for (const auto& [dom, d] : domains) {
    std::ofstream xout(dir / (dom + "_x.f32"), std::ios::binary);
    std::vector<float> raw(d.x.size());
    for (std::size_t i = 0; i < raw.size(); ++i)
      raw[i] = static_cast<float>(d.x[i]);
    xout.write(reinterpret_cast<const char*>(raw.data()),
               static_cast<std::streamsize>(raw.size() * 4));
    if (!xout) throw io_error("cannot write samples for domain " + dom);
    if (d.y) {
      std::ofstream yout(dir / (dom + "_y.u8"), std::ios::binary);
      std::vector<unsigned char> lab(d.y->size());
      for (std::size_t i = 0; i < lab.size(); ++i)
        lab[i] = static_cast<unsigned char>((*d.y)[i]);
      yout.write(reinterpret_cast<const char*>(lab.data()),
                 static_cast<std::streamsize>(lab.size()));
      if (!yout) throw io_error("cannot write labels for domain " + dom);
    }
  }
}

// ---- synthetic domain-shift generation ----

enum class ShiftKind { amplitude_scale, phase_shift, time_warp, additive_noise };

struct ShiftSpec {
  ShiftKind kind = ShiftKind::phase_shift;
  double magnitude = 0.0;
  std::uint64_t seed = 0;
};

inline ShiftKind parse_shift_kind(const std::string& s) {
  if (s == "amplitude_scale") return ShiftKind::amplitude_scale;
  if (s == "phase_shift") return ShiftKind::phase_shift;
  if (s == "time_warp") return ShiftKind::time_warp;
  if (s == "additive_noise") return ShiftKind::additive_noise;
  throw config_error("unknown shift kind: " + s);
}

inline void validate_shift(const ShiftSpec& s) {
  const double m = s.magnitude;
  switch (s.kind) {
    case ShiftKind::amplitude_scale:
      if (m <= -0.9 || m > 5.0)
        throw config_error("amplitude_scale magnitude must be in (-0.9, 5]");
      break;
    case ShiftKind::phase_shift:
      if (m < -6.2831853072 || m > 6.2831853072)
        throw config_error("phase_shift magnitude must be in [-2pi, 2pi]");
      break;
    case ShiftKind::time_warp:
      if (m < -0.5 || m > 0.5)
        throw config_error("time_warp magnitude must be in [-0.5, 0.5]");
      break;
    case ShiftKind::additive_noise:
      if (m < 0.0 || m > 1.0)
        throw config_error("additive_noise magnitude must be in [0, 1]");
      break;
  }
}

namespace detail {

// Class-k waveform: sinusoid at a class-specific frequency under a fixed
// raised-cosine envelope. The envelope makes the input distribution
// phase-sensitive while class identity stays recoverable by frequency.
inline double class_frequency(int k) {
  static const double freqs[] = {2.0, 3.0, 4.0, 5.0, 6.0, 7.0};
  return freqs[k % 6] + 6.0 * static_cast<double>(k / 6);
}

inline double waveform(int k, double t01, double phase) {
  const double two_pi = 6.283185307179586;
  const double env = 0.35 + 0.65 * 0.5 *
                               (1.0 - std::cos(two_pi * t01));
  return env * std::sin(two_pi * class_frequency(k) * t01 + phase);
}

}  // namespace detail

// Generates a (source, target) pair with K waveform classes. The target is
// freshly sampled and transformed per the shift spec; P(y|X) is preserved
// because class frequency content is untouched by every shift kind.
template <class T>
std::pair<DomainData<T>, DomainData<T>> synth_domain_pair(
    int base_classes, int n_per_class, const ShiftSpec& shift,
    std::uint64_t seed, std::size_t length = 64, std::size_t channels = 1) {
  if (base_classes < 2) throw config_error("synth: need K >= 2");
  if (n_per_class < 1) throw config_error("synth: need n_per_class >= 1");
  validate_shift(shift);

  auto gen = [&](bool target, std::uint64_t s) {
    Rng rng(s);
    DomainData<T> d;
    d.channels = channels;
    d.length = length;
    d.n = static_cast<std::size_t>(base_classes * n_per_class);
    d.domain_id = target ? "target" : "source";
    d.x.resize(d.n * channels * length);
    std::vector<int> y(d.n);
    const double m = shift.magnitude;
    for (std::size_t i = 0; i < d.n; ++i) {
      const int k = static_cast<int>(i) % base_classes;
      y[i] = k;
      double phase = rng.uniform(0.0, 0.25);
      double amp = rng.uniform(0.9, 1.1);
      double sigma = 1.2;
      double warp = 0.0;
      // Class-coded burst at an unpredictable position and phase. It is
      // short enough that heavy temporal masking tends to wipe it out, so
      // masked copies lose part of the class evidence.
      const double burst_pos = rng.uniform(0.0, 0.75);
      const double burst_phase = rng.uniform(0.0, 6.283185307179586);
      if (target) {
        switch (shift.kind) {
          case ShiftKind::amplitude_scale: amp *= 1.0 + m; break;
          case ShiftKind::phase_shift: phase += m; break;
          case ShiftKind::time_warp: warp = m; break;
          case ShiftKind::additive_noise: sigma += m; break;
        }
      }
      for (std::size_t c = 0; c < channels; ++c) {
        const double cphase = phase + 0.1 * static_cast<double>(c);
        for (std::size_t t = 0; t < length; ++t) {
          double t01 = static_cast<double>(t) / static_cast<double>(length);
          // Smooth monotone warp of the time axis.
          t01 = t01 + warp * std::sin(3.141592653589793 * t01) / 3.141592653589793;
          double burst = 0.0;
          const double u = (t01 - burst_pos) / 0.25;
          if (u >= 0.0 && u < 1.0) {
            const double gate = std::sin(3.141592653589793 * u);
            const double bf = 9.0 + 2.0 * static_cast<double>(k);
            burst = gate * gate *
                    std::sin(6.283185307179586 * bf * t01 + burst_phase);
          }
          const double v = amp * detail::waveform(k, t01, cphase) + burst +
                           sigma * rng.normal();
          d.x[(i * channels + c) * length + t] = static_cast<T>(v);
        }
      }
    }
    d.y = std::move(y);
    return d;
  };

  auto src = gen(false, derive_seed(seed, "synth.source"));
  auto tgt = gen(true, derive_seed(seed ^ shift.seed, "synth.target"));
  return {std::move(src), std::move(tgt)};
}

// ---- normalization ----

struct ChannelStats {
  std::vector<double> mean, std;
};

// Per-channel z-score. When stats are omitted they are computed from the
// batch and returned for reuse (source stats applied to target).
template <class T>
ChannelStats normalize(DomainData<T>& d,
                       const std::optional<ChannelStats>& stats = {}) {
  const std::size_t C = d.channels, L = d.length, N = d.n;
  ChannelStats s;
  if (stats) {
    s = *stats;
    if (s.mean.size() != C)
      throw dimension_error("normalize: stats channel count mismatch");
  } else {
    s.mean.assign(C, 0.0);
    s.std.assign(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t t = 0; t < L; ++t)
          acc += static_cast<double>(d.x[(i * C + c) * L + t]);
      s.mean[c] = acc / static_cast<double>(N * L);
      double v = 0.0;
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t t = 0; t < L; ++t) {
          const double dd =
              static_cast<double>(d.x[(i * C + c) * L + t]) - s.mean[c];
          v += dd * dd;
        }
      s.std[c] = std::sqrt(v / static_cast<double>(N * L));
    }
  }
  const double eps = 1e-8;
  for (std::size_t c = 0; c < C; ++c) {
    const double inv = 1.0 / (s.std[c] > eps ? s.std[c] : eps);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t t = 0; t < L; ++t) {
        auto& v = d.x[(i * C + c) * L + t];
        v = static_cast<T>((static_cast<double>(v) - s.mean[c]) *
                           (s.std[c] > eps ? inv : 0.0));
      }
  }
  return s;
}

// Deterministic batch index iterator.
inline std::vector<std::vector<std::size_t>> batch_indices(std::size_t n,
                                                           std::size_t batch,
                                                           Rng* shuffle_rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle_rng) shuffle_rng->shuffle(order.begin(), order.end());
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch) {
    const std::size_t e = std::min(n, i + batch);
    out.emplace_back(order.begin() + static_cast<long>(i),
                     order.begin() + static_cast<long>(e));
  }
  return out;
}

}  // namespace mapu
