#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "mapu/data.hpp"
#include "mapu/nn.hpp"
#include "mapu/serialize.hpp"

namespace mapu {

struct ArchMeta {
  std::size_t in_channels = 1;
  std::size_t seq_len = 32;
  std::size_t num_classes = 2;
  std::size_t feature_dim = 128;
  std::size_t imputer_hidden = 128;
};

// Encoder f (3 conv blocks, channels C -> 64 -> 128 -> 128, each block
// conv(k=8, stride 1, pad 4) -> batchnorm -> relu -> maxpool/2), classifier
// g (temporal mean pool -> linear 128 -> K), imputer j (tanh RNN 128 -> 128
// plus a per-timestep linear projection back to the feature dim).
template <class T>
struct ModelBundle {
  ArchMeta meta;
  Conv1d<T> conv1, conv2, conv3;
  BatchNorm1d<T> bn1, bn2, bn3;
  Linear<T> classifier;
  Rnn<T> imputer_rnn;
  Linear<T> imputer_proj;

  ModelBundle() = default;
  ModelBundle(const ArchMeta& m, Rng& rng) : meta(m) {
    if (m.seq_len < 8)
      throw config_error("encoder needs seq_len >= 8 (three pool-by-2 stages)");
    conv1 = Conv1d<T>(m.in_channels, 64, 8, 1, 4, rng);
    bn1 = BatchNorm1d<T>(64);
    conv2 = Conv1d<T>(64, 128, 8, 1, 4, rng);
    bn2 = BatchNorm1d<T>(128);
    conv3 = Conv1d<T>(128, meta.feature_dim, 8, 1, 4, rng);
    bn3 = BatchNorm1d<T>(meta.feature_dim);
    classifier = Linear<T>(meta.feature_dim, m.num_classes, rng);
    imputer_rnn = Rnn<T>(meta.feature_dim, m.imputer_hidden, rng);
    imputer_proj = Linear<T>(m.imputer_hidden, meta.feature_dim, rng);
  }

  std::size_t feature_len() const {
    std::size_t l = meta.seq_len;
    for (int i = 0; i < 3; ++i) l = (l + 1) / 2;  // conv adds 1, pool halves
    return l;
  }

  // Full feature sequence H: [B, 128, T'].
  Tensor<T> encode(const TimeSeriesBatch<T>& x, bool train) {
    const Shape& s = x.values.shape();
    if (s.size() != 3 || s[1] != meta.in_channels || s[2] != meta.seq_len)
      throw dimension_error("encode: batch shape " + shape_str(s) +
                            " does not match arch [*, " +
                            std::to_string(meta.in_channels) + ", " +
                            std::to_string(meta.seq_len) + "]");
    auto h = max_pool1d_2(relu(bn1.forward(conv1.forward(x.values), train)));
    h = max_pool1d_2(relu(bn2.forward(conv2.forward(h), train)));
    h = max_pool1d_2(relu(bn3.forward(conv3.forward(h), train)));
    return h;
  }

  // Temporal mean pool: [B, 128, T'] -> [B, 128].
  Tensor<T> pool(const Tensor<T>& h) const { return mean_axis(h, 2, false); }

  // Unnormalized logits [B, K].
  Tensor<T> classify(const Tensor<T>& h) const {
    return classifier.forward(pool(h));
  }

  // Imputed feature sequence, same shape as the input features.
  Tensor<T> impute(const Tensor<T>& h_masked) const {
    const std::size_t B = h_masked.shape()[0], F = h_masked.shape()[1],
                      Tp = h_masked.shape()[2];
    auto seq = transpose_12(h_masked);                       // [B, T', F]
    auto hidden = imputer_rnn.forward(seq);                  // [B, T', H]
    auto flat = reshape(hidden, {B * Tp, meta.imputer_hidden});
    auto proj = imputer_proj.forward(flat);                  // [B*T', F]
    return transpose_12(reshape(proj, {B, Tp, F}));          // [B, F, T']
  }

  ParamList<T> encoder_params() {
    ParamList<T> out;
    conv1.collect("encoder.conv1", out);
    bn1.collect("encoder.bn1", out);
    conv2.collect("encoder.conv2", out);
    bn2.collect("encoder.bn2", out);
    conv3.collect("encoder.conv3", out);
    bn3.collect("encoder.bn3", out);
    return out;
  }

  ParamList<T> classifier_params() {
    ParamList<T> out;
    classifier.collect("classifier", out);
    return out;
  }

  ParamList<T> imputer_params() {
    ParamList<T> out;
    imputer_rnn.collect("imputer.rnn", out);
    imputer_proj.collect("imputer.proj", out);
    return out;
  }

  ParamList<T> all_params() {
    ParamList<T> out = encoder_params();
    for (auto& p : classifier_params()) out.push_back(p);
    for (auto& p : imputer_params()) out.push_back(p);
    return out;
  }

  // Snapshot of every parameter's raw values (used by trajectory and
  // frozen-module checks).
  std::vector<std::vector<T>> snapshot(ParamList<T> params) {
    std::vector<std::vector<T>> out;
    for (auto& p : params) out.push_back(p.tensor.value());
    return out;
  }

  // BN running statistics ride along in the same container as constant
  // tensors so a reloaded bundle evaluates identically.
  ParamList<T> buffer_tensors() {
    ParamList<T> out;
    auto wrap = [](const std::string& name, const std::vector<T>& v) {
      return NamedParam<T>{name, Tensor<T>({v.size()}, v)};
    };
    out.push_back(wrap("encoder.bn1.running_mean", bn1.running_mean));
    out.push_back(wrap("encoder.bn1.running_var", bn1.running_var));
    out.push_back(wrap("encoder.bn2.running_mean", bn2.running_mean));
    out.push_back(wrap("encoder.bn2.running_var", bn2.running_var));
    out.push_back(wrap("encoder.bn3.running_mean", bn3.running_mean));
    out.push_back(wrap("encoder.bn3.running_var", bn3.running_var));
    return out;
  }

  void reset_bn_stats() {
    for (auto* bn : {&bn1, &bn2, &bn3}) {
      std::fill(bn->running_mean.begin(), bn->running_mean.end(), T(0));
      std::fill(bn->running_var.begin(), bn->running_var.end(), T(1));
    }
  }

  void restore_buffers(const ParamList<T>& bufs) {
    auto get = [&](const std::string& name) -> const std::vector<T>& {
      for (const auto& p : bufs)
        if (p.name == name) return p.tensor.value();
      throw io_error("missing buffer " + name);
    };
    bn1.running_mean = get("encoder.bn1.running_mean");
    bn1.running_var = get("encoder.bn1.running_var");
    bn2.running_mean = get("encoder.bn2.running_mean");
    bn2.running_var = get("encoder.bn2.running_var");
    bn3.running_mean = get("encoder.bn3.running_mean");
    bn3.running_var = get("encoder.bn3.running_var");
  }

  void save(const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    auto params = all_params();
    for (auto& p : buffer_tensors()) params.push_back(p);
    save_params(dir / "params.mapu", params);
    nlohmann::json j;
    j["in_channels"] = meta.in_channels;
    j["seq_len"] = meta.seq_len;
    j["num_classes"] = meta.num_classes;
    j["feature_dim"] = meta.feature_dim;
    j["imputer_hidden"] = meta.imputer_hidden;
    std::ofstream out(dir / "arch.json");
    out << j.dump(2) << "\n";
    if (!out) throw io_error("cannot write " + (dir / "arch.json").string());
  }

  static ModelBundle load(const std::filesystem::path& dir) {
    std::ifstream in(dir / "arch.json");
    if (!in) throw io_error("missing " + (dir / "arch.json").string());
    nlohmann::json j;
    in >> j;
    ArchMeta m;
    m.in_channels = j.at("in_channels").get<std::size_t>();
    m.seq_len = j.at("seq_len").get<std::size_t>();
    m.num_classes = j.at("num_classes").get<std::size_t>();
    m.feature_dim = j.at("feature_dim").get<std::size_t>();
    m.imputer_hidden = j.at("imputer_hidden").get<std::size_t>();
    Rng rng(0);
    ModelBundle b(m, rng);
    auto params = b.all_params();
    auto bufs = b.buffer_tensors();
    for (auto& p : bufs) params.push_back(p);
    load_params(dir / "params.mapu", params);
    ParamList<T> loaded_bufs(params.end() - 6, params.end());
    b.restore_buffers(loaded_bufs);
    return b;
  }
};

}  // namespace mapu
