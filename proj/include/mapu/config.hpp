#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "mapu/common.hpp"
#include "mapu/pipeline.hpp"

namespace mapu {

// Flat key=value config file; '#' starts a comment. Keys use the dotted
// names from the module interfaces (mask.num_blocks, loss.alpha, ...).
inline std::map<std::string, std::string> parse_config_file(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open config file " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto trim = [](std::string s) {
      const char* ws = " \t\r\n";
      auto b = s.find_first_not_of(ws);
      if (b == std::string::npos) return std::string();
      auto e = s.find_last_not_of(ws);
      return s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw config_error(path.string() + ":" + std::to_string(lineno) +
                         ": expected key=value");
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

// Applies config-file keys onto a TrainConfig (defaults already in place;
// CLI flags are applied afterwards and win).
inline void apply_config(TrainConfig& cfg,
                         const std::map<std::string, std::string>& kv) {
  auto geti = [](const std::string& v) { return std::stoi(v); };
  auto getd = [](const std::string& v) { return std::stod(v); };
  auto getu = [](const std::string& v) { return std::stoull(v); };
  for (const auto& [k, v] : kv) {
    try {
      if (k == "epochs") cfg.epochs = geti(v);
      else if (k == "batch_size") cfg.batch_size = geti(v);
      else if (k == "lr") cfg.lr = getd(v);
      else if (k == "seed") cfg.seed = getu(v);
      else if (k == "seeds_per_scenario") cfg.seeds_per_scenario = geti(v);
      else if (k == "mask.num_blocks")
        cfg.mask.num_blocks = static_cast<std::size_t>(geti(v));
      else if (k == "mask.ratio") cfg.mask.mask_ratio = getd(v);
      else if (k == "loss.alpha") cfg.weights.alpha = getd(v);
      else if (k == "loss.shot_im_weight") cfg.weights.shot_im_weight = getd(v);
      else if (k == "loss.shot_pl_weight") cfg.weights.shot_pl_weight = getd(v);
      else if (k == "sfda") cfg.sfda = parse_sfda(v);
      else if (k == "checked") cfg.checked = (v == "1" || v == "true");
      else if (k == "carry_bn_stats")
        cfg.carry_bn_stats = (v == "1" || v == "true");
      else if (k == "pretrain_imputation")
        cfg.pretrain_imputation = (v == "1" || v == "true");
      else throw config_error("unknown config key: " + k);
    } catch (const std::invalid_argument&) {
      throw config_error("bad value for config key " + k + ": " + v);
    }
  }
}

inline nlohmann::json config_json(const TrainConfig& cfg) {
  return {{"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"lr", cfg.lr},
          {"seed", cfg.seed},
          {"seeds_per_scenario", cfg.seeds_per_scenario},
          {"mask.num_blocks", cfg.mask.num_blocks},
          {"mask.ratio", cfg.mask.mask_ratio},
          {"loss.alpha", cfg.weights.alpha},
          {"loss.shot_im_weight", cfg.weights.shot_im_weight},
          {"loss.shot_pl_weight", cfg.weights.shot_pl_weight},
          {"sfda", cfg.sfda == SfdaMethod::shot ? "shot" : "none"},
          {"checked", cfg.checked},
          {"carry_bn_stats", cfg.carry_bn_stats},
          {"pretrain_imputation", cfg.pretrain_imputation}};
}

}  // namespace mapu
