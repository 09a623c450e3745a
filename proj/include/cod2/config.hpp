#pragma once

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

#include "cod2/data_synth.hpp"
#include "cod2/diffusion.hpp"
#include "cod2/extractor.hpp"
#include "cod2/hcm.hpp"

namespace cod2 {

struct AblationFlags {
  bool high_level = true;
  bool low_level = true;
  LambdaMode lambda_mode = LambdaMode::learnable_vector;
  Fusion fusion = Fusion::hcm;
  CleanPathway clean_pathway = CleanPathway::all_blocks;
  WindowPosition window_position = WindowPosition::original;
};

struct TrainConfig {
  BatchSpec batch;
  int64_t steps = 5000;
  double lr = 1e-4;
  double weight_decay = 5e-4;
  double decay_rate = 0.1;
  int64_t m = 5;
  int64_t clip_length = 30;
  double loss_d_weight = 1.0;
  double loss_g_weight = 1.0;
  LossWeights loss;  // triplet / ce weights and margin, shared by L_D and L_G
  AblationFlags ablation;
  double hcm_epsilon = 1e-8;
  bool detach_condition = false;
  bool share_heads = true;
  bool halve_batch = false;  // K/2 (or P/2) when the generator is active
  uint64_t seed = 1;
  int64_t checkpoint_every = 1000;
  ExtractorOptions extractor;

  bool uses_generator() const { return ablation.high_level || ablation.low_level; }
  /// Fusion actually wired into the generator (none when the high-level condition is off).
  Fusion effective_fusion() const { return ablation.high_level ? ablation.fusion : Fusion::none; }
  /// Batch used per step after optional halving.
  BatchSpec effective_batch() const;
  void validate() const;
};

/// Flat key namespace, e.g. {"P": 8, "hcm.lambda_mode": "learnable_vector", ...}.
nlohmann::json to_json(const TrainConfig& config);
/// Overlays the keys present in `patch` on `base`; unknown keys are rejected.
TrainConfig apply_config(const TrainConfig& base, const nlohmann::json& patch);
TrainConfig load_config_file(const std::string& path);

struct ConfigKey {
  std::string name;
  std::string description;
};
const std::vector<ConfigKey>& config_keys();

}  // namespace cod2
