#include "cod2/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

namespace cod2 {
using json = nlohmann::json;

BatchSpec TrainConfig::effective_batch() const {
  BatchSpec b = batch;
  if (halve_batch && uses_generator()) {
    if (b.K >= 4)
      b.K /= 2;
    else if (b.P >= 4)
      b.P /= 2;
  }
  return b;
}

void TrainConfig::validate() const {
  batch.validate();
  if (steps <= 0) throw std::invalid_argument("steps must be > 0");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be > 0");
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
  if (!(decay_rate > 0.0)) throw std::invalid_argument("decay_rate must be > 0");
  if (clip_length < 2) throw std::invalid_argument("clip_length must be >= 2");
  if (ablation.low_level && (m < 1 || m > clip_length - 1))
    throw std::invalid_argument("m must lie in [1, clip_length - 1] (m=" + std::to_string(m) + ")");
  if (checkpoint_every < 1) throw std::invalid_argument("checkpoint_every must be >= 1");
  if (loss.margin < 0.0) throw std::invalid_argument("margin must be >= 0");
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"P", "subjects per batch"},
      {"K", "sequences per subject"},
      {"steps", "optimisation steps"},
      {"lr", "Adam learning rate"},
      {"weight_decay", "Adam weight decay"},
      {"decay_rate", "LR factor applied at 50% and 75% of steps"},
      {"m", "clean reference frames in the noise sequence"},
      {"clip_length", "frames per training clip"},
      {"loss_d_weight", "weight of L_D"},
      {"loss_g_weight", "weight of L_G"},
      {"triplet_weight", "weight of the triplet term inside L_D / L_G"},
      {"ce_weight", "weight of the cross-entropy term inside L_D / L_G"},
      {"margin", "triplet margin"},
      {"high_level", "identity (HCM) condition on"},
      {"low_level", "clean reference window on"},
      {"hcm.lambda_mode", "fixed_one | learnable_scalar | learnable_vector"},
      {"hcm.fusion", "hcm | addition | none"},
      {"hcm.epsilon", "min-max guard in the phase normalisation"},
      {"clean_pathway", "first_block_only | all_blocks"},
      {"window_position", "original | front"},
      {"detach_condition", "stop gradients from G into f_I"},
      {"share_heads", "L_G reuses the L_D heads"},
      {"halve_batch", "halve the batch when the generator is active"},
      {"seed", "single seed for all randomness"},
      {"checkpoint_every", "steps between checkpoints"},
      {"backbone", "extractor backbone (tinygait)"},
      {"widths", "backbone stage widths"},
      {"parts", "horizontal parts p"},
  };
  return keys;
}

json to_json(const TrainConfig& c) {
  return json{{"P", c.batch.P},
              {"K", c.batch.K},
              {"steps", c.steps},
              {"lr", c.lr},
              {"weight_decay", c.weight_decay},
              {"decay_rate", c.decay_rate},
              {"m", c.m},
              {"clip_length", c.clip_length},
              {"loss_d_weight", c.loss_d_weight},
              {"loss_g_weight", c.loss_g_weight},
              {"triplet_weight", c.loss.triplet},
              {"ce_weight", c.loss.ce},
              {"margin", c.loss.margin},
              {"high_level", c.ablation.high_level},
              {"low_level", c.ablation.low_level},
              {"hcm.lambda_mode", to_string(c.ablation.lambda_mode)},
              {"hcm.fusion", to_string(c.ablation.fusion)},
              {"hcm.epsilon", c.hcm_epsilon},
              {"clean_pathway", to_string(c.ablation.clean_pathway)},
              {"window_position", to_string(c.ablation.window_position)},
              {"detach_condition", c.detach_condition},
              {"share_heads", c.share_heads},
              {"halve_batch", c.halve_batch},
              {"seed", c.seed},
              {"checkpoint_every", c.checkpoint_every},
              {"backbone", c.extractor.backbone},
              {"widths", c.extractor.widths},
              {"parts", c.extractor.parts}};
}

TrainConfig apply_config(const TrainConfig& base, const json& patch) {
  if (!patch.is_object()) throw std::invalid_argument("config must be a JSON object");
  std::set<std::string> known;
  for (const auto& key : config_keys()) known.insert(key.name);
  for (const auto& [key, value] : patch.items())
    if (!known.count(key)) throw std::invalid_argument("unknown config key '" + key + "'");

  TrainConfig c = base;
  auto get = [&](const char* key, auto& field) {
    if (patch.contains(key)) field = patch.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  try {
    get("P", c.batch.P);
    get("K", c.batch.K);
    get("steps", c.steps);
    get("lr", c.lr);
    get("weight_decay", c.weight_decay);
    get("decay_rate", c.decay_rate);
    get("m", c.m);
    get("clip_length", c.clip_length);
    get("loss_d_weight", c.loss_d_weight);
    get("loss_g_weight", c.loss_g_weight);
    get("triplet_weight", c.loss.triplet);
    get("ce_weight", c.loss.ce);
    get("margin", c.loss.margin);
    get("high_level", c.ablation.high_level);
    get("low_level", c.ablation.low_level);
    if (patch.contains("hcm.lambda_mode")) c.ablation.lambda_mode = lambda_mode_from_string(patch.at("hcm.lambda_mode"));
    if (patch.contains("hcm.fusion")) c.ablation.fusion = fusion_from_string(patch.at("hcm.fusion"));
    get("hcm.epsilon", c.hcm_epsilon);
    if (patch.contains("clean_pathway")) c.ablation.clean_pathway = clean_pathway_from_string(patch.at("clean_pathway"));
    if (patch.contains("window_position"))
      c.ablation.window_position = window_position_from_string(patch.at("window_position"));
    get("detach_condition", c.detach_condition);
    get("share_heads", c.share_heads);
    get("halve_batch", c.halve_batch);
    get("seed", c.seed);
    get("checkpoint_every", c.checkpoint_every);
    get("backbone", c.extractor.backbone);
    get("widths", c.extractor.widths);
    get("parts", c.extractor.parts);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("bad config value: ") + e.what());
  }
  return c;
}

TrainConfig load_config_file(const std::string& path) {
  std::ifstream file(path);
  if (!file) throw std::runtime_error("cannot read config " + path);
  json patch;
  try {
    patch = json::parse(file);
  } catch (const json::exception& e) {
    throw std::invalid_argument("malformed config " + path + ": " + e.what());
  }
  return apply_config(TrainConfig{}, patch);
}

}  // namespace cod2
