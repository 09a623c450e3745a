#pragma once

// Model bundle (D's backbone + heads, optionally G and its heads) and the checkpoint container.
//
// A checkpoint is a pickled dictionary:
//   format   "cod2-checkpoint"
//   version  int
//   meta     JSON string (backbone, C, p, num_classes, step, has_generator, config, dataset hash)
//   tensors  {"backbone.<name>" | "heads.<name>" | "gen_heads.<name>" | "generator.<name>": tensor}
//   optimizer (optional) uint8 tensor holding the serialized optimizer state

#include <torch/torch.h>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cod2/config.hpp"
#include "cod2/diffusion.hpp"
#include "cod2/extractor.hpp"

namespace cod2 {

inline constexpr int64_t kCheckpointVersion = 1;

struct ModelBundle {
  GaitBackbone backbone;
  BNNeckHeads heads{nullptr};
  BNNeckHeads gen_heads{nullptr};  // only when share_heads is off
  GenerativeModule generator{nullptr};

  /// Parameters are initialised from `config.seed`.
  static ModelBundle build(const TrainConfig& config, int64_t num_classes, bool with_generator);

  bool has_generator() const { return static_cast<bool>(generator); }
  /// Heads supervising f_hat (the shared heads unless a separate set exists).
  BNNeckHeads& generated_heads() { return gen_heads ? gen_heads : heads; }
  std::vector<torch::Tensor> parameters() const;
  void train(bool on);
};

struct CheckpointMeta {
  std::string backbone;
  int64_t channels = 0;
  int64_t parts = 0;
  int64_t num_classes = 0;
  int64_t step = 0;
  bool has_generator = false;
  TrainConfig config;
  std::string dataset_hash;
};

void save_checkpoint(const std::filesystem::path& path, const ModelBundle& models, const CheckpointMeta& meta,
                     const torch::optim::Optimizer* optimizer = nullptr);

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);

/// Builds a bundle from the checkpoint's own config and loads its tensors. With
/// `with_generator` false the generator is neither built nor read.
ModelBundle load_checkpoint(const std::filesystem::path& path, bool with_generator, CheckpointMeta* meta = nullptr);

/// Loads into existing models (resume). Fails naming every missing tensor or shape mismatch.
void load_checkpoint_into(const std::filesystem::path& path, ModelBundle& models, torch::optim::Optimizer* optimizer,
                          CheckpointMeta* meta = nullptr);

/// Copy of a checkpoint without generator tensors or optimizer state.
void strip_generator(const std::filesystem::path& in, const std::filesystem::path& out);

}  // namespace cod2
