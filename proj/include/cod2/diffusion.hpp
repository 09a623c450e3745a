#pragma once

// Generative module G: noise-sequence construction with a clean reference window, the
// Block/Pool/HCM/UpSample generator and DDPM forward-process utilities.

#include <torch/torch.h>

#include <string>
#include <utility>
#include <vector>

#include "cod2/hcm.hpp"

namespace cod2 {

/// Linear-in-t variance schedule; t is 1-based, alpha_bar[t-1] = prod_{s<=t} (1 - beta_s).
struct VarianceSchedule {
  std::vector<double> betas;
  std::vector<double> alpha_bars;

  static VarianceSchedule linear(double beta_start = 1e-4, double beta_end = 0.02, int64_t steps = 50);
  static VarianceSchedule from_betas(std::vector<double> betas);
  int64_t steps() const { return static_cast<int64_t>(betas.size()); }
  double alpha_bar(int64_t t) const;
};

/// Closed-form marginal of the Markov noising chain: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
torch::Tensor forward_noising(const torch::Tensor& x0, int64_t t, const VarianceSchedule& schedule,
                              torch::Generator& rng);

enum class WindowPosition { original, front };
enum class CleanPathway { first_block_only, all_blocks };
std::string to_string(WindowPosition position);
std::string to_string(CleanPathway pathway);
WindowPosition window_position_from_string(const std::string& name);
CleanPathway clean_pathway_from_string(const std::string& name);

/// X_t: m clean reference frames spliced with T - m standard-normal frames along time.
struct NoiseSequence {
  torch::Tensor frames;               // (B, 1, T, H, W)
  std::vector<int64_t> source_start;  // k per sample: window taken from X_0[k : k + m]
  std::vector<int64_t> slot_start;    // where the window sits inside `frames`
  int64_t window_len = 0;             // m; 0 only for pure_noise_sequence

  int64_t length() const { return frames.size(2); }
  bool has_reference() const { return window_len > 0; }
  /// (B, 1, m, H, W) clean frames as placed in `frames`.
  torch::Tensor reference() const;
};

NoiseSequence build_noise_sequence(const torch::Tensor& x0, int64_t m, torch::Generator& rng,
                                   WindowPosition position = WindowPosition::original);

/// All-Gaussian X_t with no reference window (low-level condition disabled).
NoiseSequence pure_noise_sequence(const torch::Tensor& x0, torch::Generator& rng);

/// Replaces temporal slots [slot_start[b], slot_start[b] + m) of each sample with the clean
/// activations; every other slot is returned untouched.
torch::Tensor clean_slot_overwrite(const torch::Tensor& activations, const torch::Tensor& clean,
                                   const std::vector<int64_t>& slot_start);

struct GeneratorOptions {
  int64_t feature_channels = 64;  // C of f_I
  int64_t parts = 16;              // p of f_I
  LambdaMode lambda_mode = LambdaMode::learnable_vector;
  Fusion fusion = Fusion::hcm;
  CleanPathway clean_pathway = CleanPathway::all_blocks;
  double leaky_slope = 0.01;
  double epsilon = 1e-8;
  bool check_shapes = false;  // assert every layer's output shape against the ladder
};

/// One row of the generator's layer ladder.
struct LadderRow {
  std::string name;
  std::vector<int64_t> shape;  // per-sample (C, T, H, W)
};

/// Expected per-sample output shapes for a clip of T frames at 64x44.
std::vector<LadderRow> generator_ladder(int64_t frames);

struct GeneratorTrace {
  std::vector<LadderRow> rows;
  std::vector<torch::Tensor> block_outputs;  // output of each of the six Blocks
};

/// Two 3D convolutions, each followed by batch norm and LeakyReLU.
class GeneratorBlockImpl : public torch::nn::Module {
 public:
  GeneratorBlockImpl(int64_t in, int64_t mid, int64_t out, std::vector<int64_t> kernel1, std::vector<int64_t> kernel2,
                     double slope);

  torch::nn::Conv3d conv1{nullptr}, conv2{nullptr};
  torch::nn::BatchNorm3d bn1{nullptr}, bn2{nullptr};
  double slope;
};
TORCH_MODULE(GeneratorBlock);

class GenerativeModuleImpl : public torch::nn::Module {
 public:
  explicit GenerativeModuleImpl(const GeneratorOptions& options);

  /// One-shot generation X_hat_0 = G(X_t, f_I), values in [0,1].
  torch::Tensor forward(const NoiseSequence& noise, const torch::Tensor& identity_feature,
                        GeneratorTrace* trace = nullptr);

  int64_t hcm_count() const { return static_cast<int64_t>(hcms_.size()); }
  const std::vector<HighLevelControl>& hcms() const { return hcms_; }
  const GeneratorOptions& options() const { return options_; }

 private:
  GeneratorOptions options_;
  std::vector<GeneratorBlock> blocks_;
  std::vector<HighLevelControl> hcms_;
};
TORCH_MODULE(GenerativeModule);

}  // namespace cod2
