#pragma once

// High-level control: identity-conditioned sinusoidal phase modulation of generator activations.
//
//   f_d  = 2*pi * Norm(Conv(x * S-FC(f_I)))          (Norm: per-sample min-max to [0,1])
//   x'   = x * cos(f_d) + lambda * x * sin(f_d)      (lambda: one value per channel)

#include <torch/torch.h>

#include <string>

namespace cod2 {

enum class LambdaMode { fixed_one, learnable_scalar, learnable_vector };
enum class Fusion { hcm, addition, none };
enum class TemporalPadding { zeros, replicate };

std::string to_string(LambdaMode mode);
std::string to_string(Fusion fusion);
LambdaMode lambda_mode_from_string(const std::string& name);
Fusion fusion_from_string(const std::string& name);

/// Per-part linear map C -> C' followed by the mean over parts: (B, C, p) -> (B, C').
class IdentityProjectionImpl : public torch::nn::Module {
 public:
  IdentityProjectionImpl(int64_t feature_channels, int64_t parts, int64_t out_channels);

  torch::Tensor forward(const torch::Tensor& identity_feature);
  void set_identity();

  torch::Tensor weight;  // (p, C, C')
  torch::Tensor bias;    // (p, C')
};
TORCH_MODULE(IdentityProjection);

/// 3D convolution with "same" spatial zero padding and the requested temporal padding.
torch::Tensor conv3d_same(const torch::Tensor& x, const torch::nn::Conv3d& conv, TemporalPadding temporal);

/// Per-sample min-max normalisation to [0,1]; samples whose range is <= epsilon map to zeros.
torch::Tensor min_max_normalize(const torch::Tensor& x, double epsilon);

/// Per-sample min-max normalisation scaled to [0, 2*pi]. Samples whose range is <= epsilon map
/// to an all-zero phase.
torch::Tensor min_max_phase(const torch::Tensor& x, double epsilon);

/// x * cos(phase) + lambda * x * sin(phase); lambda has one entry per channel (dim 1) or one
/// entry broadcast to all channels.
torch::Tensor modulate(const torch::Tensor& x, const torch::Tensor& phase, const torch::Tensor& lambda);

class HighLevelControlImpl : public torch::nn::Module {
 public:
  HighLevelControlImpl(int64_t channels, int64_t feature_channels, int64_t parts, LambdaMode lambda_mode,
                       Fusion fusion, double epsilon = 1e-8);

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& identity_feature,
                        TemporalPadding temporal = TemporalPadding::zeros);
  /// Phase field f_d for (B, C', T, H, W) activations.
  torch::Tensor phase(const torch::Tensor& x, const torch::Tensor& identity_feature,
                      TemporalPadding temporal = TemporalPadding::zeros);
  /// Channel scaling as a (C',) tensor, whatever the mode.
  torch::Tensor lambda() const;
  int64_t trainable_lambda_count() const;

  LambdaMode lambda_mode() const { return lambda_mode_; }
  Fusion fusion() const { return fusion_; }
  int64_t channels() const { return channels_; }

  IdentityProjection projection{nullptr};
  torch::nn::Conv3d conv{nullptr};

 private:
  int64_t channels_;
  LambdaMode lambda_mode_;
  Fusion fusion_;
  double epsilon_;
  torch::Tensor lambda_;
};
TORCH_MODULE(HighLevelControl);

}  // namespace cod2
