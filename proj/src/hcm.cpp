#include "cod2/hcm.hpp"

#include <numbers>
#include <stdexcept>

namespace cod2 {
namespace F = torch::nn::functional;

std::string to_string(LambdaMode mode) {
  switch (mode) {
    case LambdaMode::fixed_one: return "fixed_one";
    case LambdaMode::learnable_scalar: return "learnable_scalar";
    case LambdaMode::learnable_vector: return "learnable_vector";
  }
  throw std::logic_error("unknown lambda mode");
}

std::string to_string(Fusion fusion) {
  switch (fusion) {
    case Fusion::hcm: return "hcm";
    case Fusion::addition: return "addition";
    case Fusion::none: return "none";
  }
  throw std::logic_error("unknown fusion");
}

LambdaMode lambda_mode_from_string(const std::string& name) {
  if (name == "fixed_one") return LambdaMode::fixed_one;
  if (name == "learnable_scalar") return LambdaMode::learnable_scalar;
  if (name == "learnable_vector") return LambdaMode::learnable_vector;
  throw std::invalid_argument("unknown lambda mode '" + name + "' (fixed_one | learnable_scalar | learnable_vector)");
}

Fusion fusion_from_string(const std::string& name) {
  if (name == "hcm") return Fusion::hcm;
  if (name == "addition") return Fusion::addition;
  if (name == "none") return Fusion::none;
  throw std::invalid_argument("unknown fusion '" + name + "' (hcm | addition | none)");
}

IdentityProjectionImpl::IdentityProjectionImpl(int64_t feature_channels, int64_t parts, int64_t out_channels) {
  weight = register_parameter("weight", torch::empty({parts, feature_channels, out_channels}));
  torch::nn::init::xavier_uniform_(weight);
  bias = register_parameter("bias", torch::zeros({parts, out_channels}));
}

torch::Tensor IdentityProjectionImpl::forward(const torch::Tensor& identity_feature) {
  TORCH_CHECK(identity_feature.dim() == 3 && identity_feature.size(1) == weight.size(1) &&
                  identity_feature.size(2) == weight.size(0),
              "identity projection expects (B, ", weight.size(1), ", ", weight.size(0), ") features");
  // (p, B, C) @ (p, C, C') -> (p, B, C')
  auto per_part = torch::bmm(identity_feature.permute({2, 0, 1}), weight) + bias.unsqueeze(1);
  return per_part.mean(0);
}

void IdentityProjectionImpl::set_identity() {
  TORCH_CHECK(weight.size(1) == weight.size(2), "set_identity needs C == C'");
  torch::NoGradGuard no_grad;
  weight.copy_(torch::eye(weight.size(1), weight.options()).expand_as(weight));
  bias.zero_();
}

torch::Tensor conv3d_same(const torch::Tensor& x, const torch::nn::Conv3d& conv, TemporalPadding temporal) {
  const auto& k = conv->options.kernel_size();
  const int64_t pt = (*k)[0] / 2, ph = (*k)[1] / 2, pw = (*k)[2] / 2;
  const torch::Tensor bias = conv->options.bias() ? conv->bias : torch::Tensor();
  if (temporal == TemporalPadding::zeros || pt == 0)
    return F::conv3d(x, conv->weight, F::Conv3dFuncOptions().bias(bias).padding({pt, ph, pw}));
  const int64_t T = x.size(2);
  auto padded = torch::cat({x.narrow(2, 0, 1).expand({-1, -1, pt, -1, -1}), x,
                            x.narrow(2, T - 1, 1).expand({-1, -1, pt, -1, -1})},
                           2);
  return F::conv3d(padded, conv->weight, F::Conv3dFuncOptions().bias(bias).padding({0, ph, pw}));
}

torch::Tensor min_max_normalize(const torch::Tensor& x, double epsilon) {
  const int64_t B = x.size(0);
  std::vector<int64_t> stat_shape(static_cast<size_t>(x.dim()), 1);
  stat_shape[0] = B;
  const auto flat = x.reshape({B, -1});
  const auto lo = std::get<0>(flat.min(1)).view(stat_shape);
  const auto hi = std::get<0>(flat.max(1)).view(stat_shape);
  const auto range = hi - lo;
  const auto valid = range > epsilon;
  const auto safe_range = torch::where(valid, range, torch::ones_like(range));
  const auto normed = torch::where(valid, (x - lo) / safe_range, torch::zeros_like(x));
  return normed;
}

torch::Tensor min_max_phase(const torch::Tensor& x, double epsilon) {
  return min_max_normalize(x, epsilon) * (2.0 * std::numbers::pi);
}

torch::Tensor modulate(const torch::Tensor& x, const torch::Tensor& phase, const torch::Tensor& lambda) {
  TORCH_CHECK(x.sizes() == phase.sizes(), "modulate: activation and phase shapes differ");
  std::vector<int64_t> lambda_shape(static_cast<size_t>(x.dim()), 1);
  lambda_shape[1] = lambda.numel();
  TORCH_CHECK(lambda.numel() == 1 || lambda.numel() == x.size(1), "modulate: lambda must have 1 or C entries");
  const auto scale = lambda.reshape(lambda_shape);
  return x * torch::cos(phase) + scale * x * torch::sin(phase);
}

HighLevelControlImpl::HighLevelControlImpl(int64_t channels, int64_t feature_channels, int64_t parts,
                                           LambdaMode lambda_mode, Fusion fusion, double epsilon)
    : channels_(channels), lambda_mode_(lambda_mode), fusion_(fusion), epsilon_(epsilon) {
  if (fusion_ == Fusion::none) return;
  projection = register_module("projection", IdentityProjection(feature_channels, parts, channels));
  if (fusion_ == Fusion::addition) return;
  conv = register_module("conv", torch::nn::Conv3d(torch::nn::Conv3dOptions(channels, channels, 3).padding(1)));
  switch (lambda_mode_) {
    case LambdaMode::fixed_one:
      lambda_ = register_buffer("lambda", torch::ones({channels}));
      break;
    case LambdaMode::learnable_scalar:
      lambda_ = register_parameter("lambda", torch::ones({1}));
      break;
    case LambdaMode::learnable_vector:
      lambda_ = register_parameter("lambda", torch::ones({channels}));
      break;
  }
}

torch::Tensor HighLevelControlImpl::phase(const torch::Tensor& x, const torch::Tensor& identity_feature,
                                          TemporalPadding temporal) {
  if (fusion_ != Fusion::hcm) throw std::logic_error("phase is only defined for hcm fusion");
  TORCH_CHECK(x.dim() == 5 && x.size(1) == channels_, "HCM expects (B, ", channels_, ", T, H, W) activations");
  const auto embedding = projection->forward(identity_feature).view({x.size(0), channels_, 1, 1, 1});
  return min_max_phase(conv3d_same(x * embedding, conv, temporal), epsilon_);
}

torch::Tensor HighLevelControlImpl::forward(const torch::Tensor& x, const torch::Tensor& identity_feature,
                                            TemporalPadding temporal) {
  switch (fusion_) {
    case Fusion::none:
      return x;
    case Fusion::addition:
      return x + projection->forward(identity_feature).view({x.size(0), channels_, 1, 1, 1});
    case Fusion::hcm:
      return modulate(x, phase(x, identity_feature, temporal), lambda_);
  }
  throw std::logic_error("unknown fusion");
}

torch::Tensor HighLevelControlImpl::lambda() const {
  if (!lambda_.defined()) return torch::ones({channels_});
  return lambda_.numel() == 1 ? lambda_.expand({channels_}) : lambda_;
}

int64_t HighLevelControlImpl::trainable_lambda_count() const {
  if (!lambda_.defined() || lambda_mode_ == LambdaMode::fixed_one) return 0;
  return lambda_.numel();
}

}  // namespace cod2
