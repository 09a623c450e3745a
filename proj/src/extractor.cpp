#include "cod2/extractor.hpp"

#include <set>
#include <sstream>
#include <stdexcept>

#include "cod2/data_synth.hpp"

namespace cod2 {
namespace F = torch::nn::functional;

namespace {

std::string shape_string(const torch::Tensor& t) {
  std::ostringstream out;
  out << t.sizes();
  return out.str();
}

}  // namespace

torch::Tensor spatial_max_pool(const torch::Tensor& x) {
  const auto s = x.sizes();
  auto flat = x.reshape({s[0], s[1] * s[2], s[3], s[4]});
  auto pooled = F::max_pool2d(flat, F::MaxPool2dFuncOptions(2).stride(2));
  return pooled.reshape({s[0], s[1], s[2], pooled.size(2), pooled.size(3)});
}

TinyGaitImpl::TinyGaitImpl(const ExtractorOptions& options)
    : widths_(options.widths), parts_(options.parts), slope_(options.leaky_slope) {
  if (widths_.size() != 3) throw std::invalid_argument("tinygait needs exactly three stage widths");
  if (parts_ < 1 || (kFrameHeight / 4) % parts_ != 0)
    throw std::invalid_argument("tinygait parts must divide the pooled height " + std::to_string(kFrameHeight / 4));
  int64_t in = 1;
  for (size_t i = 0; i < widths_.size(); ++i) {
    auto conv = torch::nn::Conv3dOptions(in, widths_[i], 3).padding(1).bias(false);
    if (i == 0) conv.stride({1, 2, 2});
    convs_.push_back(register_module("conv" + std::to_string(i + 1), torch::nn::Conv3d(conv)));
    norms_.push_back(register_module("bn" + std::to_string(i + 1), torch::nn::BatchNorm3d(widths_[i])));
    in = widths_[i];
  }
}

torch::Tensor TinyGaitImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 5 || x.size(1) != 1 || x.size(3) != kFrameHeight || x.size(4) != kFrameWidth)
    throw std::invalid_argument("extractor expects (B, 1, T, 64, 44), got " + shape_string(x));
  auto h = x;
  for (size_t i = 0; i < convs_.size(); ++i) {
    h = F::leaky_relu(norms_[i]->forward(convs_[i]->forward(h)), F::LeakyReLUFuncOptions().negative_slope(slope_));
    if (i == 0) h = spatial_max_pool(h);
  }
  // temporal max-pool: (B, C, T, H, W) -> (B, C, H, W)
  h = std::get<0>(h.max(2));
  const int64_t B = h.size(0), C = h.size(1), H = h.size(2), W = h.size(3);
  auto strips = h.reshape({B, C, parts_, (H / parts_) * W});
  return torch::cat({std::get<0>(strips.max(3)), strips.mean(3)}, 1);
}

GaitBackbone make_backbone(const ExtractorOptions& options) {
  if (options.backbone == "tinygait") return std::make_shared<TinyGaitImpl>(options);
  throw std::invalid_argument("unknown backbone '" + options.backbone + "'");
}

SeparateFCImpl::SeparateFCImpl(int64_t parts, int64_t in_features, int64_t out_features, bool with_bias) {
  weight = register_parameter("weight", torch::empty({parts, in_features, out_features}));
  torch::nn::init::xavier_uniform_(weight);
  if (with_bias) bias = register_parameter("bias", torch::zeros({parts, out_features}));
}

torch::Tensor SeparateFCImpl::forward(const torch::Tensor& x) {
  // (B, in, p) -> (p, B, in) @ (p, in, out) -> (p, B, out) -> (B, out, p)
  auto out = torch::bmm(x.permute({2, 0, 1}), weight);
  if (bias.defined()) out = out + bias.unsqueeze(1);
  return out.permute({1, 2, 0});
}

void SeparateFCImpl::set_identity() {
  if (weight.size(1) != weight.size(2)) throw std::logic_error("set_identity needs a square S-FC");
  torch::NoGradGuard no_grad;
  weight.copy_(torch::eye(weight.size(1), weight.options()).expand_as(weight));
  if (bias.defined()) bias.zero_();
}

BNNeckHeadsImpl::BNNeckHeadsImpl(int64_t channels, int64_t parts, int64_t num_classes)
    : channels_(channels), parts_(parts), num_classes_(num_classes) {
  fc = register_module("fc", SeparateFC(parts, channels, channels));
  bn = register_module("bn", torch::nn::BatchNorm1d(channels * parts));
  if (num_classes > 0) classifier = register_module("classifier", SeparateFC(parts, channels, num_classes));
}

HeadOutput BNNeckHeadsImpl::forward(const torch::Tensor& features) {
  if (is_training() && num_classes_ <= 0) throw std::logic_error("BNNeck heads: num_classes is unset in training mode");
  if (features.dim() != 3 || features.size(1) != channels_ || features.size(2) != parts_)
    throw std::invalid_argument("heads expect (B, " + std::to_string(channels_) + ", " + std::to_string(parts_) +
                                "), got " + shape_string(features));
  HeadOutput out;
  out.embeddings = fc->forward(features);
  if (num_classes_ > 0) {
    const int64_t B = features.size(0);
    auto normed = bn->forward(out.embeddings.reshape({B, channels_ * parts_})).reshape({B, channels_, parts_});
    out.logits = classifier->forward(normed);
  }
  return out;
}

torch::Tensor triplet_loss(const torch::Tensor& embeddings, const torch::Tensor& labels, double margin) {
  TORCH_CHECK(embeddings.dim() == 3, "triplet_loss expects (B, C, p) embeddings");
  TORCH_CHECK(labels.dim() == 1 && labels.size(0) == embeddings.size(0), "triplet_loss: label count mismatch");
  const auto label_vec = labels.to(torch::kCPU).contiguous();
  std::set<int64_t> distinct(label_vec.data_ptr<int64_t>(), label_vec.data_ptr<int64_t>() + label_vec.numel());
  if (distinct.size() < 2) throw std::invalid_argument("triplet loss needs at least two identities in the batch");

  const auto same = labels.unsqueeze(0) == labels.unsqueeze(1);  // (B, B)
  const auto eye = torch::eye(labels.size(0), same.options());
  const auto positive = same & ~eye;
  const auto negative = ~same;
  if (positive.sum().item<int64_t>() == 0)
    throw std::invalid_argument("triplet loss needs at least one identity with two samples");

  // (p, B, C) pairwise Euclidean distances per part
  const auto e = embeddings.permute({2, 0, 1});
  const auto diff = e.unsqueeze(2) - e.unsqueeze(1);
  const auto dist = diff.pow(2).sum(-1).clamp_min(1e-12).sqrt();  // (p, B, B)

  // valid[a, pos, neg]
  const auto valid = positive.unsqueeze(2) & negative.unsqueeze(1);
  const auto terms = torch::relu(dist.unsqueeze(3) - dist.unsqueeze(2) + margin) * valid.unsqueeze(0).to(dist.dtype());
  const auto flat = terms.reshape({terms.size(0), -1});
  const auto sum = flat.sum(1);
  const auto nonzero = (flat > 0).sum(1).to(dist.dtype());
  const auto per_part = torch::where(nonzero > 0, sum / nonzero.clamp_min(1.0), torch::zeros_like(sum));
  return per_part.mean();
}

torch::Tensor ce_loss(const torch::Tensor& logits, const torch::Tensor& labels) {
  TORCH_CHECK(logits.dim() == 3, "ce_loss expects (B, N, p) logits");
  TORCH_CHECK(labels.dim() == 1 && labels.size(0) == logits.size(0), "ce_loss: label count mismatch");
  const int64_t classes = logits.size(1);
  const auto lo = labels.min().item<int64_t>();
  const auto hi = labels.max().item<int64_t>();
  if (lo < 0 || hi >= classes)
    throw std::out_of_range("ce_loss: label out of range [0, " + std::to_string(classes) + ")");
  const auto log_probs = torch::log_softmax(logits, 1);
  const auto index = labels.view({-1, 1, 1}).expand({logits.size(0), 1, logits.size(2)});
  return -log_probs.gather(1, index).mean();
}

DiscriminativeLoss discriminative_loss(const HeadOutput& heads, const torch::Tensor& labels, const LossWeights& weights) {
  if (!heads.logits.defined()) throw std::logic_error("discriminative loss needs classifier logits");
  DiscriminativeLoss loss;
  loss.triplet = triplet_loss(heads.embeddings, labels, weights.margin);
  loss.ce = ce_loss(heads.logits, labels);
  loss.total = weights.triplet * loss.triplet + weights.ce * loss.ce;
  return loss;
}

DiscriminativeLoss loss_d(GaitBackboneImpl& backbone, BNNeckHeadsImpl& heads, const torch::Tensor& x0,
                          const torch::Tensor& labels, const LossWeights& weights) {
  return discriminative_loss(heads.forward(backbone.forward(x0)), labels, weights);
}

}  // namespace cod2
