#pragma once

// Discriminative extractor: a pluggable silhouette backbone producing part-wise identity features
// (B, C, p), the S-FC + BNNeck heads, and the triplet / cross-entropy objective.

#include <torch/torch.h>

#include <memory>
#include <string>
#include <vector>

namespace cod2 {

struct ExtractorOptions {
  std::string backbone = "tinygait";
  std::vector<int64_t> widths = {16, 16, 32};  // conv stage widths; C = 2 * widths.back()
  int64_t parts = 16;
  double leaky_slope = 0.01;
};

/// Backbone contract: (B, 1, T, 64, 44) in [0,1] -> (B, C, p). Implementations must reject other
/// spatial sizes rather than resizing.
class GaitBackboneImpl : public torch::nn::Module {
 public:
  virtual torch::Tensor forward(const torch::Tensor& x) = 0;
  virtual int64_t channels() const = 0;
  virtual int64_t parts() const = 0;
  virtual std::string name() const = 0;
};
using GaitBackbone = std::shared_ptr<GaitBackboneImpl>;

/// Three 3D-conv stages (the first strided 2x spatially, then a 2x max-pool, so stages two and three
/// run at 16x11), temporal max-pool, horizontal part pooling (max ++ mean per strip).
class TinyGaitImpl : public GaitBackboneImpl {
 public:
  explicit TinyGaitImpl(const ExtractorOptions& options);

  torch::Tensor forward(const torch::Tensor& x) override;
  int64_t channels() const override { return 2 * widths_.back(); }
  int64_t parts() const override { return parts_; }
  std::string name() const override { return "tinygait"; }

 private:
  std::vector<int64_t> widths_;
  int64_t parts_;
  double slope_;
  std::vector<torch::nn::Conv3d> convs_;
  std::vector<torch::nn::BatchNorm3d> norms_;
};

GaitBackbone make_backbone(const ExtractorOptions& options);

/// Max-pool with kernel (1, 2, 2) applied frame by frame.
torch::Tensor spatial_max_pool(const torch::Tensor& x);

/// Independent linear map per part: (B, in, p) -> (B, out, p).
class SeparateFCImpl : public torch::nn::Module {
 public:
  SeparateFCImpl(int64_t parts, int64_t in_features, int64_t out_features, bool bias = false);

  torch::Tensor forward(const torch::Tensor& x);
  /// Requires in == out. Sets every part's matrix to I and the bias to 0.
  void set_identity();

  torch::Tensor weight;  // (p, in, out)
  torch::Tensor bias;    // (p, out) or undefined
};
TORCH_MODULE(SeparateFC);

struct HeadOutput {
  torch::Tensor embeddings;  // (B, C, p), triplet branch
  torch::Tensor logits;      // (B, num_classes, p), CE branch; undefined when num_classes == 0
};

/// S-FC for embeddings; BatchNorm1d over the flattened (C*p) features followed by a bias-free
/// per-part classifier for logits.
class BNNeckHeadsImpl : public torch::nn::Module {
 public:
  BNNeckHeadsImpl(int64_t channels, int64_t parts, int64_t num_classes);

  HeadOutput forward(const torch::Tensor& features);
  int64_t num_classes() const { return num_classes_; }

  SeparateFC fc{nullptr};
  torch::nn::BatchNorm1d bn{nullptr};
  SeparateFC classifier{nullptr};

 private:
  int64_t channels_;
  int64_t parts_;
  int64_t num_classes_;
};
TORCH_MODULE(BNNeckHeads);

/// Batch-all triplet loss on Euclidean distances, averaged over the non-zero terms of each part
/// and then over parts.
torch::Tensor triplet_loss(const torch::Tensor& embeddings, const torch::Tensor& labels, double margin);

/// Softmax cross-entropy averaged over batch and parts. logits: (B, N, p).
torch::Tensor ce_loss(const torch::Tensor& logits, const torch::Tensor& labels);

struct LossWeights {
  double triplet = 1.0;
  double ce = 1.0;
  double margin = 0.2;
};

struct DiscriminativeLoss {
  torch::Tensor triplet;
  torch::Tensor ce;
  torch::Tensor total;
};

DiscriminativeLoss discriminative_loss(const HeadOutput& heads, const torch::Tensor& labels, const LossWeights& weights);

/// extract -> heads -> triplet + ce.
DiscriminativeLoss loss_d(GaitBackboneImpl& backbone, BNNeckHeadsImpl& heads, const torch::Tensor& x0,
                          const torch::Tensor& labels, const LossWeights& weights = {});

}  // namespace cod2
