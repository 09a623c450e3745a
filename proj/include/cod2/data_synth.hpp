#pragma once

// Procedural walker dataset: rendering, on-disk layout, clip sampling and PK batching.

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace cod2 {

inline constexpr int64_t kFrameHeight = 64;
inline constexpr int64_t kFrameWidth = 44;

/// Gait parameters of one synthetic subject. Fully determined by (identity_id, dataset seed).
struct WalkerSpec {
  int64_t identity_id = 0;
  double body_aspect = 3.0;           // torso ellipse height / width, in (2, 4)
  double limb_length = 0.45;          // leg length as a fraction of body height, in (0.3, 0.6)
  double stride_frequency = 0.3;      // radians per frame, in (0, pi)
  double arm_swing_amplitude = 0.5;   // radians
  double phase_offset = 0.0;          // arm phase relative to the legs, radians

  bool operator==(const WalkerSpec&) const = default;
};

WalkerSpec walker_for(int64_t identity_id, uint64_t dataset_seed);

enum class CovariateKind { normal, carrying, clothing, occlusion, night };
inline constexpr std::array<CovariateKind, 5> kAllCovariates = {
    CovariateKind::normal, CovariateKind::carrying, CovariateKind::clothing, CovariateKind::occlusion,
    CovariateKind::night};

std::string to_string(CovariateKind kind);
CovariateKind covariate_from_string(const std::string& name);

struct CovariateSpec {
  CovariateKind kind = CovariateKind::normal;
  double intensity = 0.0;  // [0,1]; 0 renders exactly like `normal`
};

/// Frames are a (T, H, W) float32 tensor with values in [0,1].
struct SilhouetteSequence {
  torch::Tensor frames;
  int64_t identity_id = 0;
  CovariateSpec covariate;
  int64_t seq_id = 0;

  int64_t length() const { return frames.size(0); }
};

struct BatchSpec {
  int64_t P = 8;
  int64_t K = 4;

  void validate() const;
};

/// Per-sequence nuisance parameters (not identity-bearing).
struct SequenceNuisance {
  double start_phase = 0.0;
  double x_shift = 0.0;  // canvas pixels
};

struct RenderOptions {
  int64_t frames = 40;
  int64_t canvas_height = 128;
  int64_t canvas_width = 88;
};

/// Renders one walker under a covariate and resizes to 64x44. `noise_seed` drives the night
/// covariate's salt noise only.
SilhouetteSequence render_sequence(const WalkerSpec& walker, const CovariateSpec& covariate,
                                   const SequenceNuisance& nuisance, const RenderOptions& options,
                                   uint64_t noise_seed);

/// Distribution over covariates for generated sequences. The first `leading_normal` sequences of
/// every identity are always `normal` so that each identity has gallery material.
struct CovariateMix {
  std::array<double, 5> weights = {0.4, 0.15, 0.15, 0.15, 0.15};
  double min_intensity = 0.5;
  double max_intensity = 1.0;
  int64_t leading_normal = 2;

  static CovariateMix all_normal();
};

enum class Split { train, gallery, probe };
std::string to_string(Split split);
Split split_from_string(const std::string& name);

struct ManifestEntry {
  int64_t seq_id = 0;
  int64_t identity_id = 0;
  int64_t seq_index = 0;
  CovariateSpec covariate;
  Split split = Split::train;
  std::string path;       // relative to dataset root
  std::string meta_path;  // relative to dataset root
};

struct DatasetRequest {
  int64_t num_ids = 40;
  int64_t seqs_per_id = 8;
  CovariateMix covariate_mix;
  uint64_t seed = 1;
  /// Identities [0, train_ids) are training subjects; the rest form the unseen-identity
  /// gallery/probe split. Negative means num_ids / 2.
  int64_t train_ids = -1;
  /// Gallery takes the first `gallery_per_id` sequences of each evaluation identity.
  int64_t gallery_per_id = 2;
  RenderOptions render;
};

/// Writes the dataset under `root` (which must be empty or absent) and returns its manifest.
std::vector<ManifestEntry> generate_dataset(const DatasetRequest& request, const std::filesystem::path& root);

/// Read-only view of a dataset directory; frames are loaded lazily and cached.
class GaitDataset {
 public:
  static GaitDataset open(const std::filesystem::path& root);

  const std::filesystem::path& root() const { return root_; }
  const std::vector<ManifestEntry>& entries() const { return entries_; }
  std::vector<ManifestEntry> split(Split split) const;
  /// Sorted identity ids of the training split; a label is the index into this list.
  const std::vector<int64_t>& train_identities() const { return train_identities_; }
  int64_t label_of(int64_t identity_id) const;

  SilhouetteSequence load(const ManifestEntry& entry) const;
  /// Content hash over the manifest and every sequence file (FNV-1a, hex).
  std::string content_hash() const;

 private:
  std::filesystem::path root_;
  std::vector<ManifestEntry> entries_;
  std::vector<int64_t> train_identities_;
  std::map<int64_t, int64_t> labels_;
  mutable std::map<int64_t, torch::Tensor> cache_;
};

/// `length` consecutive frames starting at a uniformly drawn offset in [0, T - length].
SilhouetteSequence sample_clip(const SilhouetteSequence& seq, int64_t length, std::mt19937_64& rng);

/// Bilinear (half-pixel centres) resize of every frame to 64x44, clamped to [0,1].
SilhouetteSequence resize_frames(const SilhouetteSequence& seq);
torch::Tensor resize_bilinear(const torch::Tensor& frames, int64_t height, int64_t width);

struct Batch {
  torch::Tensor frames;  // (B, 1, T, 64, 44)
  torch::Tensor labels;  // (B,) int64 class indices
  std::vector<int64_t> identity_ids;
};

/// P distinct training identities with K clips each (B = P*K), grouped by identity.
std::vector<SilhouetteSequence> pk_sampler(const GaitDataset& dataset, const BatchSpec& batch, int64_t clip_length,
                                           std::mt19937_64& rng);

Batch stack_clips(const GaitDataset& dataset, const std::vector<SilhouetteSequence>& clips);

}  // namespace cod2
