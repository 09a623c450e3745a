#pragma once

// Probe/gallery retrieval: embeddings, Rank-k, mAP and CMC, overall and per covariate.

#include <json.hpp>
#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cod2/checkpoint.hpp"
#include "cod2/data_synth.hpp"

namespace cod2 {

struct FeatureTable {
  std::vector<int64_t> seq_ids;
  std::vector<int64_t> identities;
  std::vector<CovariateKind> covariates;
  torch::Tensor features;  // (N, C*p) float32

  int64_t size() const { return static_cast<int64_t>(seq_ids.size()); }
  /// Row index of a sequence; throws if absent.
  int64_t row_of(int64_t seq_id) const;
};

/// Eval-mode embedding (flattened S-FC output) of a (B, 1, T, 64, 44) batch. Never touches G.
torch::Tensor extract(ModelBundle& models, const torch::Tensor& frames);

/// Embeds every listed sequence at full length, one sequence per forward pass.
FeatureTable embed_all(ModelBundle& models, const GaitDataset& dataset, const std::vector<ManifestEntry>& entries);

struct ProtocolEntry {
  int64_t seq_id = 0;
  int64_t identity = 0;
  CovariateKind covariate = CovariateKind::normal;
};

struct EvalProtocol {
  std::vector<ProtocolEntry> gallery;
  std::vector<ProtocolEntry> probe;

  /// Gallery and probe splits recorded in the dataset manifest.
  static EvalProtocol from_dataset(const GaitDataset& dataset);
  /// No shared seq_ids, every probe identity present in the gallery.
  void validate() const;
};

struct RankResult {
  int64_t k = 1;
  double overall = 0.0;
  std::map<std::string, double> per_condition;  // keyed by covariate name, probes of that kind only
};

RankResult rank_k(const FeatureTable& features, const EvalProtocol& protocol, int64_t k);

struct MapResult {
  double overall = 0.0;
  std::map<std::string, double> per_condition;
};

MapResult mean_ap(const FeatureTable& features, const EvalProtocol& protocol);

/// cmc[r-1] = Rank-r accuracy for r = 1..max_rank.
std::vector<double> cmc_curve(const FeatureTable& features, const EvalProtocol& protocol, int64_t max_rank);

struct EvalReport {
  std::vector<RankResult> ranks;
  MapResult map;
  int64_t num_gallery = 0;
  int64_t num_probe = 0;

  const RankResult& rank(int64_t k) const;
  nlohmann::json to_json() const;
  std::string to_table() const;
};

EvalReport evaluate(const FeatureTable& features, const EvalProtocol& protocol, const std::vector<int64_t>& ks);

/// Loads a checkpoint without its generator, embeds gallery + probe and evaluates.
EvalReport evaluate_checkpoint(const std::filesystem::path& checkpoint, const GaitDataset& dataset,
                               const std::vector<int64_t>& ks);

void write_cmc_csv(const std::filesystem::path& path, const std::vector<double>& cmc);

}  // namespace cod2
