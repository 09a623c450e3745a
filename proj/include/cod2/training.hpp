#pragma once

// Joint optimisation of the extractor D and the generator G:
//   f_I = D(X_0), X_hat_0 = G(X_t, f_I), f_hat_I = D(X_hat_0), L = L_D(f_I) + L_G(f_hat_I).

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cod2/checkpoint.hpp"
#include "cod2/config.hpp"
#include "cod2/data_synth.hpp"
#include "cod2/eval.hpp"

namespace cod2 {

struct StepReport {
  int64_t step = 0;
  double L = 0.0;
  double L_D = 0.0;
  double L_G = 0.0;
  double L_tri_D = 0.0;
  double L_ce_D = 0.0;
  double L_tri_G = 0.0;
  double L_ce_G = 0.0;
  double lr = 0.0;
  double ms = 0.0;
};

/// Tensors of one joint step kept for inspection (all detached except where noted).
struct StepIntermediates {
  torch::Tensor x0;
  torch::Tensor labels;
  torch::Tensor f_I;
  NoiseSequence noise;
  torch::Tensor x_hat;
  torch::Tensor f_hat;
  HeadOutput heads_real;
  HeadOutput heads_generated;
  torch::Tensor loss;  // the scalar that was back-propagated
};

/// Learning rate at 1-based step s: lr * decay_rate^([s > steps/2] + [s > 3*steps/4]).
double lr_at(const TrainConfig& config, int64_t step);

/// Milestones (last step at the previous rate) for a given step budget.
std::pair<int64_t, int64_t> lr_milestones(int64_t steps);

class Trainer {
 public:
  Trainer(const GaitDataset& dataset, const TrainConfig& config);

  /// Samples the batch for the next step and runs it.
  StepReport step(StepIntermediates* keep = nullptr);
  /// One optimisation step on a given batch, numbered `steps_done() + 1`.
  StepReport joint_step(const Batch& batch, StepIntermediates* keep = nullptr);
  /// The batch `step()` would draw for 1-based step s.
  Batch batch_for(int64_t step) const;

  void save(const std::filesystem::path& path) const;
  /// Restores models and optimizer; step numbering continues after the checkpoint's step.
  void resume(const std::filesystem::path& path);

  ModelBundle& models() { return models_; }
  torch::optim::Adam& optimizer() { return *optimizer_; }
  const TrainConfig& config() const { return config_; }
  int64_t steps_done() const { return steps_done_; }

 private:
  const GaitDataset& dataset_;
  TrainConfig config_;
  ModelBundle models_;
  std::unique_ptr<torch::optim::Adam> optimizer_;
  int64_t steps_done_ = 0;
};

struct TrainOptions {
  std::filesystem::path run_dir;
  std::optional<std::filesystem::path> resume;
  /// Stop after this many steps of the current invocation (timing probes); 0 means run to `steps`.
  int64_t step_limit = 0;
  bool write_checkpoints = true;
  std::function<void(const StepReport&)> on_step;
};

struct TrainResult {
  std::vector<StepReport> reports;
  std::filesystem::path final_checkpoint;  // empty if no checkpoint was written
  double mean_ms_per_step = 0.0;
};

/// Runs the loop, appending to <run_dir>/metrics.csv and writing <run_dir>/checkpoints/step_N.ckpt
/// every `checkpoint_every` steps plus one at the last step.
TrainResult train(const GaitDataset& dataset, const TrainConfig& config, const TrainOptions& options);

inline constexpr const char* kMetricsHeader = "step,L,L_D,L_G,L_tri_D,L_ce_D,L_tri_G,L_ce_G,lr,ms_per_step";
std::string metrics_row(const StepReport& report);

enum class AblationAxis { conditions, m, lambda_mode, fusion };
std::string to_string(AblationAxis axis);
AblationAxis ablation_axis_from_string(const std::string& name);

struct AblationVariant {
  std::string label;
  TrainConfig config;
};

/// Rows of one ablation table, in display order.
std::vector<AblationVariant> ablation_variants(const TrainConfig& base, AblationAxis axis);

struct AblationRow {
  std::string label;
  TrainConfig config;
  EvalReport metrics;
  double ms_per_step = 0.0;
};

struct AblationTable {
  AblationAxis axis = AblationAxis::conditions;
  std::vector<AblationRow> rows;

  std::string to_text() const;
  nlohmann::json to_json() const;
};

/// Trains and evaluates every variant under <out_dir>/<axis>/<row>/.
AblationTable ablation_sweep(const GaitDataset& dataset, const TrainConfig& base, AblationAxis axis,
                             const std::filesystem::path& out_dir,
                             const std::function<void(const std::string&)>& progress = {});

}  // namespace cod2
