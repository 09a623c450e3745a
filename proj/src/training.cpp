#include "cod2/training.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "cod2/run_manifest.hpp"

namespace cod2 {
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent per-step streams, so a resumed run draws what an uninterrupted one would.
uint64_t step_seed(uint64_t seed, int64_t step, uint64_t stream) {
  return splitmix64(splitmix64(seed ^ splitmix64(static_cast<uint64_t>(step))) ^ stream);
}

// Sets every batch-norm momentum in `module` to `value`, returning the previous settings.
std::vector<std::optional<double>> set_bn_momentum(torch::nn::Module& module, std::optional<double> value,
                                                   const std::vector<std::optional<double>>* restore = nullptr) {
  std::vector<std::optional<double>> previous;
  size_t i = 0;
  for (const auto& child : module.modules(true)) {
    std::optional<double>* momentum = nullptr;
    if (auto* bn = dynamic_cast<torch::nn::BatchNorm1dImpl*>(child.get())) momentum = &bn->options.momentum();
    if (auto* bn = dynamic_cast<torch::nn::BatchNorm3dImpl*>(child.get())) momentum = &bn->options.momentum();
    if (!momentum) continue;
    previous.push_back(*momentum);
    *momentum = restore ? (*restore)[i] : value;
    ++i;
  }
  return previous;
}

// The generated pass normalises with its own batch statistics but leaves the running statistics
// (used at evaluation) to real data.
class FreezeRunningStats {
 public:
  explicit FreezeRunningStats(std::vector<torch::nn::Module*> modules) : modules_(std::move(modules)) {
    for (auto* m : modules_) saved_.push_back(set_bn_momentum(*m, 0.0));
  }
  ~FreezeRunningStats() {
    for (size_t i = 0; i < modules_.size(); ++i) set_bn_momentum(*modules_[i], std::nullopt, &saved_[i]);
  }

 private:
  std::vector<torch::nn::Module*> modules_;
  std::vector<std::vector<std::optional<double>>> saved_;
};

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

std::string slug(const std::string& label) {
  std::string out;
  for (char c : label) out += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
  return out;
}

}  // namespace

std::pair<int64_t, int64_t> lr_milestones(int64_t steps) { return {steps / 2, (3 * steps) / 4}; }

double lr_at(const TrainConfig& config, int64_t step) {
  const auto [m1, m2] = lr_milestones(config.steps);
  int decays = (step > m1 ? 1 : 0) + (step > m2 ? 1 : 0);
  return config.lr * std::pow(config.decay_rate, decays);
}

Trainer::Trainer(const GaitDataset& dataset, const TrainConfig& config) : dataset_(dataset), config_(config) {
  config_.validate();
  const int64_t num_classes = static_cast<int64_t>(dataset.train_identities().size());
  if (num_classes < 2) throw std::invalid_argument("training needs at least two training identities");
  models_ = ModelBundle::build(config_, num_classes, config_.uses_generator());
  optimizer_ = std::make_unique<torch::optim::Adam>(
      models_.parameters(), torch::optim::AdamOptions(config_.lr).weight_decay(config_.weight_decay));
}

Batch Trainer::batch_for(int64_t step) const {
  std::mt19937_64 rng(step_seed(config_.seed, step, 1));
  return stack_clips(dataset_, pk_sampler(dataset_, config_.effective_batch(), config_.clip_length, rng));
}

StepReport Trainer::step(StepIntermediates* keep) {
  const Batch batch = batch_for(steps_done_ + 1);
  const auto start = std::chrono::steady_clock::now();
  StepReport report = joint_step(batch, keep);
  report.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return report;
}

StepReport Trainer::joint_step(const Batch& batch, StepIntermediates* keep) {
  StepReport report;
  report.step = steps_done_ + 1;
  report.lr = lr_at(config_, report.step);
  for (auto& group : optimizer_->param_groups())
    static_cast<torch::optim::AdamOptions&>(group.options()).lr(report.lr);

  models_.train(true);
  const torch::Tensor& x0 = batch.frames;
  const torch::Tensor& labels = batch.labels;

  const torch::Tensor f_I = models_.backbone->forward(x0);
  const HeadOutput real = models_.heads->forward(f_I);
  const DiscriminativeLoss ld = discriminative_loss(real, labels, config_.loss);
  torch::Tensor loss = config_.loss_d_weight * ld.total;
  report.L_D = ld.total.item<double>();
  report.L_tri_D = ld.triplet.item<double>();
  report.L_ce_D = ld.ce.item<double>();

  if (config_.uses_generator()) {
    torch::Generator rng = at::make_generator<at::CPUGeneratorImpl>(step_seed(config_.seed, report.step, 2));
    NoiseSequence noise = config_.ablation.low_level
                              ? build_noise_sequence(x0, config_.m, rng, config_.ablation.window_position)
                              : pure_noise_sequence(x0, rng);
    const torch::Tensor condition = config_.detach_condition ? f_I.detach() : f_I;
    const torch::Tensor x_hat = models_.generator->forward(noise, condition);
    torch::Tensor f_hat;
    HeadOutput generated;
    {
      FreezeRunningStats freeze({models_.backbone.get(), models_.generated_heads().ptr().get()});
      f_hat = models_.backbone->forward(x_hat);
      generated = models_.generated_heads()->forward(f_hat);
    }
    const DiscriminativeLoss lg = discriminative_loss(generated, labels, config_.loss);
    loss = loss + config_.loss_g_weight * lg.total;
    report.L_G = lg.total.item<double>();
    report.L_tri_G = lg.triplet.item<double>();
    report.L_ce_G = lg.ce.item<double>();
    if (keep) {
      keep->noise = noise;
      keep->x_hat = x_hat.detach();
      keep->f_hat = f_hat.detach();
      keep->heads_generated = HeadOutput{generated.embeddings.detach(), generated.logits.detach()};
    }
  }
  report.L = loss.item<double>();

  if (!std::isfinite(report.L)) {
    std::ostringstream s;
    s << "non-finite loss at step " << report.step << ": L=" << report.L << " L_D=" << report.L_D
      << " (tri " << report.L_tri_D << ", ce " << report.L_ce_D << ") L_G=" << report.L_G << " (tri "
      << report.L_tri_G << ", ce " << report.L_ce_G << ") lr=" << report.lr;
    throw std::runtime_error(s.str());
  }

  if (keep) {
    keep->x0 = x0;
    keep->labels = labels;
    keep->f_I = f_I.detach();
    keep->heads_real = HeadOutput{real.embeddings.detach(), real.logits.detach()};
    keep->loss = loss.detach();
  }

  optimizer_->zero_grad();
  loss.backward();
  optimizer_->step();
  ++steps_done_;
  return report;
}

void Trainer::save(const fs::path& path) const {
  CheckpointMeta meta;
  meta.backbone = models_.backbone->name();
  meta.channels = models_.backbone->channels();
  meta.parts = models_.backbone->parts();
  meta.num_classes = models_.heads->num_classes();
  meta.step = steps_done_;
  meta.config = config_;
  meta.dataset_hash = dataset_.content_hash();
  save_checkpoint(path, models_, meta, optimizer_.get());
}

void Trainer::resume(const fs::path& path) {
  CheckpointMeta meta;
  load_checkpoint_into(path, models_, optimizer_.get(), &meta);
  if (meta.step >= config_.steps)
    throw std::invalid_argument("checkpoint is at step " + std::to_string(meta.step) + ", nothing left of " +
                                std::to_string(config_.steps) + " steps");
  steps_done_ = meta.step;
}

std::string metrics_row(const StepReport& r) {
  std::ostringstream s;
  s << r.step << "," << format_double(r.L) << "," << format_double(r.L_D) << "," << format_double(r.L_G) << ","
    << format_double(r.L_tri_D) << "," << format_double(r.L_ce_D) << "," << format_double(r.L_tri_G) << ","
    << format_double(r.L_ce_G) << "," << format_double(r.lr) << "," << std::fixed << std::setprecision(3) << r.ms;
  return s.str();
}

TrainResult train(const GaitDataset& dataset, const TrainConfig& config, const TrainOptions& options) {
  Trainer trainer(dataset, config);
  const fs::path ckpt_dir = options.run_dir / "checkpoints";
  fs::create_directories(ckpt_dir);
  const fs::path csv_path = options.run_dir / "metrics.csv";

  // Keep log rows up to the resume point so the log reads as one uninterrupted run.
  std::vector<std::string> kept_rows;
  if (options.resume) {
    trainer.resume(*options.resume);
    std::ifstream in(csv_path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line == kMetricsHeader) continue;
      if (std::stoll(line.substr(0, line.find(','))) <= trainer.steps_done()) kept_rows.push_back(line);
    }
  }
  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot write " + csv_path.string());
  csv << kMetricsHeader << "\n";
  for (const auto& row : kept_rows) csv << row << "\n";
  csv.flush();

  RunManifest manifest;
  manifest.command = "train";
  manifest.config = to_json(config);
  manifest.dataset_root = fs::absolute(dataset.root()).string();
  manifest.dataset_hash = dataset.content_hash();
  manifest.seed = config.seed;
  manifest.outputs["metrics"] = "metrics.csv";
  manifest.outputs["checkpoints"] = "checkpoints";
  if (options.resume) manifest.outputs["resumed_from"] = fs::absolute(*options.resume).string();

  TrainResult result;
  const int64_t first = trainer.steps_done() + 1;
  int64_t last = config.steps;
  if (options.step_limit > 0) last = std::min(last, trainer.steps_done() + options.step_limit);
  char name[64];
  for (int64_t s = first; s <= last; ++s) {
    StepReport report = trainer.step();
    csv << metrics_row(report) << "\n";
    csv.flush();
    result.reports.push_back(report);
    if (options.on_step) options.on_step(report);
    const bool periodic = s % config.checkpoint_every == 0;
    if (options.write_checkpoints && (periodic || s == config.steps)) {
      std::snprintf(name, sizeof(name), "step_%06lld.ckpt", static_cast<long long>(s));
      trainer.save(ckpt_dir / name);
      result.final_checkpoint = ckpt_dir / name;
    }
  }
  if (!result.final_checkpoint.empty())
    manifest.outputs["final_checkpoint"] = fs::relative(result.final_checkpoint, options.run_dir).string();
  write_run_manifest(options.run_dir, manifest);

  // The first step pays one-off allocation costs; leave it out of the average when possible.
  const size_t skip = result.reports.size() > 1 ? 1 : 0;
  double total = 0.0;
  for (size_t i = skip; i < result.reports.size(); ++i) total += result.reports[i].ms;
  if (result.reports.size() > skip) result.mean_ms_per_step = total / static_cast<double>(result.reports.size() - skip);
  return result;
}

std::string to_string(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::conditions: return "conditions";
    case AblationAxis::m: return "m";
    case AblationAxis::lambda_mode: return "lambda_mode";
    case AblationAxis::fusion: return "fusion";
  }
  return "?";
}

AblationAxis ablation_axis_from_string(const std::string& name) {
  for (auto axis : {AblationAxis::conditions, AblationAxis::m, AblationAxis::lambda_mode, AblationAxis::fusion})
    if (to_string(axis) == name) return axis;
  throw std::invalid_argument("unknown ablation axis '" + name + "' (conditions | m | lambda_mode | fusion)");
}

std::vector<AblationVariant> ablation_variants(const TrainConfig& base, AblationAxis axis) {
  std::vector<AblationVariant> rows;
  TrainConfig full = base;
  full.ablation.high_level = true;
  full.ablation.low_level = true;
  switch (axis) {
    case AblationAxis::conditions:
      for (auto [high, low] : {std::pair{false, false}, {true, false}, {false, true}, {true, true}}) {
        TrainConfig c = base;
        c.ablation.high_level = high;
        c.ablation.low_level = low;
        rows.push_back({std::string("high=") + (high ? "on" : "off") + " low=" + (low ? "on" : "off"), c});
      }
      break;
    case AblationAxis::m:
      for (int64_t m : {1, 3, 5, 7, 9}) {
        TrainConfig c = full;
        c.m = m;
        rows.push_back({"m=" + std::to_string(m), c});
      }
      break;
    case AblationAxis::lambda_mode:
      for (auto mode : {LambdaMode::fixed_one, LambdaMode::learnable_scalar, LambdaMode::learnable_vector}) {
        TrainConfig c = full;
        c.ablation.lambda_mode = mode;
        rows.push_back({"lambda=" + to_string(mode), c});
      }
      break;
    case AblationAxis::fusion:
      for (auto fusion : {Fusion::none, Fusion::addition, Fusion::hcm}) {
        TrainConfig c = full;
        c.ablation.fusion = fusion;
        rows.push_back({"fusion=" + to_string(fusion), c});
      }
      break;
  }
  return rows;
}

std::string AblationTable::to_text() const {
  std::ostringstream s;
  s << "ablation: " << to_string(axis) << "\n";
  s << std::left << std::setw(28) << "variant" << std::right << std::setw(9) << "R-1" << std::setw(9) << "R-5"
    << std::setw(9) << "mAP" << std::setw(12) << "ms/step" << "\n";
  s << std::fixed;
  for (const auto& row : rows) {
    s << std::left << std::setw(28) << row.label << std::right << std::setprecision(2) << std::setw(9)
      << 100.0 * row.metrics.rank(1).overall << std::setw(9) << 100.0 * row.metrics.rank(5).overall << std::setw(9)
      << 100.0 * row.metrics.map.overall << std::setprecision(1) << std::setw(12) << row.ms_per_step << "\n";
  }
  return s.str();
}

json AblationTable::to_json() const {
  json out{{"axis", to_string(axis)}, {"rows", json::array()}};
  for (const auto& row : rows)
    out["rows"].push_back(
        {{"label", row.label}, {"config", cod2::to_json(row.config)}, {"metrics", row.metrics.to_json()},
         {"ms_per_step", row.ms_per_step}});
  return out;
}

AblationTable ablation_sweep(const GaitDataset& dataset, const TrainConfig& base, AblationAxis axis,
                             const fs::path& out_dir, const std::function<void(const std::string&)>& progress) {
  AblationTable table;
  table.axis = axis;
  const fs::path axis_dir = out_dir / to_string(axis);
  for (const auto& variant : ablation_variants(base, axis)) {
    if (progress) progress("training " + variant.label);
    TrainOptions options;
    options.run_dir = axis_dir / slug(variant.label);
    const TrainResult trained = train(dataset, variant.config, options);
    AblationRow row{variant.label, variant.config, evaluate_checkpoint(trained.final_checkpoint, dataset, {1, 5}),
                    trained.mean_ms_per_step};
    if (progress) progress(variant.label + ": R-1 " + format_double(100.0 * row.metrics.rank(1).overall) + "%");
    table.rows.push_back(std::move(row));
  }
  RunManifest manifest;
  manifest.command = "ablate";
  manifest.config = to_json(base);
  manifest.config["axis"] = to_string(axis);
  manifest.dataset_root = fs::absolute(dataset.root()).string();
  manifest.dataset_hash = dataset.content_hash();
  manifest.seed = base.seed;
  manifest.outputs["table"] = "table.txt";
  manifest.outputs["json"] = "ablation.json";
  write_run_manifest(axis_dir, manifest);
  std::ofstream(axis_dir / "table.txt") << table.to_text();
  std::ofstream(axis_dir / "ablation.json") << table.to_json().dump(2) << "\n";
  return table;
}

}  // namespace cod2
