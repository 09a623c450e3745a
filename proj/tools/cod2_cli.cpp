// cod2: synthetic gait data, joint D+G training, retrieval evaluation, generation grids, ablations.

#include <CLI11.hpp>
#include <json.hpp>

#include <ATen/CPUGeneratorImpl.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cod2/checkpoint.hpp"
#include "cod2/config.hpp"
#include "cod2/data_synth.hpp"
#include "cod2/eval.hpp"
#include "cod2/image_io.hpp"
#include "cod2/run_manifest.hpp"
#include "cod2/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace cod2;

namespace {

fs::path output_root() {
  const char* env = std::getenv("COD2_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

std::string config_key_listing() {
  std::ostringstream s;
  s << "Config keys (JSON file via --config, or --set key=value):\n";
  for (const auto& key : config_keys()) s << "  " << key.name << std::string(key.name.size() < 18 ? 18 - key.name.size() : 1, ' ') << key.description << "\n";
  s << "Environment: COD2_OUTPUT_ROOT sets the default output root (default ./runs).";
  return s.str();
}

// Clears `dir` for reuse. Only directories this tool produced are ever removed.
void prepare_output(const fs::path& dir, bool force) {
  if (!fs::exists(dir) || fs::is_empty(dir)) {
    fs::create_directories(dir);
    return;
  }
  if (!force) throw std::runtime_error("output directory " + dir.string() + " is not empty (use --force)");
  if (!fs::exists(dir / "manifest.json") && !fs::exists(dir / kRunManifestName))
    throw std::runtime_error("refusing to clear " + dir.string() + ": not a cod2 output directory");
  fs::remove_all(dir);
  fs::create_directories(dir);
}

struct ConfigFlags {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<int64_t> steps, P, K, m, clip_length, checkpoint_every;
  std::optional<uint64_t> seed;
  std::optional<double> lr;
  std::optional<std::string> lambda_mode, fusion, clean_pathway, window_position, backbone;
  bool no_high = false, no_low = false, detach = false, separate_heads = false, halve_batch = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "JSON config file (flat keys)");
    app->add_option("--set", sets, "override one config key, key=value (repeatable)");
    app->add_option("--steps", steps, "optimisation steps");
    app->add_option("--P", P, "subjects per batch");
    app->add_option("--K", K, "sequences per subject");
    app->add_option("--m", m, "clean reference frames in X_t");
    app->add_option("--clip-length", clip_length, "frames per training clip");
    app->add_option("--checkpoint-every", checkpoint_every, "steps between checkpoints");
    app->add_option("--seed", seed, "single seed for all randomness");
    app->add_option("--lr", lr, "learning rate");
    app->add_option("--lambda-mode", lambda_mode, "fixed_one | learnable_scalar | learnable_vector");
    app->add_option("--fusion", fusion, "hcm | addition | none");
    app->add_option("--clean-pathway", clean_pathway, "first_block_only | all_blocks");
    app->add_option("--window-position", window_position, "original | front");
    app->add_option("--backbone", backbone, "extractor backbone");
    app->add_flag("--no-high-level", no_high, "disable the identity (HCM) condition");
    app->add_flag("--no-low-level", no_low, "disable the clean reference window");
    app->add_flag("--detach-condition", detach, "stop gradients from G into f_I");
    app->add_flag("--separate-heads", separate_heads, "L_G gets its own BNNeck heads");
    app->add_flag("--halve-batch", halve_batch, "halve the batch when G is active");
  }

  TrainConfig build() const {
    TrainConfig c = config_file.empty() ? TrainConfig{} : load_config_file(config_file);
    json patch = json::object();
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
      const std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
      json parsed = json::parse(value, nullptr, false);
      patch[key] = parsed.is_discarded() ? json(value) : parsed;
    }
    auto put = [&](const char* key, const auto& opt) {
      if (opt) patch[key] = *opt;
    };
    put("steps", steps);
    put("P", P);
    put("K", K);
    put("m", m);
    put("clip_length", clip_length);
    put("checkpoint_every", checkpoint_every);
    put("seed", seed);
    put("lr", lr);
    put("hcm.lambda_mode", lambda_mode);
    put("hcm.fusion", fusion);
    put("clean_pathway", clean_pathway);
    put("window_position", window_position);
    put("backbone", backbone);
    if (no_high) patch["high_level"] = false;
    if (no_low) patch["low_level"] = false;
    if (detach) patch["detach_condition"] = true;
    if (separate_heads) patch["share_heads"] = false;
    if (halve_batch) patch["halve_batch"] = true;
    c = apply_config(c, patch);
    if (m && *m < 1) throw std::invalid_argument("--m must be >= 1 (got " + std::to_string(*m) + ")");
    if (m && no_low) throw std::invalid_argument("--m has no effect with --no-low-level");
    c.validate();
    return c;
  }
};

int cmd_synth_data(const fs::path& out, int64_t ids, int64_t seqs, int64_t train_ids, int64_t frames, uint64_t seed,
                   bool all_normal, bool force) {
  prepare_output(out, force);
  DatasetRequest request;
  request.num_ids = ids;
  request.seqs_per_id = seqs;
  request.train_ids = train_ids;
  request.seed = seed;
  request.render.frames = frames;
  if (all_normal) request.covariate_mix = CovariateMix::all_normal();
  const auto entries = generate_dataset(request, out);
  const GaitDataset dataset = GaitDataset::open(out);

  RunManifest manifest;
  manifest.command = "synth-data";
  manifest.config = {{"ids", ids},     {"seqs_per_id", seqs}, {"train_ids", train_ids},
                     {"frames", frames}, {"all_normal", all_normal}};
  manifest.dataset_root = fs::absolute(out).string();
  manifest.dataset_hash = dataset.content_hash();
  manifest.seed = seed;
  manifest.outputs["manifest"] = "manifest.json";
  write_run_manifest(out, manifest);
  std::cout << "wrote " << entries.size() << " sequences (" << ids << " identities) to " << out.string() << "\n"
            << "dataset hash " << manifest.dataset_hash << "\n";
  return 0;
}

int cmd_train(const fs::path& data, const fs::path& out, const ConfigFlags& flags, const std::string& resume,
              bool force) {
  const TrainConfig config = flags.build();
  const GaitDataset dataset = GaitDataset::open(data);
  TrainOptions options;
  options.run_dir = out;
  if (resume.empty())
    prepare_output(out, force);
  else
    options.resume = fs::path(resume);
  options.on_step = [&](const StepReport& r) {
    if (r.step == 1 || r.step % 50 == 0 || r.step == config.steps)
      std::cout << "step " << r.step << "/" << config.steps << "  L=" << r.L << "  L_D=" << r.L_D
                << "  L_G=" << r.L_G << "  lr=" << r.lr << "  " << r.ms << " ms\n"
                << std::flush;
  };
  const TrainResult result = train(dataset, config, options);
  json summary{{"steps_run", result.reports.size()},
               {"mean_ms_per_step", result.mean_ms_per_step},
               {"uses_generator", config.uses_generator()},
               {"final_checkpoint", result.final_checkpoint.string()}};
  std::ofstream(out / "train_summary.json") << summary.dump(2) << "\n";
  std::cout << "mean ms/step " << result.mean_ms_per_step << "\n";
  std::cout << "checkpoint " << result.final_checkpoint.string() << "\n";
  return 0;
}

int cmd_eval(const fs::path& data, const fs::path& checkpoint, const fs::path& out, const std::vector<int64_t>& ks,
             int64_t cmc, bool force) {
  const GaitDataset dataset = GaitDataset::open(data);
  ModelBundle models = load_checkpoint(checkpoint, false);
  const EvalProtocol protocol = EvalProtocol::from_dataset(dataset);
  std::vector<ManifestEntry> entries = dataset.split(Split::gallery);
  for (const auto& e : dataset.split(Split::probe)) entries.push_back(e);
  const FeatureTable features = embed_all(models, dataset, entries);
  const EvalReport report = evaluate(features, protocol, ks);

  prepare_output(out, force);
  json j = report.to_json();
  j["checkpoint"] = fs::absolute(checkpoint).string();
  std::ofstream(out / "eval.json") << j.dump(2) << "\n";
  std::ofstream(out / "eval.txt") << report.to_table();
  RunManifest manifest;
  manifest.command = "eval";
  manifest.config = {{"checkpoint", fs::absolute(checkpoint).string()}, {"k", ks}, {"cmc", cmc}};
  manifest.dataset_root = fs::absolute(data).string();
  manifest.dataset_hash = dataset.content_hash();
  manifest.seed = read_checkpoint_meta(checkpoint).config.seed;
  manifest.outputs["metrics"] = "eval.json";
  manifest.outputs["table"] = "eval.txt";
  if (cmc > 0) {
    write_cmc_csv(out / "cmc.csv", cmc_curve(features, protocol, cmc));
    manifest.outputs["cmc"] = "cmc.csv";
  }
  write_run_manifest(out, manifest);
  std::cout << report.to_table();
  return 0;
}

int cmd_generate(const fs::path& data, const fs::path& checkpoint, const fs::path& out, int64_t count, uint64_t seed,
                 std::optional<int64_t> m_override, bool force) {
  const GaitDataset dataset = GaitDataset::open(data);
  CheckpointMeta meta;
  ModelBundle models = load_checkpoint(checkpoint, true, &meta);
  const TrainConfig& config = meta.config;
  const int64_t m = m_override.value_or(config.m);
  const int64_t T = config.clip_length;
  prepare_output(out, force);

  std::vector<ManifestEntry> pool = dataset.split(Split::probe);
  if (pool.empty()) pool = dataset.entries();
  std::mt19937_64 rng(seed);
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(std::min<size_t>(pool.size(), static_cast<size_t>(count)));
  torch::Generator noise_rng = at::make_generator<at::CPUGeneratorImpl>(seed);

  json index = json::array();
  torch::NoGradGuard no_grad;
  models.train(false);
  for (const auto& entry : pool) {
    const SilhouetteSequence clip = sample_clip(dataset.load(entry), T, rng);
    const torch::Tensor x0 = clip.frames.unsqueeze(0).unsqueeze(0);
    const NoiseSequence noise = build_noise_sequence(x0, m, noise_rng, config.ablation.window_position);
    const torch::Tensor x_hat = models.generator->forward(noise, models.backbone->forward(x0));
    const torch::Tensor grid =
        frame_grid({noise.reference()[0][0], x0[0][0], x_hat[0][0]}, 2, {m});
    char name[64];
    std::snprintf(name, sizeof(name), "seq_%05lld.png", static_cast<long long>(entry.seq_id));
    write_png(out / name, grid);
    index.push_back({{"seq_id", entry.seq_id},
                     {"identity", entry.identity_id},
                     {"covariate", to_string(entry.covariate.kind)},
                     {"png", name},
                     {"generated_min", x_hat.min().item<double>()},
                     {"generated_max", x_hat.max().item<double>()}});
  }
  std::ofstream(out / "generate.json") << json{{"m", m}, {"T", T}, {"rows", "reference / ground truth / generated"},
                                               {"samples", index}}.dump(2)
                                       << "\n";
  RunManifest manifest;
  manifest.command = "generate";
  manifest.config = {{"checkpoint", fs::absolute(checkpoint).string()}, {"count", count}, {"m", m}};
  manifest.dataset_root = fs::absolute(data).string();
  manifest.dataset_hash = dataset.content_hash();
  manifest.seed = seed;
  manifest.outputs["index"] = "generate.json";
  write_run_manifest(out, manifest);
  std::cout << "wrote " << index.size() << " grids to " << out.string() << "\n";
  return 0;
}

int cmd_ablate(const fs::path& data, const fs::path& out, const ConfigFlags& flags, const std::string& axis_name,
               bool force) {
  const TrainConfig base = flags.build();
  const GaitDataset dataset = GaitDataset::open(data);
  std::vector<AblationAxis> axes;
  if (axis_name == "all")
    axes = {AblationAxis::conditions, AblationAxis::m, AblationAxis::lambda_mode};
  else
    axes = {ablation_axis_from_string(axis_name)};
  prepare_output(out, force);

  RunManifest manifest;
  manifest.command = "ablate";
  manifest.config = to_json(base);
  manifest.config["axis"] = axis_name;
  manifest.dataset_root = fs::absolute(data).string();
  manifest.dataset_hash = dataset.content_hash();
  manifest.seed = base.seed;
  for (auto axis : axes) manifest.outputs[to_string(axis)] = to_string(axis) + "/table.txt";
  write_run_manifest(out, manifest);

  for (auto axis : axes) {
    const AblationTable table = ablation_sweep(dataset, base, axis, out, [](const std::string& msg) {
      std::cout << msg << "\n" << std::flush;
    });
    std::cout << table.to_text() << "\n";
  }
  return 0;
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cod2: joint discriminative/generative gait recognition on synthetic silhouettes"};
  app.require_subcommand(1);
  app.footer(config_key_listing());
  const fs::path root = output_root();

  std::string out, data, checkpoint, resume, axis = "conditions";
  bool force = false;

  auto* synth = app.add_subcommand("synth-data", "render a synthetic walker dataset");
  int64_t ids = 40, seqs = 8, train_ids = -1, frames = 40;
  uint64_t synth_seed = 1;
  bool all_normal = false;
  synth->add_option("--out", out, "dataset directory (default $COD2_OUTPUT_ROOT/data)");
  synth->add_option("--ids", ids, "number of identities")->capture_default_str();
  synth->add_option("--seqs-per-id", seqs, "sequences per identity")->capture_default_str();
  synth->add_option("--train-ids", train_ids, "training identities (default: half)");
  synth->add_option("--frames", frames, "frames per sequence")->capture_default_str();
  synth->add_option("--seed", synth_seed, "dataset seed")->capture_default_str();
  synth->add_flag("--all-normal", all_normal, "no covariates");
  synth->add_flag("--force", force, "replace an existing dataset directory");

  auto* train_cmd = app.add_subcommand("train", "joint D+G training (or D only with both conditions off)");
  ConfigFlags train_flags;
  train_cmd->add_option("--data", data, "dataset directory")->required();
  train_cmd->add_option("--out", out, "run directory (default $COD2_OUTPUT_ROOT/train)");
  train_cmd->add_option("--resume", resume, "checkpoint to continue from");
  train_cmd->add_flag("--force", force, "replace an existing run directory");
  train_flags.attach(train_cmd);
  train_cmd->footer(config_key_listing());

  auto* eval_cmd = app.add_subcommand("eval", "Rank-k / mAP on the unseen-identity gallery and probe");
  std::vector<int64_t> ks = {1, 5};
  int64_t cmc = 0;
  eval_cmd->add_option("--data", data, "dataset directory")->required();
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint (generator optional)")->required();
  eval_cmd->add_option("--out", out, "output directory (default $COD2_OUTPUT_ROOT/eval)");
  eval_cmd->add_option("--k", ks, "ranks to report")->delimiter(',')->capture_default_str();
  eval_cmd->add_option("--cmc", cmc, "write cmc.csv up to this rank");
  eval_cmd->add_flag("--force", force, "replace an existing output directory");

  auto* gen_cmd = app.add_subcommand("generate", "reference / ground truth / generated PNG grids");
  int64_t count = 4;
  uint64_t gen_seed = 1;
  std::optional<int64_t> gen_m;
  gen_cmd->add_option("--data", data, "dataset directory")->required();
  gen_cmd->add_option("--checkpoint", checkpoint, "checkpoint with generator")->required();
  gen_cmd->add_option("--out", out, "output directory (default $COD2_OUTPUT_ROOT/generate)");
  gen_cmd->add_option("--count", count, "sequences to render")->capture_default_str();
  gen_cmd->add_option("--m", gen_m, "reference frames (default: the checkpoint's m)");
  gen_cmd->add_option("--seed", gen_seed, "sampling seed")->capture_default_str();
  gen_cmd->add_flag("--force", force, "replace an existing output directory");

  auto* ablate_cmd = app.add_subcommand("ablate", "train + evaluate every row of an ablation table");
  ConfigFlags ablate_flags;
  ablate_cmd->add_option("--data", data, "dataset directory")->required();
  ablate_cmd->add_option("--out", out, "output directory (default $COD2_OUTPUT_ROOT/ablate)");
  ablate_cmd->add_option("--axis", axis, "conditions | m | lambda_mode | fusion | all")->capture_default_str();
  ablate_cmd->add_flag("--force", force, "replace an existing output directory");
  ablate_flags.attach(ablate_cmd);
  ablate_cmd->footer(config_key_listing());

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << one_line(e.what()) << "\n";
    return 2;
  }

  auto out_or = [&](const char* name) { return out.empty() ? root / name : fs::path(out); };
  try {
    if (*synth) return cmd_synth_data(out_or("data"), ids, seqs, train_ids, frames, synth_seed, all_normal, force);
    if (*train_cmd) return cmd_train(data, out_or("train"), train_flags, resume, force);
    if (*eval_cmd) return cmd_eval(data, checkpoint, out_or("eval"), ks, cmc, force);
    if (*gen_cmd) return cmd_generate(data, checkpoint, out_or("generate"), count, gen_seed, gen_m, force);
    if (*ablate_cmd) return cmd_ablate(data, out_or("ablate"), ablate_flags, axis, force);
  } catch (const std::exception& e) {
    std::cerr << "error: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 1;
}
