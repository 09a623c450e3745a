#include "cod2/diffusion.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "cod2/data_synth.hpp"
#include "cod2/extractor.hpp"

namespace cod2 {
namespace F = torch::nn::functional;

VarianceSchedule VarianceSchedule::linear(double beta_start, double beta_end, int64_t steps) {
  if (steps < 1) throw std::invalid_argument("variance schedule needs at least one step");
  std::vector<double> betas(static_cast<size_t>(steps));
  for (int64_t i = 0; i < steps; ++i)
    betas[static_cast<size_t>(i)] =
        steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(steps - 1);
  return from_betas(std::move(betas));
}

VarianceSchedule VarianceSchedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw std::invalid_argument("variance schedule needs at least one step");
  VarianceSchedule schedule;
  double product = 1.0;
  double previous = 0.0;
  for (double beta : betas) {
    if (!(beta > 0.0 && beta < 1.0)) throw std::invalid_argument("betas must lie in (0, 1)");
    if (beta < previous) throw std::invalid_argument("betas must be non-decreasing");
    previous = beta;
    product *= 1.0 - beta;
    schedule.alpha_bars.push_back(product);
  }
  schedule.betas = std::move(betas);
  return schedule;
}

double VarianceSchedule::alpha_bar(int64_t t) const {
  if (t < 1 || t > steps())
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
  return alpha_bars[static_cast<size_t>(t - 1)];
}

torch::Tensor forward_noising(const torch::Tensor& x0, int64_t t, const VarianceSchedule& schedule,
                              torch::Generator& rng) {
  const double abar = schedule.alpha_bar(t);
  const auto eps = torch::randn(x0.sizes(), rng, x0.options());
  return std::sqrt(abar) * x0 + std::sqrt(1.0 - abar) * eps;
}

std::string to_string(WindowPosition position) {
  return position == WindowPosition::original ? "original" : "front";
}

std::string to_string(CleanPathway pathway) {
  return pathway == CleanPathway::all_blocks ? "all_blocks" : "first_block_only";
}

WindowPosition window_position_from_string(const std::string& name) {
  if (name == "original") return WindowPosition::original;
  if (name == "front") return WindowPosition::front;
  throw std::invalid_argument("unknown window position '" + name + "' (original | front)");
}

CleanPathway clean_pathway_from_string(const std::string& name) {
  if (name == "all_blocks") return CleanPathway::all_blocks;
  if (name == "first_block_only") return CleanPathway::first_block_only;
  throw std::invalid_argument("unknown clean pathway '" + name + "' (first_block_only | all_blocks)");
}

torch::Tensor NoiseSequence::reference() const {
  if (!has_reference()) throw std::logic_error("noise sequence has no reference window");
  std::vector<torch::Tensor> windows;
  for (size_t b = 0; b < slot_start.size(); ++b)
    windows.push_back(frames[static_cast<int64_t>(b)].narrow(1, slot_start[b], window_len));
  return torch::stack(windows);
}

NoiseSequence build_noise_sequence(const torch::Tensor& x0, int64_t m, torch::Generator& rng, WindowPosition position) {
  TORCH_CHECK(x0.dim() == 5 && x0.size(1) == 1, "build_noise_sequence expects (B, 1, T, H, W)");
  const int64_t B = x0.size(0), T = x0.size(2);
  if (m < 1 || m >= T)
    throw std::invalid_argument("window length m must satisfy 1 <= m < T (m=" + std::to_string(m) +
                                ", T=" + std::to_string(T) + ")");
  NoiseSequence noise;
  noise.window_len = m;
  noise.frames = torch::randn(x0.sizes(), rng, x0.options());
  const auto starts = torch::randint(0, T - m + 1, {B}, rng, torch::kInt64);
  std::vector<torch::Tensor> samples;
  for (int64_t b = 0; b < B; ++b) {
    const int64_t k = starts[b].item<int64_t>();
    const int64_t slot = position == WindowPosition::original ? k : 0;
    noise.source_start.push_back(k);
    noise.slot_start.push_back(slot);
    auto sample = noise.frames[b];
    samples.push_back(torch::cat({sample.narrow(1, 0, slot), x0[b].narrow(1, k, m),
                                  sample.narrow(1, slot + m, T - slot - m)},
                                 1));
  }
  noise.frames = torch::stack(samples);
  return noise;
}

NoiseSequence pure_noise_sequence(const torch::Tensor& x0, torch::Generator& rng) {
  TORCH_CHECK(x0.dim() == 5 && x0.size(1) == 1, "pure_noise_sequence expects (B, 1, T, H, W)");
  NoiseSequence noise;
  noise.frames = torch::randn(x0.sizes(), rng, x0.options());
  noise.source_start.assign(static_cast<size_t>(x0.size(0)), 0);
  noise.slot_start.assign(static_cast<size_t>(x0.size(0)), 0);
  return noise;
}

torch::Tensor clean_slot_overwrite(const torch::Tensor& activations, const torch::Tensor& clean,
                                   const std::vector<int64_t>& slot_start) {
  TORCH_CHECK(activations.dim() == 5 && clean.dim() == 5, "clean_slot_overwrite expects 5-D tensors");
  const int64_t B = activations.size(0), T = activations.size(2), m = clean.size(2);
  if (clean.size(0) != B || clean.size(1) != activations.size(1) || clean.size(3) != activations.size(3) ||
      clean.size(4) != activations.size(4) || static_cast<int64_t>(slot_start.size()) != B)
    throw std::invalid_argument("clean_slot_overwrite: clean activations do not match the main stream");
  std::vector<torch::Tensor> samples;
  samples.reserve(static_cast<size_t>(B));
  for (int64_t b = 0; b < B; ++b) {
    const int64_t s = slot_start[static_cast<size_t>(b)];
    if (s < 0 || m < 1 || s + m > T)
      throw std::out_of_range("clean slot range [" + std::to_string(s) + ", " + std::to_string(s + m) +
                              ") outside [0, " + std::to_string(T) + ")");
    if (m >= T) throw std::out_of_range("clean window must leave at least one noise slot");
    auto a = activations[b];
    samples.push_back(torch::cat({a.narrow(1, 0, s), clean[b], a.narrow(1, s + m, T - s - m)}, 1));
  }
  return torch::stack(samples);
}

std::vector<LadderRow> generator_ladder(int64_t frames) {
  const int64_t T = frames, H = kFrameHeight, W = kFrameWidth;
  return {
      {"block1", {32, T, H, W}},
      {"pool1", {32, T, H / 2, W / 2}},
      {"hcm1", {32, T, H / 2, W / 2}},
      {"block2", {64, T, H / 2, W / 2}},
      {"pool2", {64, T, H / 4, W / 4}},
      {"hcm2", {64, T, H / 4, W / 4}},
      {"block3", {128, T, H / 4, W / 4}},
      {"hcm3", {128, T, H / 4, W / 4}},
      {"block4", {64, T, H / 4, W / 4}},
      {"hcm4", {64, T, H / 4, W / 4}},
      {"upsample1", {64, T, H / 2, W / 2}},
      {"block5", {32, T, H / 2, W / 2}},
      {"hcm5", {32, T, H / 2, W / 2}},
      {"upsample2", {32, T, H, W}},
      {"block6", {1, T, H, W}},
      {"norm", {1, T, H, W}},
  };
}

GeneratorBlockImpl::GeneratorBlockImpl(int64_t in, int64_t mid, int64_t out, std::vector<int64_t> kernel1,
                                       std::vector<int64_t> kernel2, double slope_)
    : slope(slope_) {
  auto same = [](const std::vector<int64_t>& k) { return std::vector<int64_t>{k[0] / 2, k[1] / 2, k[2] / 2}; };
  conv1 = register_module("conv1", torch::nn::Conv3d(torch::nn::Conv3dOptions(in, mid, kernel1).padding(same(kernel1)).bias(false)));
  bn1 = register_module("bn1", torch::nn::BatchNorm3d(mid));
  conv2 = register_module("conv2", torch::nn::Conv3d(torch::nn::Conv3dOptions(mid, out, kernel2).padding(same(kernel2)).bias(false)));
  bn2 = register_module("bn2", torch::nn::BatchNorm3d(out));
}

namespace {

// Main stream `h` plus, while the clean pathway is active, the reference window `c` processed on
// its own. After every layer the window slots of `h` are replaced by `c`.
struct Streams {
  torch::Tensor h;
  torch::Tensor c;
  const std::vector<int64_t>* slots = nullptr;

  bool clean_active() const { return c.defined(); }
  void sync() {
    if (clean_active()) h = clean_slot_overwrite(h, c, *slots);
  }
};

torch::Tensor clean_batch_norm(const torch::nn::BatchNorm3d& bn, const torch::Tensor& x) {
  // Training: statistics of the clean window alone, running statistics untouched.
  // Eval: the same running statistics the main stream uses.
  const auto& opts = bn->options;
  if (bn->is_training())
    return torch::batch_norm(x, bn->weight, bn->bias, {}, {}, true, 0.0, opts.eps(), false);
  return torch::batch_norm(x, bn->weight, bn->bias, bn->running_mean, bn->running_var, false, 0.0, opts.eps(), false);
}

void run_block(GeneratorBlockImpl& block, Streams& s) {
  auto act = [&](const torch::Tensor& x) {
    return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(block.slope));
  };
  s.h = conv3d_same(s.h, block.conv1, TemporalPadding::zeros);
  if (s.clean_active()) s.c = conv3d_same(s.c, block.conv1, TemporalPadding::replicate);
  s.sync();
  s.h = act(block.bn1->forward(s.h));
  if (s.clean_active()) s.c = act(clean_batch_norm(block.bn1, s.c));
  s.sync();
  s.h = conv3d_same(s.h, block.conv2, TemporalPadding::zeros);
  if (s.clean_active()) s.c = conv3d_same(s.c, block.conv2, TemporalPadding::replicate);
  s.sync();
  s.h = act(block.bn2->forward(s.h));
  if (s.clean_active()) s.c = act(clean_batch_norm(block.bn2, s.c));
  s.sync();
}

torch::Tensor upsample2x(const torch::Tensor& x) {
  // bilinear, frame by frame
  const int64_t B = x.size(0), C = x.size(1), T = x.size(2), H = x.size(3), W = x.size(4);
  auto frames = x.transpose(1, 2).reshape({B * T, C, H, W});
  auto up = F::interpolate(frames, F::InterpolateFuncOptions()
                                       .size(std::vector<int64_t>{2 * H, 2 * W})
                                       .mode(torch::kBilinear)
                                       .align_corners(false));
  return up.reshape({B, T, C, 2 * H, 2 * W}).transpose(1, 2);
}

std::string shape_string(const std::vector<int64_t>& shape) {
  std::ostringstream out;
  out << "(";
  for (size_t i = 0; i < shape.size(); ++i) out << (i ? ", " : "") << shape[i];
  out << ")";
  return out.str();
}

}  // namespace

GenerativeModuleImpl::GenerativeModuleImpl(const GeneratorOptions& options) : options_(options) {
  const double slope = options.leaky_slope;
  struct BlockSpec {
    int64_t in, mid, out;
    std::vector<int64_t> k1, k2;
  };
  const std::vector<BlockSpec> specs = {
      {1, 32, 32, {7, 5, 5}, {5, 3, 3}},  {32, 64, 64, {5, 3, 3}, {3, 3, 3}},   {64, 128, 128, {3, 3, 3}, {3, 3, 3}},
      {128, 64, 64, {3, 3, 3}, {3, 3, 3}}, {64, 32, 32, {3, 3, 3}, {5, 3, 3}}, {32, 32, 1, {5, 3, 3}, {7, 5, 5}},
  };
  for (size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    blocks_.push_back(register_module("block" + std::to_string(i + 1), GeneratorBlock(s.in, s.mid, s.out, s.k1, s.k2, slope)));
  }
  const std::vector<int64_t> hcm_channels = {32, 64, 128, 64, 32};
  for (size_t i = 0; i < hcm_channels.size(); ++i)
    hcms_.push_back(register_module("hcm" + std::to_string(i + 1),
                                    HighLevelControl(hcm_channels[i], options.feature_channels, options.parts,
                                                     options.lambda_mode, options.fusion, options.epsilon)));
}

torch::Tensor GenerativeModuleImpl::forward(const NoiseSequence& noise, const torch::Tensor& identity_feature,
                                            GeneratorTrace* trace) {
  const auto& x = noise.frames;
  if (x.dim() != 5 || x.size(1) != 1 || x.size(3) != kFrameHeight || x.size(4) != kFrameWidth)
    throw std::invalid_argument("generator expects (B, 1, T, 64, 44) noise frames");
  if (identity_feature.dim() != 3 || identity_feature.size(0) != x.size(0) ||
      identity_feature.size(1) != options_.feature_channels || identity_feature.size(2) != options_.parts)
    throw std::invalid_argument("generator expects identity features (B, " + std::to_string(options_.feature_channels) +
                                ", " + std::to_string(options_.parts) + ")");

  const auto ladder = generator_ladder(x.size(2));
  size_t row = 0;
  Streams s;
  s.h = x;
  s.slots = &noise.slot_start;
  if (noise.has_reference()) s.c = noise.reference();

  auto record = [&](const std::string& name) {
    std::vector<int64_t> shape(s.h.sizes().begin() + 1, s.h.sizes().end());
    if (options_.check_shapes || trace) {
      const LadderRow& expected = ladder.at(row);
      if (expected.name != name || expected.shape != shape)
        throw std::logic_error("generator layer " + name + " produced " + shape_string(shape) + ", expected " +
                               expected.name + " " + shape_string(expected.shape));
    }
    if (trace) trace->rows.push_back({name, shape});
    ++row;
  };
  auto block = [&](size_t i) {
    run_block(*blocks_[i], s);
    if (trace) trace->block_outputs.push_back(s.h);
    record("block" + std::to_string(i + 1));
    if (i == 0 && options_.clean_pathway == CleanPathway::first_block_only) s.c = torch::Tensor();
  };
  auto hcm = [&](size_t i) {
    s.h = hcms_[i]->forward(s.h, identity_feature, TemporalPadding::zeros);
    if (s.clean_active()) s.c = hcms_[i]->forward(s.c, identity_feature, TemporalPadding::replicate);
    s.sync();
    record("hcm" + std::to_string(i + 1));
  };
  auto pool = [&](int n) {
    s.h = spatial_max_pool(s.h);
    if (s.clean_active()) s.c = spatial_max_pool(s.c);
    s.sync();
    record("pool" + std::to_string(n));
  };
  auto upsample = [&](int n) {
    s.h = upsample2x(s.h);
    if (s.clean_active()) s.c = upsample2x(s.c);
    s.sync();
    record("upsample" + std::to_string(n));
  };

  block(0);
  pool(1);
  hcm(0);
  block(1);
  pool(2);
  hcm(1);
  block(2);
  hcm(2);
  block(3);
  hcm(3);
  upsample(1);
  block(4);
  hcm(4);
  upsample(2);
  block(5);
  s.h = min_max_normalize(s.h, options_.epsilon);
  s.c = torch::Tensor();
  record("norm");
  return s.h;
}

}  // namespace cod2
