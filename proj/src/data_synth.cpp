#include "cod2/data_synth.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include "cod2/npz.hpp"

namespace cod2 {
namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

constexpr const char* kManifestFormat = "cod2-synth-v1";

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  return splitmix64(splitmix64(splitmix64(seed ^ splitmix64(a)) ^ b) ^ c);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

struct Point {
  double x;
  double y;
};

// Limb rectangle hanging from `joint`, rotated by `angle` from the downward vertical.
struct Limb {
  Point joint;
  double angle;
  double length;
  double half_width;

  bool contains(Point p) const {
    const double dx = std::sin(angle);
    const double dy = std::cos(angle);
    const double rx = p.x - joint.x;
    const double ry = p.y - joint.y;
    const double along = rx * dx + ry * dy;
    const double across = std::abs(rx * dy - ry * dx);
    return along >= -half_width && along <= length && across <= half_width;
  }
};

struct Ellipse {
  Point centre;
  double semi_x;
  double semi_y;

  bool contains(Point p) const {
    if (semi_x <= 0.0 || semi_y <= 0.0) return false;
    const double u = (p.x - centre.x) / semi_x;
    const double v = (p.y - centre.y) / semi_y;
    return u * u + v * v <= 1.0;
  }
};

// Binary silhouette of one frame on the render canvas.
void render_frame(const WalkerSpec& walker, const CovariateSpec& covariate, const SequenceNuisance& nuisance,
                  int64_t t, const RenderOptions& options, float* canvas) {
  const double height = static_cast<double>(options.canvas_height);
  const double width = static_cast<double>(options.canvas_width);
  const double body = 0.86 * height;
  const double ground = 0.96 * height;
  const double leg = walker.limb_length * body;
  const double head_radius = 0.065 * body;

  const double phase = walker.stride_frequency * static_cast<double>(t) + nuisance.start_phase;
  const double bob = 0.012 * body * std::cos(2.0 * phase);
  const double cx = 0.5 * width + nuisance.x_shift;
  const double hip_y = ground - leg + bob;

  const double torso_semi_y = 0.5 * (body - leg - 2.0 * head_radius);
  double torso_semi_x = torso_semi_y / walker.body_aspect;
  double torso_semi_y_drawn = torso_semi_y;
  const double s = std::clamp(covariate.intensity, 0.0, 1.0);
  if (covariate.kind == CovariateKind::clothing) {
    torso_semi_x *= 1.0 + 0.7 * s;
    torso_semi_y_drawn *= 1.0 + 0.15 * s;
  }
  const Point torso_centre{cx, hip_y - torso_semi_y * 0.9};
  const Ellipse torso{torso_centre, torso_semi_x, torso_semi_y_drawn};
  const Ellipse head{{cx, torso_centre.y - torso_semi_y - head_radius * 0.9}, head_radius, head_radius};

  const double limb_half = std::max(1.5, 0.33 * torso_semi_y / walker.body_aspect);
  const double leg_swing = 0.42;
  const Point hip{cx, hip_y};
  const Point shoulder{cx, torso_centre.y - 0.7 * torso_semi_y};
  const double arm = 0.78 * leg;
  const double arm_angle = walker.arm_swing_amplitude * std::sin(phase + walker.phase_offset);
  const std::array<Limb, 4> limbs = {
      Limb{hip, leg_swing * std::sin(phase), leg, limb_half},
      Limb{hip, -leg_swing * std::sin(phase), leg, limb_half},
      Limb{shoulder, arm_angle, arm, 0.8 * limb_half},
      Limb{shoulder, -arm_angle, arm, 0.8 * limb_half},
  };

  Ellipse bag{{0, 0}, 0, 0};
  if (covariate.kind == CovariateKind::carrying && s > 0.0) {
    const double radius = s * 0.55 * torso_semi_y;
    bag = Ellipse{{cx + torso_semi_x + 0.6 * radius, hip_y - 0.35 * torso_semi_y}, radius, 0.8 * radius};
  }
  double band_top = height;
  double band_bottom = height;
  if (covariate.kind == CovariateKind::occlusion && s > 0.0) {
    band_top = 0.42 * height;
    band_bottom = band_top + s * 0.3 * height;
  }

  for (int64_t y = 0; y < options.canvas_height; ++y) {
    const double py = static_cast<double>(y) + 0.5;
    const bool occluded = py >= band_top && py < band_bottom;
    for (int64_t x = 0; x < options.canvas_width; ++x) {
      const Point p{static_cast<double>(x) + 0.5, py};
      bool inside = torso.contains(p) || head.contains(p) || bag.contains(p);
      for (const Limb& limb : limbs) inside = inside || limb.contains(p);
      canvas[y * options.canvas_width + x] = (inside && !occluded) ? 1.0f : 0.0f;
    }
  }
}

// Night: blend toward a 3x3 erosion, then salt noise. Intensity 0 leaves frames untouched.
void apply_night(torch::Tensor& frames, double intensity, uint64_t noise_seed) {
  if (intensity <= 0.0) return;
  const int64_t T = frames.size(0), H = frames.size(1), W = frames.size(2);
  auto acc = frames.accessor<float, 3>();
  std::mt19937_64 rng(noise_seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::vector<float> eroded(static_cast<size_t>(H * W));
  for (int64_t t = 0; t < T; ++t) {
    for (int64_t y = 0; y < H; ++y) {
      for (int64_t x = 0; x < W; ++x) {
        float lowest = 1.0f;
        for (int64_t dy = -1; dy <= 1; ++dy)
          for (int64_t dx = -1; dx <= 1; ++dx) {
            const int64_t yy = std::clamp<int64_t>(y + dy, 0, H - 1);
            const int64_t xx = std::clamp<int64_t>(x + dx, 0, W - 1);
            lowest = std::min(lowest, acc[t][yy][xx]);
          }
        eroded[static_cast<size_t>(y * W + x)] = lowest;
      }
    }
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        const double v = (1.0 - intensity) * acc[t][y][x] + intensity * eroded[static_cast<size_t>(y * W + x)];
        acc[t][y][x] = static_cast<float>(coin(rng) < 0.03 * intensity ? 1.0 : v);
      }
  }
}

std::string sequence_stem(int64_t seq_index, CovariateKind kind) {
  std::ostringstream name;
  name << "seq_" << std::setw(3) << std::setfill('0') << seq_index << "_" << to_string(kind);
  return name.str();
}

std::string identity_dir(int64_t identity_id) {
  std::ostringstream name;
  name << "id_" << std::setw(5) << std::setfill('0') << identity_id;
  return name.str();
}

json walker_json(const WalkerSpec& w) {
  return json{{"body_aspect", w.body_aspect},
              {"limb_length", w.limb_length},
              {"stride_frequency", w.stride_frequency},
              {"arm_swing_amplitude", w.arm_swing_amplitude},
              {"phase_offset", w.phase_offset}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream file(path, std::ios::trunc);
  if (!file) throw std::runtime_error("cannot write " + path.string());
  file << text;
  if (!file) throw std::runtime_error("write failed for " + path.string());
}

void fnv1a(uint64_t& state, const std::string& bytes) {
  for (unsigned char c : bytes) {
    state ^= c;
    state *= 0x100000001b3ULL;
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(file), std::istreambuf_iterator<char>()};
}

}  // namespace

WalkerSpec walker_for(int64_t identity_id, uint64_t dataset_seed) {
  std::mt19937_64 rng(mix_seed(dataset_seed, 0x57a1ce5ULL, static_cast<uint64_t>(identity_id)));
  WalkerSpec w;
  w.identity_id = identity_id;
  w.body_aspect = uniform(rng, 2.2, 3.8);
  w.limb_length = uniform(rng, 0.34, 0.56);
  w.stride_frequency = uniform(rng, 0.16, 0.48);
  w.arm_swing_amplitude = uniform(rng, 0.15, 0.9);
  w.phase_offset = uniform(rng, -0.8, 0.8);
  return w;
}

std::string to_string(CovariateKind kind) {
  switch (kind) {
    case CovariateKind::normal: return "normal";
    case CovariateKind::carrying: return "carrying";
    case CovariateKind::clothing: return "clothing";
    case CovariateKind::occlusion: return "occlusion";
    case CovariateKind::night: return "night";
  }
  throw std::logic_error("unknown covariate kind");
}

CovariateKind covariate_from_string(const std::string& name) {
  for (CovariateKind kind : kAllCovariates)
    if (to_string(kind) == name) return kind;
  throw std::invalid_argument("unknown covariate kind '" + name + "'");
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::gallery: return "gallery";
    case Split::probe: return "probe";
  }
  throw std::logic_error("unknown split");
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "gallery") return Split::gallery;
  if (name == "probe") return Split::probe;
  throw std::invalid_argument("unknown split '" + name + "'");
}

void BatchSpec::validate() const {
  if (P < 2 || K < 2)
    throw std::invalid_argument("batch needs P >= 2 and K >= 2 (got P=" + std::to_string(P) +
                                ", K=" + std::to_string(K) + ")");
}

CovariateMix CovariateMix::all_normal() {
  CovariateMix mix;
  mix.weights = {1.0, 0.0, 0.0, 0.0, 0.0};
  return mix;
}

SilhouetteSequence render_sequence(const WalkerSpec& walker, const CovariateSpec& covariate,
                                   const SequenceNuisance& nuisance, const RenderOptions& options,
                                   uint64_t noise_seed) {
  auto canvas = torch::empty({options.frames, options.canvas_height, options.canvas_width}, torch::kFloat32);
  float* data = canvas.data_ptr<float>();
  const int64_t plane = options.canvas_height * options.canvas_width;
  for (int64_t t = 0; t < options.frames; ++t) render_frame(walker, covariate, nuisance, t, options, data + t * plane);

  SilhouetteSequence seq;
  seq.frames = resize_bilinear(canvas, kFrameHeight, kFrameWidth);
  if (covariate.kind == CovariateKind::night) apply_night(seq.frames, std::clamp(covariate.intensity, 0.0, 1.0), noise_seed);
  seq.identity_id = walker.identity_id;
  seq.covariate = covariate;
  return seq;
}

std::vector<ManifestEntry> generate_dataset(const DatasetRequest& request, const fs::path& root) {
  if (request.num_ids < 2) throw std::invalid_argument("num_ids must be >= 2 (got " + std::to_string(request.num_ids) + ")");
  if (request.seqs_per_id < 1) throw std::invalid_argument("seqs_per_id must be >= 1");
  const int64_t train_ids = request.train_ids < 0 ? request.num_ids / 2 : request.train_ids;
  if (train_ids > request.num_ids) throw std::invalid_argument("train_ids exceeds num_ids");
  if (train_ids < request.num_ids && request.gallery_per_id >= request.seqs_per_id)
    throw std::invalid_argument("gallery_per_id must leave at least one probe sequence per evaluation identity");

  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec || !fs::is_directory(root)) throw std::runtime_error("output path " + root.string() + " is not writable");
  if (!fs::is_empty(root)) throw std::runtime_error("output directory " + root.string() + " is not empty");

  double total_weight = 0.0;
  for (double w : request.covariate_mix.weights) total_weight += w;
  if (total_weight <= 0.0) throw std::invalid_argument("covariate mix has no positive weight");

  std::vector<ManifestEntry> entries;
  json manifest_sequences = json::array();
  int64_t next_seq_id = 0;
  for (int64_t id = 0; id < request.num_ids; ++id) {
    const WalkerSpec walker = walker_for(id, request.seed);
    const fs::path id_dir = root / identity_dir(id);
    fs::create_directories(id_dir);
    for (int64_t s = 0; s < request.seqs_per_id; ++s) {
      std::mt19937_64 rng(mix_seed(request.seed, 0x5e9ULL, static_cast<uint64_t>(id), static_cast<uint64_t>(s)));
      SequenceNuisance nuisance;
      nuisance.start_phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      nuisance.x_shift = uniform(rng, -3.0, 3.0);

      CovariateSpec covariate;
      if (s >= request.covariate_mix.leading_normal) {
        std::discrete_distribution<int> pick(request.covariate_mix.weights.begin(), request.covariate_mix.weights.end());
        covariate.kind = kAllCovariates[static_cast<size_t>(pick(rng))];
        const double intensity = uniform(rng, request.covariate_mix.min_intensity, request.covariate_mix.max_intensity);
        covariate.intensity = covariate.kind == CovariateKind::normal ? 0.0 : intensity;
      }
      const uint64_t noise_seed = mix_seed(request.seed, 0x4e1647ULL, static_cast<uint64_t>(id), static_cast<uint64_t>(s));
      SilhouetteSequence seq = render_sequence(walker, covariate, nuisance, request.render, noise_seed);

      ManifestEntry entry;
      entry.seq_id = next_seq_id++;
      entry.identity_id = id;
      entry.seq_index = s;
      entry.covariate = covariate;
      if (id < train_ids)
        entry.split = Split::train;
      else
        entry.split = s < request.gallery_per_id ? Split::gallery : Split::probe;
      const std::string stem = sequence_stem(s, covariate.kind);
      entry.path = identity_dir(id) + "/" + stem + ".npz";
      entry.meta_path = identity_dir(id) + "/" + stem + ".meta.json";

      npz::Array array;
      array.shape = {seq.frames.size(0), seq.frames.size(1), seq.frames.size(2)};
      auto contiguous = seq.frames.contiguous();
      array.data.assign(contiguous.data_ptr<float>(), contiguous.data_ptr<float>() + contiguous.numel());
      npz::write(root / entry.path, "frames", array);

      json meta{{"identity_id", id},
                {"seq_id", entry.seq_id},
                {"seq_index", s},
                {"covariate", {{"kind", to_string(covariate.kind)}, {"intensity", covariate.intensity}}},
                {"seed", request.seed},
                {"walker", walker_json(walker)},
                {"nuisance", {{"start_phase", nuisance.start_phase}, {"x_shift", nuisance.x_shift}}}};
      write_text(root / entry.meta_path, meta.dump(2) + "\n");

      manifest_sequences.push_back(json{{"seq_id", entry.seq_id},
                                        {"identity_id", id},
                                        {"seq_index", s},
                                        {"covariate", {{"kind", to_string(covariate.kind)}, {"intensity", covariate.intensity}}},
                                        {"split", to_string(entry.split)},
                                        {"path", entry.path},
                                        {"meta", entry.meta_path}});
      entries.push_back(entry);
    }
  }

  json manifest{{"format", kManifestFormat},
                {"seed", request.seed},
                {"num_ids", request.num_ids},
                {"seqs_per_id", request.seqs_per_id},
                {"train_ids", train_ids},
                {"frames", request.render.frames},
                {"height", kFrameHeight},
                {"width", kFrameWidth},
                {"sequences", manifest_sequences}};
  write_text(root / "manifest.json", manifest.dump(2) + "\n");
  return entries;
}

GaitDataset GaitDataset::open(const fs::path& root) {
  const fs::path manifest_path = root / "manifest.json";
  if (!fs::exists(manifest_path)) throw std::runtime_error("no manifest.json in " + root.string());
  json manifest;
  try {
    manifest = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != kManifestFormat)
    throw std::runtime_error("unsupported manifest format in " + manifest_path.string());

  GaitDataset dataset;
  dataset.root_ = root;
  std::set<int64_t> train_ids;
  for (const auto& item : manifest.at("sequences")) {
    ManifestEntry entry;
    entry.seq_id = item.at("seq_id").get<int64_t>();
    entry.identity_id = item.at("identity_id").get<int64_t>();
    entry.seq_index = item.at("seq_index").get<int64_t>();
    entry.covariate.kind = covariate_from_string(item.at("covariate").at("kind").get<std::string>());
    entry.covariate.intensity = item.at("covariate").at("intensity").get<double>();
    entry.split = split_from_string(item.at("split").get<std::string>());
    entry.path = item.at("path").get<std::string>();
    entry.meta_path = item.at("meta").get<std::string>();
    if (entry.split == Split::train) train_ids.insert(entry.identity_id);
    dataset.entries_.push_back(entry);
  }
  dataset.train_identities_.assign(train_ids.begin(), train_ids.end());
  for (size_t i = 0; i < dataset.train_identities_.size(); ++i)
    dataset.labels_[dataset.train_identities_[i]] = static_cast<int64_t>(i);
  return dataset;
}

std::vector<ManifestEntry> GaitDataset::split(Split split) const {
  std::vector<ManifestEntry> out;
  std::copy_if(entries_.begin(), entries_.end(), std::back_inserter(out),
               [split](const ManifestEntry& e) { return e.split == split; });
  return out;
}

int64_t GaitDataset::label_of(int64_t identity_id) const {
  auto it = labels_.find(identity_id);
  if (it == labels_.end()) throw std::out_of_range("identity " + std::to_string(identity_id) + " is not a training identity");
  return it->second;
}

SilhouetteSequence GaitDataset::load(const ManifestEntry& entry) const {
  auto cached = cache_.find(entry.seq_id);
  if (cached == cache_.end()) {
    const npz::Array array = npz::read(root_ / entry.path, "frames");
    if (array.shape.size() != 3 || array.shape[1] != kFrameHeight || array.shape[2] != kFrameWidth)
      throw std::runtime_error("sequence " + std::to_string(entry.seq_id) + " is not T x 64 x 44");
    auto frames = torch::from_blob(const_cast<float*>(array.data.data()), array.shape, torch::kFloat32).clone();
    cached = cache_.emplace(entry.seq_id, frames).first;
  }
  SilhouetteSequence seq;
  seq.frames = cached->second;
  seq.identity_id = entry.identity_id;
  seq.covariate = entry.covariate;
  seq.seq_id = entry.seq_id;
  return seq;
}

std::string GaitDataset::content_hash() const {
  uint64_t state = 0xcbf29ce484222325ULL;
  fnv1a(state, read_file(root_ / "manifest.json"));
  for (const ManifestEntry& entry : entries_) {
    fnv1a(state, read_file(root_ / entry.path));
    fnv1a(state, read_file(root_ / entry.meta_path));
  }
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << state;
  return hex.str();
}

SilhouetteSequence sample_clip(const SilhouetteSequence& seq, int64_t length, std::mt19937_64& rng) {
  if (length < 1) throw std::invalid_argument("clip length must be >= 1 (got " + std::to_string(length) + ")");
  if (seq.length() < length)
    throw std::invalid_argument("sequence has " + std::to_string(seq.length()) + " frames, clip needs " +
                                std::to_string(length));
  const int64_t offset = std::uniform_int_distribution<int64_t>(0, seq.length() - length)(rng);
  SilhouetteSequence clip = seq;
  clip.frames = seq.frames.narrow(0, offset, length);
  return clip;
}

torch::Tensor resize_bilinear(const torch::Tensor& frames, int64_t height, int64_t width) {
  TORCH_CHECK(frames.dim() == 3, "resize_bilinear expects (T, H, W)");
  const auto src = frames.to(torch::kFloat32).contiguous();
  const int64_t T = src.size(0), H = src.size(1), W = src.size(2);
  auto out = torch::empty({T, height, width}, torch::kFloat32);
  auto in_acc = src.accessor<float, 3>();
  auto out_acc = out.accessor<float, 3>();

  auto source_index = [](int64_t dst, int64_t in_size, int64_t out_size) {
    const double scale = static_cast<double>(in_size) / static_cast<double>(out_size);
    const double pos = std::max(0.0, (static_cast<double>(dst) + 0.5) * scale - 0.5);
    const int64_t lo = std::min(static_cast<int64_t>(pos), in_size - 1);
    const int64_t hi = std::min(lo + 1, in_size - 1);
    return std::tuple<int64_t, int64_t, double>(lo, hi, pos - static_cast<double>(lo));
  };

  for (int64_t y = 0; y < height; ++y) {
    const auto [y0, y1, wy] = source_index(y, H, height);
    for (int64_t x = 0; x < width; ++x) {
      const auto [x0, x1, wx] = source_index(x, W, width);
      for (int64_t t = 0; t < T; ++t) {
        const double top = (1.0 - wx) * in_acc[t][y0][x0] + wx * in_acc[t][y0][x1];
        const double bottom = (1.0 - wx) * in_acc[t][y1][x0] + wx * in_acc[t][y1][x1];
        out_acc[t][y][x] = static_cast<float>(std::clamp((1.0 - wy) * top + wy * bottom, 0.0, 1.0));
      }
    }
  }
  return out;
}

SilhouetteSequence resize_frames(const SilhouetteSequence& seq) {
  SilhouetteSequence out = seq;
  out.frames = resize_bilinear(seq.frames, kFrameHeight, kFrameWidth);
  return out;
}

std::vector<SilhouetteSequence> pk_sampler(const GaitDataset& dataset, const BatchSpec& batch, int64_t clip_length,
                                           std::mt19937_64& rng) {
  batch.validate();
  std::map<int64_t, std::vector<const ManifestEntry*>> by_identity;
  for (const ManifestEntry& entry : dataset.entries())
    if (entry.split == Split::train) by_identity[entry.identity_id].push_back(&entry);

  std::vector<int64_t> eligible;
  for (const auto& [id, seqs] : by_identity)
    if (static_cast<int64_t>(seqs.size()) >= batch.K) eligible.push_back(id);
  if (static_cast<int64_t>(eligible.size()) < batch.P)
    throw std::invalid_argument("pk_sampler needs " + std::to_string(batch.P) + " identities with >= " +
                                std::to_string(batch.K) + " sequences, dataset has " +
                                std::to_string(eligible.size()) + " (short by " +
                                std::to_string(batch.P - static_cast<int64_t>(eligible.size())) + ")");

  std::shuffle(eligible.begin(), eligible.end(), rng);
  eligible.resize(static_cast<size_t>(batch.P));
  std::vector<SilhouetteSequence> clips;
  clips.reserve(static_cast<size_t>(batch.P * batch.K));
  for (int64_t id : eligible) {
    std::vector<const ManifestEntry*> seqs = by_identity[id];
    std::shuffle(seqs.begin(), seqs.end(), rng);
    for (int64_t k = 0; k < batch.K; ++k) clips.push_back(sample_clip(dataset.load(*seqs[static_cast<size_t>(k)]), clip_length, rng));
  }
  return clips;
}

Batch stack_clips(const GaitDataset& dataset, const std::vector<SilhouetteSequence>& clips) {
  if (clips.empty()) throw std::invalid_argument("stack_clips: no clips");
  std::vector<torch::Tensor> frames;
  std::vector<int64_t> labels;
  Batch batch;
  for (const SilhouetteSequence& clip : clips) {
    frames.push_back(clip.frames.unsqueeze(0));
    labels.push_back(dataset.label_of(clip.identity_id));
    batch.identity_ids.push_back(clip.identity_id);
  }
  batch.frames = torch::stack(frames);
  batch.labels = torch::tensor(labels, torch::kInt64);
  return batch;
}

}  // namespace cod2
