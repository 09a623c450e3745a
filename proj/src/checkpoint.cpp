#include "cod2/checkpoint.hpp"

#include <torch/csrc/jit/serialization/pickle.h>

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace cod2 {
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kFormat = "cod2-checkpoint";

using TensorMap = std::map<std::string, torch::Tensor>;

void collect(const torch::nn::Module& module, const std::string& prefix, TensorMap& out) {
  for (const auto& item : module.named_parameters(true)) out[prefix + "." + item.key()] = item.value().detach().clone();
  for (const auto& item : module.named_buffers(true)) out[prefix + "." + item.key()] = item.value().detach().clone();
}

std::string sizes(const torch::Tensor& t) {
  std::ostringstream s;
  s << t.sizes();
  return s.str();
}

// Copies tensors `prefix.<name>` into the module; returns problems instead of throwing so all of
// them can be reported at once.
void restore(torch::nn::Module& module, const std::string& prefix, const TensorMap& tensors,
             std::vector<std::string>& problems) {
  torch::NoGradGuard no_grad;
  auto assign = [&](const std::string& name, torch::Tensor& target) {
    const std::string key = prefix + "." + name;
    auto it = tensors.find(key);
    if (it == tensors.end()) {
      problems.push_back("missing " + key);
      return;
    }
    if (it->second.sizes() != target.sizes()) {
      problems.push_back("shape mismatch for " + key + ": checkpoint " + sizes(it->second) + " vs model " +
                         sizes(target));
      return;
    }
    target.copy_(it->second);
  };
  for (auto& item : module.named_parameters(true)) assign(item.key(), item.value());
  for (auto& item : module.named_buffers(true)) assign(item.key(), item.value());
}

json meta_json(const CheckpointMeta& meta) {
  return json{{"backbone", meta.backbone},
              {"channels", meta.channels},
              {"parts", meta.parts},
              {"num_classes", meta.num_classes},
              {"step", meta.step},
              {"has_generator", meta.has_generator},
              {"config", to_json(meta.config)},
              {"dataset_hash", meta.dataset_hash}};
}

CheckpointMeta meta_from_json(const json& j) {
  CheckpointMeta meta;
  meta.backbone = j.at("backbone").get<std::string>();
  meta.channels = j.at("channels").get<int64_t>();
  meta.parts = j.at("parts").get<int64_t>();
  meta.num_classes = j.at("num_classes").get<int64_t>();
  meta.step = j.at("step").get<int64_t>();
  meta.has_generator = j.at("has_generator").get<bool>();
  meta.config = apply_config(TrainConfig{}, j.at("config"));
  meta.dataset_hash = j.value("dataset_hash", "");
  return meta;
}

struct Container {
  CheckpointMeta meta;
  TensorMap tensors;
  torch::Tensor optimizer;  // uint8 bytes or undefined
};

Container read_container(const fs::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  c10::IValue root;
  try {
    root = torch::pickle_load(bytes);
  } catch (const std::exception& e) {
    throw std::runtime_error("checkpoint " + path.string() + " is not readable: " + e.what());
  }
  if (!root.isGenericDict()) throw std::runtime_error("checkpoint " + path.string() + " has an unexpected layout");
  auto dict = root.toGenericDict();
  if (!dict.contains("format") || dict.at("format").toStringRef() != kFormat)
    throw std::runtime_error(path.string() + " is not a cod2 checkpoint");
  const int64_t version = dict.at("version").toInt();
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                             std::to_string(kCheckpointVersion) + ")");

  Container c;
  c.meta = meta_from_json(json::parse(dict.at("meta").toStringRef()));
  for (const auto& entry : dict.at("tensors").toGenericDict())
    c.tensors[entry.key().toStringRef()] = entry.value().toTensor();
  if (dict.contains("optimizer")) c.optimizer = dict.at("optimizer").toTensor();
  return c;
}

void write_container(const fs::path& path, const CheckpointMeta& meta, const TensorMap& tensors,
                     const torch::Tensor& optimizer) {
  c10::Dict<std::string, torch::Tensor> tensor_dict;
  for (const auto& [key, value] : tensors) tensor_dict.insert(key, value);
  c10::impl::GenericDict dict(c10::StringType::get(), c10::AnyType::get());
  dict.insert("format", std::string(kFormat));
  dict.insert("version", kCheckpointVersion);
  dict.insert("meta", meta_json(meta).dump());
  dict.insert("tensors", tensor_dict);
  if (optimizer.defined()) dict.insert("optimizer", optimizer);
  const std::vector<char> bytes = torch::pickle_save(dict);

  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream file(tmp, std::ios::binary | std::ios::trunc);
    if (!file) throw std::runtime_error("cannot write checkpoint " + path.string());
    file.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!file) throw std::runtime_error("write failed for checkpoint " + path.string());
  }
  fs::rename(tmp, path);
}

}  // namespace

ModelBundle ModelBundle::build(const TrainConfig& config, int64_t num_classes, bool with_generator) {
  torch::manual_seed(config.seed);
  ModelBundle models;
  models.backbone = make_backbone(config.extractor);
  const int64_t C = models.backbone->channels();
  const int64_t p = models.backbone->parts();
  models.heads = BNNeckHeads(C, p, num_classes);
  if (with_generator) {
    GeneratorOptions g;
    g.feature_channels = C;
    g.parts = p;
    g.lambda_mode = config.ablation.lambda_mode;
    g.fusion = config.effective_fusion();
    g.clean_pathway = config.ablation.clean_pathway;
    g.epsilon = config.hcm_epsilon;
    models.generator = GenerativeModule(g);
    if (!config.share_heads) models.gen_heads = BNNeckHeads(C, p, num_classes);
  }
  return models;
}

std::vector<torch::Tensor> ModelBundle::parameters() const {
  std::vector<torch::Tensor> params = backbone->parameters();
  auto append = [&](const std::vector<torch::Tensor>& more) { params.insert(params.end(), more.begin(), more.end()); };
  append(heads->parameters());
  if (gen_heads) append(gen_heads->parameters());
  if (generator) append(generator->parameters());
  return params;
}

void ModelBundle::train(bool on) {
  backbone->train(on);
  heads->train(on);
  if (gen_heads) gen_heads->train(on);
  if (generator) generator->train(on);
}

void save_checkpoint(const fs::path& path, const ModelBundle& models, const CheckpointMeta& meta,
                     const torch::optim::Optimizer* optimizer) {
  TensorMap tensors;
  collect(*models.backbone, "backbone", tensors);
  collect(*models.heads, "heads", tensors);
  if (models.gen_heads) collect(*models.gen_heads, "gen_heads", tensors);
  if (models.generator) collect(*models.generator, "generator", tensors);

  torch::Tensor optimizer_bytes;
  if (optimizer) {
    torch::serialize::OutputArchive archive;
    optimizer->save(archive);
    std::ostringstream stream;
    archive.save_to(stream);
    const std::string raw = stream.str();
    optimizer_bytes = torch::empty({static_cast<int64_t>(raw.size())}, torch::kUInt8);
    std::memcpy(optimizer_bytes.data_ptr<uint8_t>(), raw.data(), raw.size());
  }
  CheckpointMeta stored = meta;
  stored.has_generator = models.has_generator();
  write_container(path, stored, tensors, optimizer_bytes);
}

CheckpointMeta read_checkpoint_meta(const fs::path& path) { return read_container(path).meta; }

ModelBundle load_checkpoint(const fs::path& path, bool with_generator, CheckpointMeta* meta_out) {
  Container c = read_container(path);
  if (with_generator && !c.meta.has_generator)
    throw std::runtime_error("checkpoint " + path.string() + " has no generator");
  ModelBundle models = ModelBundle::build(c.meta.config, c.meta.num_classes, with_generator);
  std::vector<std::string> problems;
  restore(*models.backbone, "backbone", c.tensors, problems);
  restore(*models.heads, "heads", c.tensors, problems);
  if (with_generator) {
    restore(*models.generator, "generator", c.tensors, problems);
    if (models.gen_heads) restore(*models.gen_heads, "gen_heads", c.tensors, problems);
  }
  if (!problems.empty()) {
    std::string message = "incompatible checkpoint " + path.string() + ":";
    for (const auto& p : problems) message += " " + p + ";";
    throw std::runtime_error(message);
  }
  models.train(false);
  if (meta_out) *meta_out = c.meta;
  return models;
}

void load_checkpoint_into(const fs::path& path, ModelBundle& models, torch::optim::Optimizer* optimizer,
                          CheckpointMeta* meta_out) {
  Container c = read_container(path);
  std::vector<std::string> problems;
  restore(*models.backbone, "backbone", c.tensors, problems);
  restore(*models.heads, "heads", c.tensors, problems);
  if (models.gen_heads) restore(*models.gen_heads, "gen_heads", c.tensors, problems);
  if (models.generator) restore(*models.generator, "generator", c.tensors, problems);
  if (!problems.empty()) {
    std::string message = "incompatible checkpoint " + path.string() + ":";
    for (const auto& p : problems) message += " " + p + ";";
    throw std::runtime_error(message);
  }
  if (optimizer && c.optimizer.defined()) {
    const std::string raw(reinterpret_cast<const char*>(c.optimizer.data_ptr<uint8_t>()),
                          static_cast<size_t>(c.optimizer.numel()));
    std::istringstream stream(raw);
    torch::serialize::InputArchive archive;
    archive.load_from(stream);
    optimizer->load(archive);
  }
  if (meta_out) *meta_out = c.meta;
}

void strip_generator(const fs::path& in, const fs::path& out) {
  Container c = read_container(in);
  TensorMap kept;
  for (const auto& [key, value] : c.tensors)
    if (key.rfind("generator.", 0) != 0 && key.rfind("gen_heads.", 0) != 0) kept[key] = value;
  c.meta.has_generator = false;
  write_container(out, c.meta, kept, torch::Tensor());
}

}  // namespace cod2
