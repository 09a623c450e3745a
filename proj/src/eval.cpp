#include "cod2/eval.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace cod2 {
namespace fs = std::filesystem;
using json = nlohmann::json;

int64_t FeatureTable::row_of(int64_t seq_id) const {
  auto it = std::find(seq_ids.begin(), seq_ids.end(), seq_id);
  if (it == seq_ids.end()) throw std::out_of_range("sequence " + std::to_string(seq_id) + " has no feature row");
  return static_cast<int64_t>(it - seq_ids.begin());
}

torch::Tensor extract(ModelBundle& models, const torch::Tensor& frames) {
  torch::NoGradGuard no_grad;
  models.backbone->eval();
  models.heads->eval();
  auto embeddings = models.heads->forward(models.backbone->forward(frames)).embeddings;
  return embeddings.reshape({embeddings.size(0), -1}).contiguous();
}

FeatureTable embed_all(ModelBundle& models, const GaitDataset& dataset, const std::vector<ManifestEntry>& entries) {
  std::vector<int64_t> missing;
  for (const auto& e : entries)
    if (!fs::exists(dataset.root() / e.path)) missing.push_back(e.seq_id);
  if (!missing.empty()) {
    std::string ids;
    for (auto id : missing) ids += (ids.empty() ? "" : ",") + std::to_string(id);
    throw std::runtime_error("missing sequence files for seq_ids " + ids);
  }

  FeatureTable table;
  std::vector<torch::Tensor> rows;
  for (const auto& e : entries) {
    const SilhouetteSequence seq = dataset.load(e);
    rows.push_back(extract(models, seq.frames.unsqueeze(0).unsqueeze(0)));
    table.seq_ids.push_back(e.seq_id);
    table.identities.push_back(e.identity_id);
    table.covariates.push_back(e.covariate.kind);
  }
  table.features = rows.empty() ? torch::empty({0, 0}) : torch::cat(rows, 0);
  return table;
}

EvalProtocol EvalProtocol::from_dataset(const GaitDataset& dataset) {
  EvalProtocol protocol;
  for (const auto& e : dataset.entries()) {
    ProtocolEntry p{e.seq_id, e.identity_id, e.covariate.kind};
    if (e.split == Split::gallery) protocol.gallery.push_back(p);
    if (e.split == Split::probe) protocol.probe.push_back(p);
  }
  protocol.validate();
  return protocol;
}

void EvalProtocol::validate() const {
  std::set<int64_t> gallery_seqs, gallery_ids;
  for (const auto& g : gallery) {
    gallery_seqs.insert(g.seq_id);
    gallery_ids.insert(g.identity);
  }
  for (const auto& p : probe) {
    if (gallery_seqs.count(p.seq_id))
      throw std::invalid_argument("sequence " + std::to_string(p.seq_id) + " is in both gallery and probe");
    if (!gallery_ids.count(p.identity))
      throw std::invalid_argument("probe identity " + std::to_string(p.identity) + " has no gallery entry");
  }
}

namespace {

struct Ranking {
  const ProtocolEntry* probe;
  std::vector<int64_t> gallery_order;  // gallery indices sorted by distance, ties by gallery order
};

std::vector<Ranking> rank_all(const FeatureTable& features, const EvalProtocol& protocol) {
  protocol.validate();
  const torch::Tensor table = features.features.to(torch::kFloat64).contiguous();
  const int64_t dim = table.size(1);
  const double* data = table.data_ptr<double>();

  std::vector<int64_t> gallery_rows;
  for (const auto& g : protocol.gallery) gallery_rows.push_back(features.row_of(g.seq_id));

  std::vector<Ranking> out;
  for (const auto& p : protocol.probe) {
    const double* q = data + features.row_of(p.seq_id) * dim;
    std::vector<double> dist(gallery_rows.size());
    for (size_t j = 0; j < gallery_rows.size(); ++j) {
      const double* g = data + gallery_rows[j] * dim;
      double sum = 0.0;
      for (int64_t d = 0; d < dim; ++d) sum += (q[d] - g[d]) * (q[d] - g[d]);
      dist[j] = sum;
    }
    Ranking r{&p, std::vector<int64_t>(gallery_rows.size())};
    std::iota(r.gallery_order.begin(), r.gallery_order.end(), 0);
    std::stable_sort(r.gallery_order.begin(), r.gallery_order.end(),
                     [&](int64_t a, int64_t b) { return dist[a] < dist[b]; });
    out.push_back(std::move(r));
  }
  return out;
}

bool hit_within(const Ranking& r, const EvalProtocol& protocol, int64_t k) {
  for (int64_t i = 0; i < k; ++i)
    if (protocol.gallery[r.gallery_order[i]].identity == r.probe->identity) return true;
  return false;
}

// Averages `value` over all probes and over the probes of each covariate kind.
template <typename F>
std::pair<double, std::map<std::string, double>> breakdown(const std::vector<Ranking>& rankings, F value) {
  std::map<std::string, std::pair<double, int64_t>> acc;
  double total = 0.0;
  for (const auto& r : rankings) {
    const double v = value(r);
    total += v;
    auto& slot = acc[to_string(r.probe->covariate)];
    slot.first += v;
    slot.second += 1;
  }
  std::map<std::string, double> per;
  for (const auto& [name, s] : acc) per[name] = s.first / static_cast<double>(s.second);
  return {rankings.empty() ? 0.0 : total / static_cast<double>(rankings.size()), per};
}

}  // namespace

RankResult rank_k(const FeatureTable& features, const EvalProtocol& protocol, int64_t k) {
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  if (k > static_cast<int64_t>(protocol.gallery.size()))
    throw std::invalid_argument("k=" + std::to_string(k) + " exceeds gallery size " +
                                std::to_string(protocol.gallery.size()));
  const auto rankings = rank_all(features, protocol);
  auto [overall, per] = breakdown(rankings, [&](const Ranking& r) { return hit_within(r, protocol, k) ? 1.0 : 0.0; });
  return RankResult{k, overall, per};
}

MapResult mean_ap(const FeatureTable& features, const EvalProtocol& protocol) {
  const auto rankings = rank_all(features, protocol);
  auto ap = [&](const Ranking& r) {
    double sum = 0.0;
    int64_t hits = 0;
    for (size_t i = 0; i < r.gallery_order.size(); ++i) {
      if (protocol.gallery[r.gallery_order[i]].identity != r.probe->identity) continue;
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(i + 1);
    }
    if (hits == 0) throw std::invalid_argument("probe " + std::to_string(r.probe->seq_id) + " has no gallery positive");
    return sum / static_cast<double>(hits);
  };
  auto [overall, per] = breakdown(rankings, ap);
  return MapResult{overall, per};
}

std::vector<double> cmc_curve(const FeatureTable& features, const EvalProtocol& protocol, int64_t max_rank) {
  if (max_rank < 1 || max_rank > static_cast<int64_t>(protocol.gallery.size()))
    throw std::invalid_argument("max_rank must lie in [1, gallery size]");
  const auto rankings = rank_all(features, protocol);
  std::vector<double> cmc(max_rank, 0.0);
  for (const auto& r : rankings) {
    for (int64_t i = 0; i < max_rank; ++i) {
      if (protocol.gallery[r.gallery_order[i]].identity == r.probe->identity) {
        for (int64_t j = i; j < max_rank; ++j) cmc[j] += 1.0;
        break;
      }
    }
  }
  for (auto& v : cmc) v /= rankings.empty() ? 1.0 : static_cast<double>(rankings.size());
  return cmc;
}

const RankResult& EvalReport::rank(int64_t k) const {
  for (const auto& r : ranks)
    if (r.k == k) return r;
  throw std::out_of_range("rank-" + std::to_string(k) + " was not evaluated");
}

json EvalReport::to_json() const {
  json out;
  out["num_gallery"] = num_gallery;
  out["num_probe"] = num_probe;
  json overall, per_condition;
  for (const auto& r : ranks) {
    overall["rank" + std::to_string(r.k)] = r.overall;
    for (const auto& [name, v] : r.per_condition) per_condition[name]["rank" + std::to_string(r.k)] = v;
  }
  overall["mAP"] = map.overall;
  for (const auto& [name, v] : map.per_condition) per_condition[name]["mAP"] = v;
  out["overall"] = overall;
  out["per_condition"] = per_condition;
  return out;
}

std::string EvalReport::to_table() const {
  std::set<std::string> conditions;
  for (const auto& [name, v] : map.per_condition) conditions.insert(name);

  std::ostringstream s;
  s << std::left << std::setw(8) << "metric";
  for (const auto& c : conditions) s << std::right << std::setw(11) << c;
  s << std::right << std::setw(11) << "overall" << "\n";
  s << std::fixed << std::setprecision(2);
  auto row = [&](const std::string& label, const std::map<std::string, double>& per, double overall) {
    s << std::left << std::setw(8) << label;
    for (const auto& c : conditions) {
      auto it = per.find(c);
      s << std::right << std::setw(11);
      if (it == per.end())
        s << "-";
      else
        s << 100.0 * it->second;
    }
    s << std::right << std::setw(11) << 100.0 * overall << "\n";
  };
  for (const auto& r : ranks) row("R-" + std::to_string(r.k), r.per_condition, r.overall);
  row("mAP", map.per_condition, map.overall);
  s << "gallery " << num_gallery << ", probe " << num_probe << "\n";
  return s.str();
}

EvalReport evaluate(const FeatureTable& features, const EvalProtocol& protocol, const std::vector<int64_t>& ks) {
  EvalReport report;
  for (auto k : ks) report.ranks.push_back(rank_k(features, protocol, k));
  report.map = mean_ap(features, protocol);
  report.num_gallery = static_cast<int64_t>(protocol.gallery.size());
  report.num_probe = static_cast<int64_t>(protocol.probe.size());
  return report;
}

EvalReport evaluate_checkpoint(const fs::path& checkpoint, const GaitDataset& dataset, const std::vector<int64_t>& ks) {
  ModelBundle models = load_checkpoint(checkpoint, false);
  const EvalProtocol protocol = EvalProtocol::from_dataset(dataset);
  std::vector<ManifestEntry> entries = dataset.split(Split::gallery);
  for (const auto& e : dataset.split(Split::probe)) entries.push_back(e);
  return evaluate(embed_all(models, dataset, entries), protocol, ks);
}

void write_cmc_csv(const fs::path& path, const std::vector<double>& cmc) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "rank,accuracy\n";
  out << std::setprecision(17);
  for (size_t i = 0; i < cmc.size(); ++i) out << i + 1 << "," << cmc[i] << "\n";
}

}  // namespace cod2
