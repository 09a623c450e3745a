#pragma once

#include <torch/torch.h>

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "cod2/data_synth.hpp"

namespace testing {

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("cod2_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Small dataset: `ids` identities (half training), `seqs` sequences of `frames` frames each.
inline cod2::GaitDataset small_dataset(const std::filesystem::path& root, int64_t ids = 6, int64_t seqs = 4,
                                       int64_t frames = 16, uint64_t seed = 3) {
  cod2::DatasetRequest request;
  request.num_ids = ids;
  request.seqs_per_id = seqs;
  request.seed = seed;
  request.render.frames = frames;
  cod2::generate_dataset(request, root);
  return cod2::GaitDataset::open(root);
}

inline double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).abs().max().item<double>();
}

inline bool bit_equal(const torch::Tensor& a, const torch::Tensor& b) {
  return a.sizes() == b.sizes() && a.dtype() == b.dtype() && torch::equal(a, b);
}

}  // namespace testing
