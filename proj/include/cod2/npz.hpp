#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace cod2::npz {

/// A dense float32 array in C order.
struct Array {
  std::vector<int64_t> shape;
  std::vector<float> data;

  int64_t numel() const;
};

/// Writes a single-entry .npz archive (`<name>.npy`, deflated). Output bytes are a pure
/// function of the inputs: timestamps in the zip headers are pinned.
void write(const std::filesystem::path& path, const std::string& name, const Array& array);

/// Reads entry `<name>.npy` from an .npz written by numpy or by write(). Only '<f4' C-order
/// arrays are accepted.
Array read(const std::filesystem::path& path, const std::string& name);

}  // namespace cod2::npz
