#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <vector>

namespace cod2 {

/// 8-bit grayscale PNG from a (H, W) tensor with values in [0,1] (clamped).
void write_png(const std::filesystem::path& path, const torch::Tensor& image);

/// Reads an 8-bit grayscale PNG back as a (H, W) float tensor in [0,1].
torch::Tensor read_png(const std::filesystem::path& path);

/// Lays out rows of frames ((T_i, H, W) each) on a grid with `pad` pixels of spacing. Frames whose
/// column is below `marked_columns[row]` get a one-pixel frame of value 1 in the padding.
torch::Tensor frame_grid(const std::vector<torch::Tensor>& rows, int64_t pad = 2,
                         const std::vector<int64_t>& marked_columns = {});

}  // namespace cod2
