#include "cod2/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <stdexcept>

namespace cod2 {
namespace fs = std::filesystem;

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<FILE, FileCloser>;

}  // namespace

void write_png(const fs::path& path, const torch::Tensor& image) {
  if (image.dim() != 2) throw std::invalid_argument("write_png expects a (H, W) tensor");
  const torch::Tensor bytes =
      (image.detach().to(torch::kFloat32).clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8).contiguous();
  const auto height = static_cast<png_uint_32>(bytes.size(0));
  const auto width = static_cast<png_uint_32>(bytes.size(1));

  File file(std::fopen(path.c_str(), "wb"));
  if (!file) throw std::runtime_error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng failed writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, width, height, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const uint8_t* data = bytes.data_ptr<uint8_t>();
  for (png_uint_32 y = 0; y < height; ++y) png_write_row(png, const_cast<png_bytep>(data + y * width));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

torch::Tensor read_png(const fs::path& path) {
  File file(std::fopen(path.c_str(), "rb"));
  if (!file) throw std::runtime_error("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng failed reading " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY || png_get_bit_depth(png, info) != 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error(path.string() + " is not an 8-bit grayscale PNG");
  }
  const int64_t height = png_get_image_height(png, info);
  const int64_t width = png_get_image_width(png, info);
  torch::Tensor bytes = torch::empty({height, width}, torch::kUInt8);
  uint8_t* data = bytes.data_ptr<uint8_t>();
  for (int64_t y = 0; y < height; ++y) png_read_row(png, data + y * width, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return bytes.to(torch::kFloat32) / 255.0;
}

torch::Tensor frame_grid(const std::vector<torch::Tensor>& rows, int64_t pad, const std::vector<int64_t>& marked) {
  if (rows.empty()) throw std::invalid_argument("frame_grid: no rows");
  if (pad < 1 && !marked.empty()) throw std::invalid_argument("frame_grid: marking needs pad >= 1");
  const int64_t H = rows[0].size(1), W = rows[0].size(2);
  int64_t columns = 0;
  for (const auto& r : rows) {
    if (r.dim() != 3 || r.size(1) != H || r.size(2) != W) throw std::invalid_argument("frame_grid: mismatched frames");
    columns = std::max(columns, r.size(0));
  }
  const int64_t n = static_cast<int64_t>(rows.size());
  torch::Tensor grid = torch::zeros({n * (H + pad) + pad, columns * (W + pad) + pad});
  for (int64_t i = 0; i < n; ++i) {
    const int64_t y = pad + i * (H + pad);
    for (int64_t t = 0; t < rows[i].size(0); ++t) {
      const int64_t x = pad + t * (W + pad);
      if (i < static_cast<int64_t>(marked.size()) && t < marked[i])
        grid.slice(0, y - 1, y + H + 1).slice(1, x - 1, x + W + 1).fill_(1.0);
      grid.slice(0, y, y + H).slice(1, x, x + W).copy_(rows[i][t].detach().to(torch::kFloat32));
    }
  }
  return grid;
}

}  // namespace cod2
