#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace protosim {

/// Interleaved HWC image, RGB channel order, values nominally in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, int c, float fill = 0.0f)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, fill) {}

  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool empty() const { return pixels.empty(); }
};

/// Decodes PNG/JPEG/BMP/PPM from disk. Throws protosim::Error when unreadable.
Image load_image(const std::filesystem::path& path);

/// Lossless 8-bit PNG encoding (values clamped to [0, 1]).
std::vector<std::uint8_t> encode_png(const Image& image);
void save_png(const Image& image, const std::filesystem::path& path);

/// Bilinear resize.
Image resize(const Image& image, int height, int width);

/// Axis-aligned crop; the rectangle must lie inside the image.
Image crop(const Image& image, int top, int left, int height, int width);

/// Gaussian blur with the given standard deviation in pixels.
Image gaussian_blur(const Image& image, double sigma);

/// True for file extensions the loader understands.
bool is_image_file(const std::filesystem::path& path);

}  // namespace protosim
