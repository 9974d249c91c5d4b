#include "protosim/augment.hpp"

#include <algorithm>
#include <cmath>

namespace protosim {

std::vector<const Image*> MultiCropBatch::all_crops() const {
  std::vector<const Image*> out;
  for (const auto& c : global_crops) out.push_back(&c);
  for (const auto& c : local_crops) out.push_back(&c);
  return out;
}

CropGeometry random_resized_crop(int height, int width, double scale_min, double scale_max, Rng& rng) {
  const double area = static_cast<double>(height) * width;
  const double log_lo = std::log(3.0 / 4.0), log_hi = std::log(4.0 / 3.0);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * (scale_min + (scale_max - scale_min) * uniform_open(rng));
    const double ratio = std::exp(log_lo + (log_hi - log_lo) * uniform_open(rng));
    const int w = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    const int h = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    if (w >= 1 && h >= 1 && w <= width && h <= height) {
      const int top = static_cast<int>(uniform_open(rng) * (height - h + 1));
      const int left = static_cast<int>(uniform_open(rng) * (width - w + 1));
      return {top, left, h, w, false};
    }
  }
  return {0, 0, height, width, false};
}

namespace {

void color_jitter(Image& img, const AugmentConfig& c, Rng& rng) {
  auto factor = [&](double strength) { return 1.0 + strength * (2.0 * uniform_open(rng) - 1.0); };
  const float b = static_cast<float>(factor(c.brightness));
  const float k = static_cast<float>(factor(c.contrast));
  const float s = static_cast<float>(factor(c.saturation));
  const std::size_t n = static_cast<std::size_t>(img.height) * img.width;
  const int ch = img.channels;
  auto gray_of = [&](std::size_t i) {
    if (ch < 3) return img.pixels[i * ch];
    return 0.299f * img.pixels[i * ch] + 0.587f * img.pixels[i * ch + 1] + 0.114f * img.pixels[i * ch + 2];
  };
  for (auto& v : img.pixels) v = std::clamp(v * b, 0.0f, 1.0f);
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += gray_of(i);
  const float m = static_cast<float>(mean / static_cast<double>(n));
  for (auto& v : img.pixels) v = std::clamp((v - m) * k + m, 0.0f, 1.0f);
  if (ch >= 3) {
    for (std::size_t i = 0; i < n; ++i) {
      const float g = gray_of(i);
      for (int c2 = 0; c2 < ch; ++c2) {
        float& v = img.pixels[i * ch + c2];
        v = std::clamp((v - g) * s + g, 0.0f, 1.0f);
      }
    }
  }
}

void flip_horizontal(Image& img) {
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width / 2; ++x)
      for (int c = 0; c < img.channels; ++c) std::swap(img.at(y, x, c), img.at(y, img.width - 1 - x, c));
}

Image make_view(const Image& image, double scale_min, double scale_max, const AugmentConfig& c, Rng& rng,
                CropGeometry& geom) {
  geom = random_resized_crop(image.height, image.width, scale_min, scale_max, rng);
  Image view = resize(crop(image, geom.top, geom.left, geom.height, geom.width), c.output_height, c.output_width);
  geom.flipped = uniform_open(rng) < c.flip_prob;
  if (geom.flipped) flip_horizontal(view);
  if (uniform_open(rng) < c.jitter_prob) color_jitter(view, c, rng);
  if (uniform_open(rng) < c.blur_prob) {
    const double sigma = c.blur_sigma_min + (c.blur_sigma_max - c.blur_sigma_min) * uniform_open(rng);
    view = gaussian_blur(view, sigma);
  }
  return view;
}

}  // namespace

MultiCropBatch multi_crop(const Image& image, const AugmentConfig& config, Rng& rng,
                          const std::string& source_image_id) {
  if (image.height < config.min_image_size || image.width < config.min_image_size)
    throw ContractError("multi_crop: image " + shape_str(image.height, image.width) +
                        " is smaller than the minimum crop size " + std::to_string(config.min_image_size));
  if (config.local_crops < 0) throw ContractError("multi_crop: negative local crop count");
  MultiCropBatch batch;
  batch.source_image_id = source_image_id;
  for (int i = 0; i < 2; ++i) {
    CropGeometry g;
    batch.global_crops.push_back(make_view(image, config.global_scale_min, config.global_scale_max, config, rng, g));
    batch.geometry.push_back(g);
  }
  for (int i = 0; i < config.local_crops; ++i) {
    CropGeometry g;
    batch.local_crops.push_back(make_view(image, config.local_scale_min, config.local_scale_max, config, rng, g));
    batch.geometry.push_back(g);
  }
  return batch;
}

}  // namespace protosim
