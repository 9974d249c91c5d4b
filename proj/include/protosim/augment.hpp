#pragma once

// Multi-crop augmentation: two large "global" views and V small "local" views
// of one image, each independently flipped, colour-jittered and blurred, and
// resized to the backbone input size.

#include "protosim/common.hpp"
#include "protosim/image.hpp"

#include <string>
#include <vector>

namespace protosim {

struct AugmentConfig {
  int output_height = 32;
  int output_width = 32;
  int local_crops = 8;
  double global_scale_min = 0.4;
  double global_scale_max = 1.0;
  double local_scale_min = 0.05;
  double local_scale_max = 0.4;
  double flip_prob = 0.5;
  double jitter_prob = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.2;
  double blur_prob = 0.5;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 1.0;
  int min_image_size = 8;
};

struct CropGeometry {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;
  bool flipped = false;

  bool operator==(const CropGeometry&) const = default;
};

struct MultiCropBatch {
  std::vector<Image> global_crops;  // exactly 2
  std::vector<Image> local_crops;   // V
  std::vector<CropGeometry> geometry;  // globals first, then locals
  std::string source_image_id;

  /// Global crops followed by local crops.
  std::vector<const Image*> all_crops() const;
};

/// Random crop covering `scale` of the image area with aspect ratio in
/// [3/4, 4/3]; falls back to the full image when no candidate fits.
CropGeometry random_resized_crop(int height, int width, double scale_min, double scale_max, Rng& rng);

MultiCropBatch multi_crop(const Image& image, const AugmentConfig& config, Rng& rng,
                          const std::string& source_image_id = "");

}  // namespace protosim
