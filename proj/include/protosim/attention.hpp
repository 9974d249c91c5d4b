#pragma once

// Spatial maps of how strongly each patch token is assigned to a prototype,
// and heat overlays rendered from them.

#include "protosim/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <vector>

namespace protosim {

struct AttentionGrid {
  Matrix probabilities;   // grid rows x grid cols, noise-free soft assignment
  std::vector<int> hard;  // winning prototype per patch, row-major
  int prototype = 0;

  /// Row-major mask of the patches whose hard assignment is `prototype`.
  std::vector<bool> hard_mask() const;
};

/// Soft-assignment probability of `prototype` for every patch token. Images
/// are resized to the backbone input first; anything but 3 channels throws.
AttentionGrid attention_map(const ModelState& model, const Image& image, int prototype);

enum class GridNormalization { per_image, absolute };

struct OverlayOptions {
  GridNormalization normalization = GridNormalization::per_image;
  bool contour = false;  // outline the hard-assigned patches
  double alpha = 0.5;
};

/// Heat colour for v in [0, 1]: black, red, orange, then pale yellow.
std::array<float, 3> heat_color(double v);

/// Upsamples the grid bilinearly to the image size and blends the heat map
/// over the image: out = (1 - alpha) * image + alpha * heat.
Image render_overlay(const Image& image, const Matrix& grid, const OverlayOptions& options = {},
                     const std::vector<bool>& hard_mask = {});

std::vector<std::uint8_t> render_overlay_png(const Image& image, const AttentionGrid& grid,
                                             const OverlayOptions& options = {});

/// Raw (unnormalised) grid values as nested arrays.
nlohmann::json grid_to_json(const AttentionGrid& grid);

}  // namespace protosim
