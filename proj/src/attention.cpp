#include "protosim/attention.hpp"

#include <opencv2/imgproc.hpp>

#include <algorithm>

namespace protosim {

std::vector<bool> AttentionGrid::hard_mask() const {
  std::vector<bool> m(hard.size());
  for (std::size_t i = 0; i < hard.size(); ++i) m[i] = hard[i] == prototype;
  return m;
}

AttentionGrid attention_map(const ModelState& model, const Image& image, int prototype) {
  const int k = model.bank.K();
  if (prototype < 0 || prototype >= k)
    throw ContractError("prototype id " + std::to_string(prototype) + " outside [0, " + std::to_string(k) + ")");
  if (image.channels != 3) throw ContractError("attention_map expects a 3-channel image");
  const auto& cfg = model.backbone->config;
  const Matrix logits = image_logits(model, image);  // K x (N+1)
  if (!all_finite(logits)) throw Error("non-finite logits in attention_map");
  const Matrix probs = softmax_rows<float>(Matrix(logits.transpose()));  // (N+1) x K
  AttentionGrid g;
  g.prototype = prototype;
  g.probabilities.resize(cfg.grid_rows(), cfg.grid_cols());
  const auto winners = argmax_rows<float>(probs);
  for (int r = 0; r < cfg.grid_rows(); ++r)
    for (int c = 0; c < cfg.grid_cols(); ++c) {
      const int t = 1 + r * cfg.grid_cols() + c;
      g.probabilities(r, c) = probs(t, prototype);
      g.hard.push_back(static_cast<int>(winners[static_cast<std::size_t>(t)]));
    }
  return g;
}

std::array<float, 3> heat_color(double v) {
  v = std::clamp(v, 0.0, 1.0);
  const double r = std::min(1.0, 2.0 * v);
  const double g = std::clamp(2.0 * v - 0.6, 0.0, 1.0);
  const double b = std::clamp(3.0 * v - 2.2, 0.0, 0.8);
  return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

Image render_overlay(const Image& image, const Matrix& grid, const OverlayOptions& options,
                     const std::vector<bool>& hard_mask) {
  if (image.channels != 3 || image.height < 1 || image.width < 1)
    throw ContractError("render_overlay expects a non-empty 3-channel image");
  if (grid.rows() < 1 || grid.cols() < 1) throw ContractError("render_overlay: empty grid");
  if (!hard_mask.empty() && hard_mask.size() != static_cast<std::size_t>(grid.size()))
    throw ContractError("render_overlay: hard mask does not match the grid");
  if (options.alpha < 0.0 || options.alpha > 1.0) throw ContractError("render_overlay: alpha must lie in [0, 1]");

  Matrix g = grid;
  if (options.normalization == GridNormalization::per_image) {
    const float mx = g.maxCoeff();
    if (mx > 0.0f) g /= mx;
  }
  cv::Mat small(static_cast<int>(g.rows()), static_cast<int>(g.cols()), CV_32F, g.data());
  cv::Mat up;
  cv::resize(small, up, cv::Size(image.width, image.height), 0, 0, cv::INTER_LINEAR);

  const auto rows = static_cast<int>(grid.rows());
  const auto cols = static_cast<int>(grid.cols());
  auto cell_of = [&](int y, int x) {
    return static_cast<std::size_t>((y * rows / image.height) * cols + x * cols / image.width);
  };
  const float a = static_cast<float>(options.alpha);
  Image out(image.height, image.width, 3);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const auto heat = heat_color(up.at<float>(y, x));
      for (int c = 0; c < 3; ++c)
        out.at(y, x, c) = (1.0f - a) * image.at(y, x, c) + a * heat[static_cast<std::size_t>(c)];
      if (options.contour && !hard_mask.empty() && hard_mask[cell_of(y, x)]) {
        bool edge = y == 0 || x == 0 || y == image.height - 1 || x == image.width - 1;
        if (!edge)
          edge = !hard_mask[cell_of(y - 1, x)] || !hard_mask[cell_of(y + 1, x)] || !hard_mask[cell_of(y, x - 1)] ||
                 !hard_mask[cell_of(y, x + 1)];
        if (edge) {
          out.at(y, x, 0) = 0.0f;
          out.at(y, x, 1) = 1.0f;
          out.at(y, x, 2) = 1.0f;
        }
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> render_overlay_png(const Image& image, const AttentionGrid& grid,
                                             const OverlayOptions& options) {
  return encode_png(render_overlay(image, grid.probabilities, options, grid.hard_mask()));
}

nlohmann::json grid_to_json(const AttentionGrid& grid) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < grid.probabilities.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < grid.probabilities.cols(); ++c) row.push_back(grid.probabilities(r, c));
    rows.push_back(row);
  }
  return {{"prototype", grid.prototype}, {"normalization", "none"}, {"grid", rows}, {"hard", grid.hard}};
}

}  // namespace protosim
