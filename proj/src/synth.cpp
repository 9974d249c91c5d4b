#include "protosim/synth.hpp"

#include "protosim/io.hpp"

#include <cmath>
#include <numbers>

namespace protosim {

namespace {

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0) / 60.0;
  const double c = v * s;
  const double x = c * (1.0 - std::abs(std::fmod(h, 2.0) - 1.0));
  const double m = v - c;
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(h)) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  return {r + m, g + m, b + m};
}

}  // namespace

Concept make_concept(int id, int count) {
  if (count < 1 || id < 0 || id >= count) throw ContractError("make_concept: id out of range");
  return Concept{id, 360.0 * id / count, id % 4};
}

Image render_concept(const Concept& spec, int height, int width, Rng& rng) {
  if (height < 1 || width < 1) throw ContractError("render_concept: empty size");
  Image im(height, width, 3);
  const double period = 6.0 + 2.0 * uniform_open(rng);
  const double phase = 2.0 * std::numbers::pi * uniform_open(rng);
  const double hue = spec.hue + 6.0 * (uniform_open(rng) - 0.5);
  const auto fg = hsv_to_rgb(hue, 0.9, 0.9);
  const auto bg = hsv_to_rgb(hue, 0.5, 0.25);
  const double w = 2.0 * std::numbers::pi / period;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double t = 0.0;
      switch (spec.pattern) {
        case 0: t = std::sin(w * y + phase); break;
        case 1: t = std::sin(w * x + phase); break;
        case 2: t = std::sin(w * x + phase) * std::sin(w * y + phase); break;
        default: t = std::sin(w * (x + y) / std::numbers::sqrt2 + phase); break;
      }
      const double mix = t > 0.0 ? 1.0 : 0.0;
      for (int c = 0; c < 3; ++c) {
        const double v = mix * fg[static_cast<std::size_t>(c)] + (1.0 - mix) * bg[static_cast<std::size_t>(c)] +
                         0.05 * standard_normal(rng);
        im.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return im;
}

std::vector<PlantedDataset> make_planted_pair(const PlantedSpec& spec) {
  if (spec.images_per_dataset < 1 || spec.specific_per_dataset < 0 || spec.shared < 0 ||
      spec.specific_per_dataset + spec.shared < 1)
    throw ContractError("make_planted_pair: invalid spec");
  const int s = spec.specific_per_dataset;
  const int total = 2 * s + spec.shared;
  Rng rng(spec.seed);
  std::vector<PlantedDataset> out(2);
  for (int d = 0; d < 2; ++d) {
    out[static_cast<std::size_t>(d)].dataset_id = d == 0 ? "A" : "B";
    std::vector<int> pool;
    for (int c = 0; c < s; ++c) pool.push_back(d * s + c);
    for (int c = 0; c < spec.shared; ++c) pool.push_back(2 * s + c);
    for (int i = 0; i < spec.images_per_dataset; ++i) {
      const int cid = pool[static_cast<std::size_t>(rng() % pool.size())];
      char name[32];
      std::snprintf(name, sizeof name, "img_%05d.png", i);
      out[static_cast<std::size_t>(d)].images.push_back(
          {name, cid, render_concept(make_concept(cid, total), spec.height, spec.width, rng)});
    }
  }
  return out;
}

void write_planted(const std::vector<PlantedDataset>& datasets, const std::filesystem::path& root) {
  for (const auto& d : datasets) {
    const auto dir = root / d.dataset_id;
    std::filesystem::create_directories(dir);
    std::string labels = "# image_id,concept\n";
    for (const auto& im : d.images) {
      save_png(im.image, dir / im.image_id);
      labels += im.image_id + "," + std::to_string(im.concept_id) + "\n";
    }
    write_file_atomic(root / (d.dataset_id + "_labels.csv"), labels);
  }
}

}  // namespace protosim
