#pragma once

// Procedurally generated image collections with known ground truth, used for
// the planted end-to-end runs and the CLI `synth` subcommand.

#include "protosim/common.hpp"
#include "protosim/image.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace protosim {

/// A colour/texture pattern. `pattern`: 0 horizontal stripes, 1 vertical
/// stripes, 2 checkerboard, 3 diagonal stripes.
struct Concept {
  int id = 0;
  double hue = 0.0;  // degrees
  int pattern = 0;
};

/// Concept `id` out of `count`: hues spread evenly, patterns cycled.
Concept make_concept(int id, int count);

/// Renders one image of the concept with random phase, period jitter and
/// pixel noise.
Image render_concept(const Concept& spec, int height, int width, Rng& rng);

struct PlantedImage {
  std::string image_id;
  int concept_id = 0;
  Image image;
};

struct PlantedDataset {
  std::string dataset_id;
  std::vector<PlantedImage> images;
};

struct PlantedSpec {
  int images_per_dataset = 2000;
  int specific_per_dataset = 4;
  int shared = 4;
  int height = 32;
  int width = 32;
  std::uint64_t seed = 0;
};

/// Two datasets "A" and "B". Concepts [0, s) belong to A, [s, 2s) to B and
/// [2s, 2s + shared) to both; each image draws one concept uniformly from its
/// dataset's pool.
std::vector<PlantedDataset> make_planted_pair(const PlantedSpec& spec);

/// Writes PNGs to `root/<dataset_id>/` and labels (image_id,concept) to
/// `root/<dataset_id>_labels.csv`.
void write_planted(const std::vector<PlantedDataset>& datasets, const std::filesystem::path& root);

}  // namespace protosim
