#pragma once

#include "protosim/common.hpp"

#include <vector>

namespace protosim {

struct DiversityResult {
  double mean_cosine_similarity = 0.0;  // mean over unordered pairs of usable rows
  std::vector<int> excluded_rows;       // zero-norm rows left out

  double mean_cosine_distance() const { return 1.0 - mean_cosine_similarity; }
};

/// Average pairwise cosine similarity between prototype rows. Zero rows are
/// excluded with a warning; fewer than two usable rows is a contract error.
DiversityResult prototype_diversity(const Matrix& bank);

}  // namespace protosim
