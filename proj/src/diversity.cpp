#include "protosim/diversity.hpp"

#include <spdlog/spdlog.h>

namespace protosim {

DiversityResult prototype_diversity(const Matrix& bank) {
  if (bank.rows() < 2) throw ContractError("prototype_diversity: need K >= 2");
  DiversityResult r;
  MatrixD unit(bank.rows(), bank.cols());
  std::vector<Eigen::Index> keep;
  for (Eigen::Index k = 0; k < bank.rows(); ++k) {
    const double n = bank.row(k).cast<double>().norm();
    if (n == 0.0) {
      r.excluded_rows.push_back(static_cast<int>(k));
      continue;
    }
    unit.row(static_cast<Eigen::Index>(keep.size())) = bank.row(k).cast<double>() / n;
    keep.push_back(k);
  }
  if (!r.excluded_rows.empty())
    spdlog::warn("prototype_diversity: excluded {} zero-norm prototype(s)", r.excluded_rows.size());
  const auto m = static_cast<Eigen::Index>(keep.size());
  if (m < 2) throw ContractError("prototype_diversity: fewer than two non-zero prototypes");
  // sum_{i<j} u_i.u_j = (|sum u|^2 - sum |u|^2) / 2, with |u| = 1.
  const double off = (unit.topRows(m).colwise().sum().squaredNorm() - static_cast<double>(m)) / 2.0;
  r.mean_cosine_similarity = off / (static_cast<double>(m) * static_cast<double>(m - 1) / 2.0);
  return r;
}

}  // namespace protosim
