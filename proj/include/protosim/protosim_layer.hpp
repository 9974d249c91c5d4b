#pragma once

// ProtoSim: tokens attend over a learnable prototype bank and are replaced by
// (a mixture of, or exactly one of) the prototypes.
//
//   logits = p z^T                      K x (N+1)
//   a      = softmax or gumbel-softmax over the K prototypes of each token
//   z_hat  = a^T p                      (N+1) x D
//
// The closed-form functions below use the K x (N+1) orientation. The taped
// variant in namespace ag works on the transposed (N+1) x K layout, which is
// the natural one for row-major token matrices.

#include "protosim/autograd.hpp"
#include "protosim/common.hpp"

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace protosim {

enum class AssignMode { soft, hard };

inline const char* to_string(AssignMode m) { return m == AssignMode::soft ? "soft" : "hard"; }

inline AssignMode parse_assign_mode(const std::string& s) {
  if (s == "soft") return AssignMode::soft;
  if (s == "hard") return AssignMode::hard;
  throw ContractError("unknown assignment mode '" + s + "'");
}

/// Gumbel-softmax temperature. Fixed; not a tuning surface.
inline constexpr double kAssignTemperature = 1.0;

template <class S>
struct BasicPrototypeBank {
  Mat<S> weights;  // K x D

  BasicPrototypeBank() = default;
  explicit BasicPrototypeBank(Mat<S> w) : weights(std::move(w)) { validate(); }

  Eigen::Index K() const { return weights.rows(); }
  Eigen::Index D() const { return weights.cols(); }

  void validate() const {
    if (weights.rows() < 2 || weights.cols() < 1)
      throw ContractError("prototype bank must be at least 2x1, got " +
                          shape_str(weights.rows(), weights.cols()));
    if (!all_finite(weights)) throw ContractError("prototype bank has non-finite entries");
  }
};

template <class S>
struct BasicTokenBatch {
  Mat<S> tokens;  // (N+1) x D, row 0 is the class token

  BasicTokenBatch() = default;
  explicit BasicTokenBatch(Mat<S> t) : tokens(std::move(t)) {
    if (tokens.rows() < 1) throw ContractError("token batch needs at least the class token");
    if (!all_finite(tokens)) throw ContractError("token batch has non-finite entries");
  }

  Eigen::Index patch_count() const { return tokens.rows() - 1; }
  Eigen::Index D() const { return tokens.cols(); }
};

template <class S>
struct BasicAssignment {
  Mat<S> a;  // K x (N+1), columns are distributions over prototypes
  AssignMode mode = AssignMode::soft;

  /// Winning prototype per token (argmax of each column).
  std::vector<int> winners() const {
    std::vector<int> out(static_cast<std::size_t>(a.cols()));
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
      Eigen::Index best = 0;
      for (Eigen::Index k = 1; k < a.rows(); ++k)
        if (a(k, c) > a(best, c)) best = k;
      out[static_cast<std::size_t>(c)] = static_cast<int>(best);
    }
    return out;
  }
};

template <class S>
struct BasicPrototypeEmbeddings {
  Mat<S> z_hat;  // (N+1) x D
};

using PrototypeBank = BasicPrototypeBank<float>;
using TokenBatch = BasicTokenBatch<float>;
using AssignmentMatrix = BasicAssignment<float>;
using PrototypeEmbeddings = BasicPrototypeEmbeddings<float>;

/// Dot-product affinities between every prototype and every token, K x (N+1).
template <class S>
Mat<S> compute_logits(const BasicPrototypeBank<S>& bank, const BasicTokenBatch<S>& batch) {
  if (bank.D() != batch.D())
    throw ContractError("compute_logits: prototype dimension " + std::to_string(bank.D()) +
                        " does not match token dimension " + std::to_string(batch.D()));
  return bank.weights * batch.tokens.transpose();
}

/// Gumbel(0,1) transform of a uniform draw on (0,1).
inline double gumbel_from_uniform(double u) { return -std::log(-std::log(u)); }

template <class S = float>
Mat<S> sample_gumbel(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  if (rows < 1 || cols < 1) throw ContractError("sample_gumbel: shape must be positive");
  Mat<S> g(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) g(r, c) = static_cast<S>(gumbel_from_uniform(uniform_open(rng)));
  return g;
}

namespace detail {
template <class S>
Mat<S> perturbed_logits(const Mat<S>& logits, const Mat<S>* noise) {
  if (!all_finite(logits)) throw Error("assignment: logits contain non-finite values");
  if (!noise) return logits;
  if (noise->rows() != logits.rows() || noise->cols() != logits.cols())
    throw ContractError("assignment: noise shape " + shape_str(noise->rows(), noise->cols()) +
                        " does not match logits " + shape_str(logits.rows(), logits.cols()));
  return logits + *noise;
}
}  // namespace detail

/// Column-wise softmax of (logits + noise) over the K prototypes.
template <class S>
BasicAssignment<S> soft_assign(const Mat<S>& logits, const Mat<S>* noise = nullptr) {
  const Mat<S> x = detail::perturbed_logits(logits, noise) / static_cast<S>(kAssignTemperature);
  Mat<S> xt = x.transpose();
  return {softmax_rows<S>(xt).transpose(), AssignMode::soft};
}

/// Column-wise one-hot at argmax(logits + noise); ties go to the lowest index.
template <class S>
BasicAssignment<S> hard_assign(const Mat<S>& logits, const Mat<S>* noise = nullptr) {
  const Mat<S> x = detail::perturbed_logits(logits, noise);
  Mat<S> a = Mat<S>::Zero(x.rows(), x.cols());
  Mat<S> xt = x.transpose();
  const auto winners = argmax_rows<S>(xt);
  for (Eigen::Index c = 0; c < x.cols(); ++c) a(winners[static_cast<std::size_t>(c)], c) = S(1);
  return {std::move(a), AssignMode::hard};
}

/// Straight-through gradient of the hard assignment: maps dL/da (K x (N+1)) to
/// dL/dlogits through the soft relaxation evaluated at the same perturbed
/// logits.
template <class S>
Mat<S> straight_through_grad(const Mat<S>& logits, const Mat<S>* noise, const Mat<S>& grad_a) {
  const BasicAssignment<S> soft = soft_assign(logits, noise);
  Mat<S> yt = soft.a.transpose();
  Mat<S> gt = grad_a.transpose();
  return softmax_rows_backward<S>(yt, gt).transpose() / static_cast<S>(kAssignTemperature);
}

/// z_hat = a^T * weights.
template <class S>
BasicPrototypeEmbeddings<S> project(const BasicAssignment<S>& assignment,
                                    const BasicPrototypeBank<S>& bank) {
  if (assignment.a.rows() != bank.K())
    throw ContractError("project: assignment has " + std::to_string(assignment.a.rows()) +
                        " prototype rows but bank has K=" + std::to_string(bank.K()));
  if (assignment.mode == AssignMode::hard) {
    // Exact row substitution, so hard embeddings are bit-identical bank rows.
    Mat<S> z(assignment.a.cols(), bank.D());
    const auto w = assignment.winners();
    for (Eigen::Index n = 0; n < z.rows(); ++n) z.row(n) = bank.weights.row(w[static_cast<std::size_t>(n)]);
    return {std::move(z)};
  }
  return {assignment.a.transpose() * bank.weights};
}

struct ForwardOptions {
  bool use_noise = true;  // false: deterministic inference (pure softmax / argmax)
};

template <class S>
struct ForwardResult {
  BasicPrototypeEmbeddings<S> embeddings;
  BasicAssignment<S> assignment;
};

template <class S>
ForwardResult<S> forward(const BasicTokenBatch<S>& batch, const BasicPrototypeBank<S>& bank,
                         AssignMode mode, Rng& rng, ForwardOptions options = {}) {
  const Mat<S> logits = compute_logits(bank, batch);
  std::optional<Mat<S>> noise;
  if (options.use_noise) noise = sample_gumbel<S>(logits.rows(), logits.cols(), rng);
  const Mat<S>* np = noise ? &*noise : nullptr;
  BasicAssignment<S> a = mode == AssignMode::soft ? soft_assign(logits, np) : hard_assign(logits, np);
  BasicPrototypeEmbeddings<S> z = project(a, bank);
  return {std::move(z), std::move(a)};
}

namespace ag {

template <class S>
struct ProtoSimOutput {
  Var<S> embeddings;  // (N+1) x D
  Var<S> assignment;  // (N+1) x K, rows are distributions
};

/// Taped ProtoSim forward. `noise` is (N+1) x K or null; hard mode uses the
/// straight-through estimator.
template <class S>
ProtoSimOutput<S> protosim(Var<S> tokens, Var<S> bank, AssignMode mode, const Mat<S>* noise) {
  if (tokens.cols() != bank.cols())
    throw ContractError("protosim: prototype dimension " + std::to_string(bank.cols()) +
                        " does not match token dimension " + std::to_string(tokens.cols()));
  Var<S> logits = matmul_nt(tokens, bank);
  if (noise) {
    if (noise->rows() != logits.rows() || noise->cols() != logits.cols())
      throw ContractError("protosim: noise shape mismatch");
    logits = add(logits, tokens.tape->constant(*noise));
  }
  Var<S> a = mode == AssignMode::soft ? softmax(logits) : straight_through_onehot(logits);
  return {matmul(a, bank), a};
}

}  // namespace ag
}  // namespace protosim
