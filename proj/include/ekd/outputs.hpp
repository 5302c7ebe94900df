#pragma once

#include <vector>

#include <Eigen/Dense>

#include "ekd/errors.hpp"

namespace ekd {

// Per-branch features Y_i (batch x M) and logits Q_i (batch x K) plus the
// combined logits P, which is the elementwise branch sum.
struct BranchOutputs {
  std::vector<Eigen::MatrixXd> features;
  std::vector<Eigen::MatrixXd> branch_logits;
  Eigen::MatrixXd combined_logits;

  std::size_t branches() const noexcept { return branch_logits.size(); }
  Eigen::Index batch() const noexcept { return combined_logits.rows(); }
};

// Sums in branch order so results are reproducible bit for bit.
inline Eigen::MatrixXd sum_logits(const std::vector<Eigen::MatrixXd>& logits) {
  if (logits.empty()) throw InvalidInputError("cannot combine zero branches");
  Eigen::MatrixXd p = logits.front();
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i].rows() != p.rows() || logits[i].cols() != p.cols())
      throw InvalidInputError("branch logits have inconsistent shapes");
    p += logits[i];
  }
  return p;
}

inline BranchOutputs combine(std::vector<Eigen::MatrixXd> features, std::vector<Eigen::MatrixXd> logits) {
  BranchOutputs out;
  out.combined_logits = sum_logits(logits);
  out.features = std::move(features);
  out.branch_logits = std::move(logits);
  return out;
}

}  // namespace ekd
