#pragma once

// Composite distillation objective: softmax, cross-entropy, tempered KL,
// MSE, the distillation term and the weighted training loss. Every batch
// term is an arithmetic mean over the batch rows.

#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "ekd/errors.hpp"
#include "ekd/outputs.hpp"

namespace ekd {

struct LossWeights {
  double alpha = 0.5;
  double beta = 0.5;
  double gamma = 0.6;
  double temperature = 10.0;
  // Also divide student logits by T inside the KL terms.
  bool soften_student = false;

  void validate() const {
    if (!(alpha >= 0 && beta >= 0 && gamma >= 0)) throw InvalidInputError("loss weights must be >= 0");
    if (!(temperature > 0)) throw InvalidInputError("temperature must be > 0");
  }
};

struct LossBreakdown {
  double ce_teacher = 0;
  double ce_student = 0;
  double kd_combined_kl = 0;
  double kd_combined_mse = 0;
  double kd_branch_kl_sum = 0;
  double kd_branch_mse_sum = 0;
  double total = 0;

  double kd() const noexcept { return kd_combined_kl + kd_combined_mse + kd_branch_kl_sum + kd_branch_mse_sum; }
};

inline double weighted_total(const LossBreakdown& b, const LossWeights& w) {
  return w.alpha * b.ce_teacher + w.beta * b.ce_student + w.gamma * b.kd();
}

namespace detail {

inline void require_finite(const Eigen::MatrixXd& z, const char* what) {
  if (!z.allFinite()) throw InvalidInputError(std::string(what) + ": non-finite logits");
}

inline void require_same_shape(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw InvalidInputError(std::string(what) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                            std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                            std::to_string(b.cols()) + ")");
}

inline Eigen::MatrixXd row(std::span<const double> v) {
  return Eigen::Map<const Eigen::RowVectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace detail

// Row-wise log-softmax with max subtraction.
inline Eigen::MatrixXd log_softmax(const Eigen::MatrixXd& z) {
  detail::require_finite(z, "softmax");
  Eigen::MatrixXd out(z.rows(), z.cols());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double m = z.row(r).maxCoeff();
    const double lse = m + std::log((z.row(r).array() - m).exp().sum());
    out.row(r) = z.row(r).array() - lse;
  }
  return out;
}

inline Eigen::MatrixXd softmax(const Eigen::MatrixXd& z) { return log_softmax(z).array().exp(); }

inline std::vector<double> softmax(std::span<const double> z) {
  if (z.empty()) throw InvalidInputError("softmax of an empty vector");
  Eigen::RowVectorXd p = softmax(detail::row(z));
  return {p.data(), p.data() + p.size()};
}

// Mean negative log-likelihood of `labels` under softmax(logits).
inline double cross_entropy(const Eigen::MatrixXd& logits, std::span<const int> labels,
                            Eigen::MatrixXd* grad = nullptr) {
  if (static_cast<Eigen::Index>(labels.size()) != logits.rows())
    throw InvalidInputError("cross_entropy: one label per row expected");
  if (logits.rows() == 0) throw InvalidInputError("cross_entropy: empty batch");
  const Eigen::MatrixXd lp = log_softmax(logits);
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  double loss = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= logits.cols())
      throw InvalidInputError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(logits.cols()) + ")");
    loss -= lp(r, y);
  }
  if (grad) {
    *grad = lp.array().exp();
    for (Eigen::Index r = 0; r < logits.rows(); ++r) (*grad)(r, labels[static_cast<std::size_t>(r)]) -= 1.0;
    *grad *= inv_n;
  }
  return loss * inv_n;
}

inline double cross_entropy(std::span<const double> logits, int label) {
  const int labels[] = {label};
  return cross_entropy(detail::row(logits), labels);
}

// KL(softmax(s') || softmax(t / T)) averaged over rows, where s' = s, or
// s / T with `soften_student`. Gradients are w.r.t. the raw logits.
inline double kl_loss(const Eigen::MatrixXd& student, const Eigen::MatrixXd& teacher, double T,
                      bool soften_student = false, Eigen::MatrixXd* grad_student = nullptr,
                      Eigen::MatrixXd* grad_teacher = nullptr) {
  if (!(T > 0)) throw InvalidInputError("kl_loss: temperature must be > 0");
  detail::require_same_shape(student, teacher, "kl_loss");
  if (student.rows() == 0) throw InvalidInputError("kl_loss: empty batch");
  const double s_scale = soften_student ? 1.0 / T : 1.0;
  const Eigen::MatrixXd lp = log_softmax(student * s_scale);
  const Eigen::MatrixXd lq = log_softmax(teacher / T);
  const Eigen::MatrixXd p = lp.array().exp();
  const Eigen::MatrixXd g = lp - lq;
  const Eigen::VectorXd per_row = (p.array() * g.array()).rowwise().sum();
  const double inv_n = 1.0 / static_cast<double>(student.rows());
  if (grad_student) {
    // d/ds' = p * (g - KL_row)
    *grad_student = (p.array() * (g.colwise() - per_row).array()) * (inv_n * s_scale);
  }
  if (grad_teacher) {
    // d/d(t/T) = q - p
    *grad_teacher = (lq.array().exp() - p.array()) * (inv_n / T);
  }
  // Clamp round-off below zero; the divergence itself is never negative.
  return std::max(0.0, per_row.sum() * inv_n);
}

inline double kl_loss(std::span<const double> student, std::span<const double> teacher, double T,
                      bool soften_student = false) {
  if (student.size() != teacher.size()) throw InvalidInputError("kl_loss: length mismatch");
  return kl_loss(detail::row(student), detail::row(teacher), T, soften_student);
}

// Mean over entries of (a - b)^2, i.e. per-row mean then batch mean.
inline double mse_loss(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, Eigen::MatrixXd* grad_a = nullptr,
                       Eigen::MatrixXd* grad_b = nullptr) {
  detail::require_same_shape(a, b, "mse_loss");
  if (a.size() == 0) throw InvalidInputError("mse_loss: empty input");
  const double inv = 1.0 / static_cast<double>(a.size());
  const Eigen::MatrixXd d = a - b;
  if (grad_a) *grad_a = d * (2.0 * inv);
  if (grad_b) *grad_b = d * (-2.0 * inv);
  return d.squaredNorm() * inv;
}

inline double mse_loss(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidInputError("mse_loss: length mismatch");
  return mse_loss(detail::row(a), detail::row(b));
}

// dL/dlogits for every student branch and teacher sub-network.
struct LossGradients {
  std::vector<Eigen::MatrixXd> student;
  // From alpha * CE(P_t, y) only.
  std::vector<Eigen::MatrixXd> teacher_ce;
  // From gamma * L_KD, for the optional non-detached teacher mode.
  std::vector<Eigen::MatrixXd> teacher_kd;
};

inline void require_pairing(const BranchOutputs& s, const BranchOutputs& t) {
  if (s.branches() != t.branches())
    throw PairingError("student has " + std::to_string(s.branches()) + " branches, teacher ensemble has " +
                       std::to_string(t.branches()));
  if (s.branches() == 0) throw PairingError("no branches to pair");
}

// Distillation term: KL + MSE between combined logits plus the same pair for
// every index-matched (student branch, teacher) couple. Teacher outputs are
// constants here unless `grads->teacher_kd` is requested by the caller.
inline LossBreakdown kd_loss(const BranchOutputs& s, const BranchOutputs& t, const LossWeights& w,
                             LossGradients* grads = nullptr, bool teacher_grads = false) {
  require_pairing(s, t);
  w.validate();
  const std::size_t N = s.branches();
  LossBreakdown b;
  Eigen::MatrixXd gP_kl, gP_mse, gPt_kl, gPt_mse;
  const bool want = grads != nullptr;
  b.kd_combined_kl = kl_loss(s.combined_logits, t.combined_logits, w.temperature, w.soften_student,
                             want ? &gP_kl : nullptr, want && teacher_grads ? &gPt_kl : nullptr);
  b.kd_combined_mse = mse_loss(s.combined_logits, t.combined_logits, want ? &gP_mse : nullptr,
                               want && teacher_grads ? &gPt_mse : nullptr);
  if (want) {
    grads->student.assign(N, Eigen::MatrixXd());
    if (teacher_grads) grads->teacher_kd.assign(N, Eigen::MatrixXd());
  }
  for (std::size_t i = 0; i < N; ++i) {
    Eigen::MatrixXd g_kl, g_mse, gt_kl, gt_mse;
    b.kd_branch_kl_sum += kl_loss(s.branch_logits[i], t.branch_logits[i], w.temperature, w.soften_student,
                                  want ? &g_kl : nullptr, want && teacher_grads ? &gt_kl : nullptr);
    b.kd_branch_mse_sum += mse_loss(s.branch_logits[i], t.branch_logits[i], want ? &g_mse : nullptr,
                                    want && teacher_grads ? &gt_mse : nullptr);
    if (want) {
      // P = sum_i Q_i, so the combined-term gradient reaches every branch.
      grads->student[i] = (gP_kl + gP_mse) + (g_kl + g_mse);
      if (teacher_grads) grads->teacher_kd[i] = (gPt_kl + gPt_mse) + (gt_kl + gt_mse);
    }
  }
  return b;
}

// alpha * CE(P_t, y) + beta * CE(P_s, y) + gamma * L_KD, with the total
// computed once from the stored parts.
inline LossBreakdown train_loss(const BranchOutputs& s, const BranchOutputs& t, std::span<const int> labels,
                                const LossWeights& w, LossGradients* grads = nullptr,
                                bool teacher_kd_grads = false) {
  LossGradients kd_grads;
  LossBreakdown b = kd_loss(s, t, w, grads ? &kd_grads : nullptr, teacher_kd_grads);
  Eigen::MatrixXd g_ct, g_cs;
  b.ce_teacher = cross_entropy(t.combined_logits, labels, grads ? &g_ct : nullptr);
  b.ce_student = cross_entropy(s.combined_logits, labels, grads ? &g_cs : nullptr);
  b.total = weighted_total(b, w);
  if (grads) {
    const std::size_t N = s.branches();
    grads->student.resize(N);
    grads->teacher_ce.resize(N);
    grads->teacher_kd.clear();
    for (std::size_t i = 0; i < N; ++i) {
      grads->student[i] = w.beta * g_cs + w.gamma * kd_grads.student[i];
      grads->teacher_ce[i] = w.alpha * g_ct;
    }
    if (teacher_kd_grads)
      for (std::size_t i = 0; i < N; ++i) grads->teacher_kd.push_back(w.gamma * kd_grads.teacher_kd[i]);
  }
  return b;
}

}  // namespace ekd
