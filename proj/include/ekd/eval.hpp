#pragma once

// Accuracy reports, penultimate-feature dumps, a principal-component 2-D
// projection for plotting, and inference timing.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ekd/data.hpp"
#include "ekd/network.hpp"

namespace ekd {

struct EvalReport {
  double top1_ensemble = 0;
  std::vector<double> top1_per_branch;
  std::string dataset_id;
  std::string model_id;
  std::size_t samples = 0;
};

// First index of the row maximum.
inline Eigen::Index argmax_row(const Eigen::MatrixXd& m, Eigen::Index r) {
  Eigen::Index best = 0;
  for (Eigen::Index c = 1; c < m.cols(); ++c)
    if (m(r, c) > m(r, best)) best = c;
  return best;
}

inline std::size_t count_correct(const Eigen::MatrixXd& logits, std::span<const int> labels) {
  std::size_t ok = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r)
    if (argmax_row(logits, r) == labels[static_cast<std::size_t>(r)]) ++ok;
  return ok;
}

namespace detail {

inline void require_classes(int model_classes, const LabeledImageSet& set) {
  if (model_classes != set.num_classes)
    throw ConfigurationError("model predicts " + std::to_string(model_classes) + " classes but dataset '" +
                             set.split_name + "' has " + std::to_string(set.num_classes));
}

// Calls fn(batch, outputs) over the set in dataset order, inference mode.
template <typename S, typename Fn>
void for_each_inferred(const Ensemble<S>& model, const LabeledImageSet& set, const Normalization& norm,
                       int batch_size, Fn&& fn) {
  std::vector<std::size_t> idx;
  for (std::size_t lo = 0; lo < set.size(); lo += static_cast<std::size_t>(batch_size)) {
    const std::size_t hi = std::min(set.size(), lo + static_cast<std::size_t>(batch_size));
    idx.resize(hi - lo);
    std::iota(idx.begin(), idx.end(), lo);
    auto batch = make_batch<S>(set, idx, norm);
    fn(batch, model.infer(batch));
  }
}

}  // namespace detail

// Ensemble prediction is the argmax of the summed logits (softmax is
// monotone, so it is skipped); each branch is also scored on its own.
template <typename S>
EvalReport top1_accuracy(const Ensemble<S>& model, const LabeledImageSet& set, const Normalization& norm,
                         std::string model_id = {}, int batch_size = 256) {
  detail::require_classes(model.num_classes(), set);
  EvalReport r;
  r.dataset_id = set.split_name;
  r.model_id = std::move(model_id);
  r.samples = set.size();
  std::size_t ens = 0;
  std::vector<std::size_t> per(model.size(), 0);
  detail::for_each_inferred(model, set, norm, batch_size, [&](const ImageBatch<S>& b, const BranchOutputs& o) {
    ens += count_correct(o.combined_logits, b.labels);
    for (std::size_t i = 0; i < o.branches(); ++i) per[i] += count_correct(o.branch_logits[i], b.labels);
  });
  const double n = set.empty() ? 1.0 : static_cast<double>(set.size());
  r.top1_ensemble = static_cast<double>(ens) / n;
  for (auto c : per) r.top1_per_branch.push_back(static_cast<double>(c) / n);
  return r;
}

struct FeatureRow {
  std::size_t sample = 0;
  int label = 0;
  int branch = 0;  // -1 marks a branch-summed row
  std::vector<double> feature;
};

struct FeatureDump {
  int feature_dim = 0;
  std::vector<FeatureRow> rows;
};

// Post-pooling vector Y of every branch for every sample (sample-major).
template <typename S>
FeatureDump extract_features(const Ensemble<S>& model, const LabeledImageSet& set, const Normalization& norm,
                             int batch_size = 256) {
  detail::require_classes(model.num_classes(), set);
  FeatureDump dump;
  dump.feature_dim = model[0].spec().feature_dim();
  dump.rows.reserve(set.size() * model.size());
  detail::for_each_inferred(model, set, norm, batch_size, [&](const ImageBatch<S>& b, const BranchOutputs& o) {
    for (int r = 0; r < b.n; ++r)
      for (std::size_t i = 0; i < o.branches(); ++i) {
        const auto& f = o.features[i];
        FeatureRow row{b.indices[static_cast<std::size_t>(r)], b.labels[static_cast<std::size_t>(r)],
                       static_cast<int>(i), std::vector<double>(static_cast<std::size_t>(f.cols()))};
        for (Eigen::Index c = 0; c < f.cols(); ++c) row.feature[static_cast<std::size_t>(c)] = f(r, c);
        dump.rows.push_back(std::move(row));
      }
  });
  return dump;
}

// One row per sample holding the sum of its branch features.
inline FeatureDump summed_features(const FeatureDump& dump) {
  FeatureDump out;
  out.feature_dim = dump.feature_dim;
  for (const auto& r : dump.rows) {
    if (out.rows.empty() || out.rows.back().sample != r.sample) {
      out.rows.push_back({r.sample, r.label, -1, r.feature});
      continue;
    }
    auto& acc = out.rows.back().feature;
    for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += r.feature[c];
  }
  return out;
}

// Columns: sample,label,branch,f0..f{M-1}
inline void write_feature_dump(const std::string& path, const FeatureDump& dump) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << "sample,label,branch";
  for (int c = 0; c < dump.feature_dim; ++c) out << ",f" << c;
  out << '\n';
  char buf[32];
  for (const auto& r : dump.rows) {
    out << r.sample << ',' << r.label << ',' << r.branch;
    for (double v : r.feature) {
      std::snprintf(buf, sizeof buf, "%.9g", v);
      out << ',' << buf;
    }
    out << '\n';
  }
}

inline FeatureDump read_feature_dump(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path);
  std::string line;
  if (!std::getline(in, line)) throw MalformedFileError(path + ": empty feature dump");
  FeatureDump dump;
  dump.feature_dim = static_cast<int>(std::count(line.begin(), line.end(), ',')) - 2;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    FeatureRow r;
    std::getline(ss, cell, ',');
    r.sample = std::stoull(cell);
    std::getline(ss, cell, ',');
    r.label = std::stoi(cell);
    std::getline(ss, cell, ',');
    r.branch = std::stoi(cell);
    while (std::getline(ss, cell, ',')) r.feature.push_back(std::stod(cell));
    if (static_cast<int>(r.feature.size()) != dump.feature_dim)
      throw MalformedFileError(path + ": inconsistent feature width");
    dump.rows.push_back(std::move(r));
  }
  return dump;
}

struct Projection2D {
  Eigen::MatrixXd coords;  // rows x 2
  int rank = 0;            // min(2, numerical rank)
  bool degenerate = false;
};

// Principal-component projection. Component signs are fixed so that the
// largest-magnitude loading is positive.
inline Projection2D project_2d(const Eigen::MatrixXd& x) {
  if (x.rows() < 3) throw InvalidInputError("project_2d needs at least 3 rows");
  const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::VectorXd vals = eig.eigenvalues();  // ascending
  const double top = vals.size() ? vals(vals.size() - 1) : 0.0;
  int rank = 0;
  for (Eigen::Index i = 0; i < vals.size(); ++i)
    if (top > 0 && vals(i) > 1e-10 * top && vals(i) > 1e-300) ++rank;

  Projection2D p;
  p.rank = std::min(rank, 2);
  p.degenerate = rank < 2;
  p.coords = Eigen::MatrixXd::Zero(x.rows(), 2);
  for (int k = 0; k < p.rank; ++k) {
    Eigen::VectorXd v = eig.eigenvectors().col(vals.size() - 1 - k);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    p.coords.col(k) = centered * v;
  }
  return p;
}

inline Projection2D project_2d(const FeatureDump& dump) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(dump.rows.size()), dump.feature_dim);
  for (std::size_t r = 0; r < dump.rows.size(); ++r)
    for (int c = 0; c < dump.feature_dim; ++c)
      x(static_cast<Eigen::Index>(r), c) = dump.rows[r].feature[static_cast<std::size_t>(c)];
  return project_2d(x);
}

struct InferenceTiming {
  std::vector<double> samples_ms;
  double median_ms = 0;
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// Median wall time of `repetitions` inference passes after `warmup` untimed
// ones. Callers must not run timings concurrently.
template <typename S>
InferenceTiming measure_inference(const Ensemble<S>& model, const ImageBatch<S>& batch, int repetitions,
                                  int warmup = 1) {
  if (repetitions < 3) throw InvalidInputError("measure_inference needs at least 3 repetitions");
  for (int i = 0; i < warmup; ++i) (void)model.infer(batch);
  InferenceTiming t;
  for (int i = 0; i < repetitions; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    auto out = model.infer(batch);
    const auto t1 = std::chrono::steady_clock::now();
    if (out.combined_logits.rows() != batch.n) throw Error("inference produced a wrong batch size");
    t.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  t.median_ms = median(t.samples_ms);
  return t;
}

}  // namespace ekd
