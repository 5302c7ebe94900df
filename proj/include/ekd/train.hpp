#pragma once

// Teacher pretraining and joint ensemble distillation.

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include "ekd/data.hpp"
#include "ekd/eval.hpp"
#include "ekd/losses.hpp"
#include "ekd/model.hpp"
#include "ekd/network.hpp"
#include "ekd/optim.hpp"

namespace ekd {

enum class TeacherGradient {
  ce_only,  // teachers learn from alpha * CE(P_t, y) alone
  full,     // teachers also receive the gamma * L_KD gradient
};

struct TrainConfig {
  int epochs = 500;
  double base_lr = 0.01;
  std::vector<double> lr_drop_points{0.5, 0.75};
  double drop_factor = 10.0;
  double weight_decay = 5e-4;
  int batch_size = 128;
  std::uint64_t seed = 0;
  bool augment = false;
  LossWeights loss;
  bool freeze_teachers = false;
  TeacherGradient teacher_gradient = TeacherGradient::ce_only;

  void validate() const {
    if (epochs < 1) throw ConfigurationError("epochs must be >= 1");
    if (!(base_lr >= 0) || !std::isfinite(base_lr)) throw ConfigurationError("base_lr must be finite and >= 0");
    if (!(drop_factor > 0)) throw ConfigurationError("drop_factor must be > 0");
    if (!(weight_decay >= 0)) throw ConfigurationError("weight_decay must be >= 0");
    if (batch_size < 1) throw ConfigurationError("batch_size must be >= 1");
    for (double d : lr_drop_points)
      if (!(d > 0 && d < 1)) throw ConfigurationError("lr drop points must lie strictly inside (0, 1)");
    loss.validate();
  }
};

// Piecewise-constant schedule: divided by drop_factor from epoch
// ceil(d * epochs) for every drop point d.
inline double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.epochs)
    throw ConfigurationError("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) + ")");
  double lr = cfg.base_lr;
  for (double d : cfg.lr_drop_points) {
    const auto boundary = static_cast<int>(std::ceil(d * cfg.epochs - 1e-9));
    if (epoch >= boundary) lr /= cfg.drop_factor;
  }
  return lr;
}

struct EpochRow {
  int epoch = 0;
  double lr = 0;
  LossBreakdown loss;  // sample-weighted means over the epoch
  double train_accuracy = 0;
  std::optional<double> test_accuracy;
  int steps = 0;
  double wall_seconds = 0;
};

using TrainTrace = std::vector<EpochRow>;
using EpochCallback = std::function<void(const EpochRow&)>;

struct TrainData {
  const LabeledImageSet* train = nullptr;
  const LabeledImageSet* test = nullptr;  // optional, scored after every epoch
  Normalization norm;

  static TrainData from(const LabeledImageSet& train, const LabeledImageSet* test = nullptr) {
    return {&train, test, compute_normalization(train)};
  }
};

template <typename S>
struct SupervisedResult {
  std::vector<ParamState<S>> params;
  TrainTrace trace;
};

template <typename S>
struct EkdResult {
  std::vector<ParamState<S>> student;
  std::vector<ParamState<S>> teachers;
  TrainTrace trace;
};

namespace detail {

struct EpochAccumulator {
  LossBreakdown sum;
  std::size_t samples = 0, correct = 0;
  int steps = 0;

  void add(const LossBreakdown& b, std::size_t n, std::size_t ok) {
    const double w = static_cast<double>(n);
    sum.ce_teacher += w * b.ce_teacher;
    sum.ce_student += w * b.ce_student;
    sum.kd_combined_kl += w * b.kd_combined_kl;
    sum.kd_combined_mse += w * b.kd_combined_mse;
    sum.kd_branch_kl_sum += w * b.kd_branch_kl_sum;
    sum.kd_branch_mse_sum += w * b.kd_branch_mse_sum;
    sum.total += w * b.total;
    samples += n;
    correct += ok;
    ++steps;
  }

  LossBreakdown mean() const {
    const double inv = samples ? 1.0 / static_cast<double>(samples) : 0.0;
    return {sum.ce_teacher * inv,     sum.ce_student * inv,        sum.kd_combined_kl * inv,
            sum.kd_combined_mse * inv, sum.kd_branch_kl_sum * inv, sum.kd_branch_mse_sum * inv,
            sum.total * inv};
  }
};

inline bool finite_outputs(const BranchOutputs& o) {
  for (const auto& q : o.branch_logits)
    if (!q.allFinite()) return false;
  return o.combined_logits.allFinite();
}

inline LossBreakdown diverged_loss() {
  LossBreakdown b;
  b.total = std::numeric_limits<double>::quiet_NaN();
  return b;
}

template <typename S>
std::vector<Adam<S>> make_optimizers(const Ensemble<S>& e) {
  std::vector<Adam<S>> out;
  for (const auto& m : e.members()) out.emplace_back(m.params());
  return out;
}

template <typename S>
void apply(Ensemble<S>& e, std::vector<Adam<S>>& opt, const std::vector<Gradients<S>>& g, double lr, double wd) {
  for (std::size_t i = 0; i < e.size(); ++i) opt[i].step(e[i].params(), g[i], lr, wd);
}

// Shared epoch driver; `step` trains on one batch and returns its loss and
// the number of correct combined predictions.
template <typename S, typename Step>
TrainTrace run_epochs(const TrainData& data, const TrainConfig& cfg, std::uint64_t order_seed,
                      const Ensemble<S>& scored, Step&& step, const EpochCallback& on_epoch) {
  cfg.validate();
  if (!data.train || data.train->empty()) throw ConfigurationError("training data is empty");
  TrainTrace trace;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at(epoch, cfg);
    BatchIterator it(*data.train, data.norm, cfg.batch_size, order_seed, epoch, cfg.augment);
    EpochAccumulator acc;
    for (std::size_t b = 0; b < it.num_batches(); ++b) {
      const auto batch = it.template batch<S>(b);
      const auto [loss, correct] = step(batch, lr);
      if (!std::isfinite(loss.total)) throw DivergedError(epoch);
      acc.add(loss, batch.size(), correct);
    }
    EpochRow row;
    row.epoch = epoch;
    row.lr = lr;
    row.loss = acc.mean();
    row.train_accuracy = static_cast<double>(acc.correct) / static_cast<double>(acc.samples);
    row.steps = acc.steps;
    if (data.test && !data.test->empty()) row.test_accuracy = top1_accuracy(scored, *data.test, data.norm).top1_ensemble;
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_epoch) on_epoch(row);
    trace.push_back(row);
  }
  return trace;
}

}  // namespace detail

// Plain cross-entropy on the combined logits of `model`.
template <typename S>
TrainTrace train_supervised(Ensemble<S>& model, const TrainData& data, const TrainConfig& cfg,
                            std::uint64_t order_seed, const EpochCallback& on_epoch = {}) {
  auto opt = detail::make_optimizers(model);
  return detail::run_epochs<S>(
      data, cfg, order_seed, model,
      [&](const ImageBatch<S>& batch, double lr) {
        auto out = model.forward(batch, Mode::train);
        if (!detail::finite_outputs(out)) return std::pair{detail::diverged_loss(), std::size_t{0}};
        Eigen::MatrixXd g;
        LossBreakdown b;
        b.ce_student = cross_entropy(out.combined_logits, batch.labels, &g);
        b.total = b.ce_student;
        const std::size_t ok = count_correct(out.combined_logits, batch.labels);
        if (std::isfinite(b.total)) {
          std::vector<Eigen::MatrixXd> dl(model.size(), g);
          detail::apply(model, opt, model.backward(dl), lr, cfg.weight_decay);
        }
        return std::pair{b, ok};
      },
      on_epoch);
}

// Seeds of the i-th teacher's initialisation and data order.
inline std::uint64_t teacher_init_seed(std::uint64_t seed, int index) {
  return derive_seed(seed, {stream::teacher, static_cast<std::uint64_t>(index)});
}
inline std::uint64_t teacher_order_seed(std::uint64_t seed, int index) {
  return derive_seed(seed, {stream::teacher, static_cast<std::uint64_t>(index), stream::shuffle});
}

template <typename S = float>
SupervisedResult<S> pretrain_teacher(const ModelSpec& spec, const TrainData& data, const TrainConfig& cfg,
                                     int teacher_index = 0, const EpochCallback& on_epoch = {}) {
  Ensemble<S> model({ResNet<S>::initialized(spec, teacher_init_seed(cfg.seed, teacher_index))});
  auto trace = train_supervised(model, data, cfg, teacher_order_seed(cfg.seed, teacher_index), on_epoch);
  return {model.states(), std::move(trace)};
}

template <typename S>
Ensemble<S> init_student(const EnsembleSpec& spec, std::uint64_t seed) {
  return Ensemble<S>::branches(spec.student, spec.student_branches, seed, stream::student);
}

// The student trained on labels alone, with the same initialisation and
// batch order that train_ekd uses for the same seed.
template <typename S = float>
SupervisedResult<S> train_student_supervised(const EnsembleSpec& spec, const TrainData& data,
                                             const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  spec.validate(false);
  auto student = init_student<S>(spec, cfg.seed);
  auto trace = train_supervised(student, data, cfg, cfg.seed, on_epoch);
  return {student.states(), std::move(trace)};
}

// Joint stage: student minimizes the full objective, teachers (unless
// frozen) follow alpha * CE(P_t, y), plus gamma * L_KD in `full` mode.
// An empty `teachers` list starts the teachers from scratch.
template <typename S = float>
EkdResult<S> train_ekd(const EnsembleSpec& spec, std::vector<ParamState<S>> teachers, const TrainData& data,
                       const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  spec.validate(true);
  cfg.validate();
  std::vector<ResNet<S>> tm;
  for (std::size_t i = 0; i < spec.teachers.size(); ++i) {
    if (teachers.empty())
      tm.push_back(ResNet<S>::initialized(spec.teachers[i], teacher_init_seed(cfg.seed, static_cast<int>(i))));
    else if (teachers.size() != spec.teachers.size())
      throw PairingError(std::to_string(teachers.size()) + " teacher states for " +
                         std::to_string(spec.teachers.size()) + " teacher specs");
    else
      tm.emplace_back(spec.teachers[i], std::move(teachers[i]));
  }
  Ensemble<S> teacher(std::move(tm));
  auto student = init_student<S>(spec, cfg.seed);
  auto s_opt = detail::make_optimizers(student);
  auto t_opt = detail::make_optimizers(teacher);
  const bool freeze = cfg.freeze_teachers;
  const bool full = cfg.teacher_gradient == TeacherGradient::full && !freeze;

  auto trace = detail::run_epochs<S>(
      data, cfg, cfg.seed, student,
      [&](const ImageBatch<S>& batch, double lr) {
        const auto so = student.forward(batch, Mode::train);
        const auto to = teacher.forward(batch, freeze ? Mode::eval : Mode::train);
        if (!detail::finite_outputs(so) || !detail::finite_outputs(to))
          return std::pair{detail::diverged_loss(), std::size_t{0}};
        LossGradients lg;
        const auto b = train_loss(so, to, batch.labels, cfg.loss, &lg, full);
        const std::size_t ok = count_correct(so.combined_logits, batch.labels);
        if (!std::isfinite(b.total)) return std::pair{b, ok};
        detail::apply(student, s_opt, student.backward(lg.student), lr, cfg.weight_decay);
        if (!freeze) {
          std::vector<Eigen::MatrixXd> dt = lg.teacher_ce;
          if (full)
            for (std::size_t i = 0; i < dt.size(); ++i) dt[i] += lg.teacher_kd[i];
          detail::apply(teacher, t_opt, teacher.backward(dt), lr, cfg.weight_decay);
        }
        return std::pair{b, ok};
      },
      on_epoch);
  return {student.states(), teacher.states(), std::move(trace)};
}

}  // namespace ekd
