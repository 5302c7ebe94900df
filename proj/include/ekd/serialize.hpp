#pragma once

// JSON views of the library's value types.

#include <string>

#include "json.hpp"

#include "ekd/eval.hpp"
#include "ekd/losses.hpp"
#include "ekd/model.hpp"
#include "ekd/train.hpp"

namespace ekd {

using json = nlohmann::json;

inline json to_json(const ModelSpec& s) {
  return {{"depth", s.depth},
          {"stage_widths", s.stage_widths},
          {"num_classes", s.num_classes},
          {"in_channels", s.in_channels}};
}

inline ModelSpec model_spec_from_json(const json& j) {
  ModelSpec s;
  s.depth = j.at("depth").get<int>();
  s.stage_widths = j.at("stage_widths").get<std::array<int, 3>>();
  s.num_classes = j.at("num_classes").get<int>();
  s.in_channels = j.at("in_channels").get<int>();
  validate(s);
  return s;
}

inline json to_json(const LossWeights& w) {
  return {{"alpha", w.alpha},
          {"beta", w.beta},
          {"gamma", w.gamma},
          {"temperature", w.temperature},
          {"soften_student", w.soften_student}};
}

inline const char* to_string(TeacherGradient g) { return g == TeacherGradient::full ? "full" : "ce_only"; }

inline json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"base_lr", c.base_lr},
          {"lr_drop_points", c.lr_drop_points},
          {"drop_factor", c.drop_factor},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"augment", c.augment},
          {"loss", to_json(c.loss)},
          {"freeze_teachers", c.freeze_teachers},
          {"teacher_gradient", to_string(c.teacher_gradient)}};
}

inline json to_json(const LossBreakdown& b) {
  return {{"ce_teacher", b.ce_teacher},
          {"ce_student", b.ce_student},
          {"kd_combined_kl", b.kd_combined_kl},
          {"kd_combined_mse", b.kd_combined_mse},
          {"kd_branch_kl_sum", b.kd_branch_kl_sum},
          {"kd_branch_mse_sum", b.kd_branch_mse_sum},
          {"total", b.total}};
}

inline LossBreakdown loss_breakdown_from_json(const json& j) {
  return {j.at("ce_teacher").get<double>(),       j.at("ce_student").get<double>(),
          j.at("kd_combined_kl").get<double>(),   j.at("kd_combined_mse").get<double>(),
          j.at("kd_branch_kl_sum").get<double>(), j.at("kd_branch_mse_sum").get<double>(),
          j.at("total").get<double>()};
}

inline json to_json(const EpochRow& r) {
  json j{{"epoch", r.epoch},
         {"lr", r.lr},
         {"loss", to_json(r.loss)},
         {"train_accuracy", r.train_accuracy},
         {"steps", r.steps},
         {"wall_seconds", r.wall_seconds}};
  j["test_accuracy"] = r.test_accuracy ? json(*r.test_accuracy) : json(nullptr);
  return j;
}

inline EpochRow epoch_row_from_json(const json& j) {
  EpochRow r;
  r.epoch = j.at("epoch").get<int>();
  r.lr = j.at("lr").get<double>();
  r.loss = loss_breakdown_from_json(j.at("loss"));
  r.train_accuracy = j.at("train_accuracy").get<double>();
  r.steps = j.at("steps").get<int>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  if (!j.at("test_accuracy").is_null()) r.test_accuracy = j.at("test_accuracy").get<double>();
  return r;
}

inline json to_json(const EvalReport& r) {
  return {{"top1_ensemble", r.top1_ensemble},
          {"top1_per_branch", r.top1_per_branch},
          {"dataset_id", r.dataset_id},
          {"model_id", r.model_id},
          {"samples", r.samples}};
}

inline EvalReport eval_report_from_json(const json& j) {
  EvalReport r;
  r.top1_ensemble = j.at("top1_ensemble").get<double>();
  r.top1_per_branch = j.at("top1_per_branch").get<std::vector<double>>();
  r.dataset_id = j.at("dataset_id").get<std::string>();
  r.model_id = j.at("model_id").get<std::string>();
  r.samples = j.at("samples").get<std::size_t>();
  return r;
}

}  // namespace ekd
