// Trains a two-branch ResNet8 student against two teachers on synthetic
// blobs, then compares it with the same student trained on labels alone.

#include <cstdio>

#include "ekd/ekd.hpp"

int main() {
  const int classes = 4;
  auto all = ekd::synthetic_blobs(classes, 48, {16, 16, 3}, 4.0, 7);
  std::vector<std::size_t> tr, te;
  for (std::size_t i = 0; i < all.size(); ++i) (i < 32 * classes ? tr : te).push_back(i);
  const auto train = ekd::select(all, tr, "train");
  const auto test = ekd::select(all, te, "test");
  const auto data = ekd::TrainData::from(train);

  ekd::EnsembleSpec spec;
  spec.student.num_classes = classes;
  spec.student_branches = 2;
  for (int d : {14, 20}) {
    ekd::ModelSpec t;
    t.depth = d;
    t.num_classes = classes;
    spec.teachers.push_back(t);
  }

  ekd::TrainConfig cfg;
  cfg.epochs = 6;
  cfg.batch_size = 32;
  cfg.seed = 1;

  std::vector<ekd::ParamState<float>> teachers;
  auto pre = cfg;
  pre.epochs = 3;
  for (int i = 0; i < 2; ++i)
    teachers.push_back(ekd::pretrain_teacher<float>(spec.teachers[static_cast<std::size_t>(i)], data, pre, i).params[0]);

  auto print = [](const ekd::EpochRow& r) {
    std::printf("epoch %d lr %.4f loss %.4f (kd %.4f) train acc %.3f\n", r.epoch, r.lr, r.loss.total, r.loss.kd(),
                r.train_accuracy);
  };
  const auto ekd_run = ekd::train_ekd<float>(spec, teachers, data, cfg, print);
  const auto plain = ekd::train_student_supervised<float>(spec, data, cfg);

  auto evaluate = [&](const std::vector<ekd::ParamState<float>>& states) {
    std::vector<ekd::ResNet<float>> m;
    for (const auto& s : states) m.emplace_back(spec.student, s);
    return ekd::top1_accuracy(ekd::Ensemble<float>(std::move(m)), test, data.norm).top1_ensemble;
  };
  std::printf("test top-1: with EKD %.3f, labels only %.3f\n", evaluate(ekd_run.student), evaluate(plain.params));
  std::printf("student params %lld, FLOPs %lld\n", static_cast<long long>(2 * ekd::count_params(spec.student)),
              static_cast<long long>(2 * ekd::count_flops(spec.student, 16, 16)));
  return 0;
}
