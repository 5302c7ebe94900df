#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ekd/ekd.hpp"

namespace fs = std::filesystem;

namespace {

ekd::ExperimentConfig load_with_overrides(const std::string& path, const std::vector<std::string>& sets,
                                          const std::string& output_dir) {
  auto cfg = ekd::load_config(path);
  std::string extra;
  for (const auto& s : sets) extra += s + "\n";
  if (!output_dir.empty()) extra += "output_dir = " + output_dir + "\n";
  if (!extra.empty()) {
    try {
      cfg = ekd::parse_config(extra, cfg);
    } catch (const ekd::ConfigParseError& e) {
      throw ekd::ConfigParseError(0, std::string("--set override: ") + e.what());
    }
  }
  return cfg;
}

void print_summary(const std::vector<ekd::MetricsRecord>& recs) {
  if (recs.empty()) return;
  std::cout << ekd::render_table(recs);
}

std::vector<double> parse_values(const std::string& s) {
  try {
    return ekd::detail::parse_list<double>(s, "a number");
  } catch (const std::invalid_argument& e) {
    throw ekd::ConfigurationError(std::string("--values: ") + e.what());
  }
}

int inspect_model(int depth, int branches, int classes, int size, bool ladder, const std::string& checkpoint) {
  if (!checkpoint.empty()) {
    const auto ck = ekd::load_checkpoint<float>(checkpoint);
    std::printf("checkpoint %s: %zu models\n", checkpoint.c_str(), ck.models.size());
    for (const auto& m : ck.models)
      std::printf("  %-8s %-10s classes %-4d params %lld\n", m.role.c_str(), m.spec.name().c_str(),
                  m.spec.num_classes, static_cast<long long>(ekd::count_params(m.params)));
    return 0;
  }
  std::printf("model\tbranches\tclasses\tparams\tparams (M)\tFLOPs\tFLOPs (M)\n");
  auto row = [&](int d, int n) {
    ekd::ModelSpec s;
    s.depth = d;
    s.num_classes = classes;
    const auto p = ekd::count_params(s) * n, f = ekd::count_flops(s, size, size) * n;
    std::printf("%s\t%d\t%d\t%lld\t%.2f\t%lld\t%.2f\n", s.name().c_str(), n, classes, static_cast<long long>(p),
                static_cast<double>(p) / 1e6, static_cast<long long>(f), static_cast<double>(f) / 1e6);
  };
  if (ladder) {
    for (int n = 1; n <= 7; ++n) row(8, n);
    for (int d : ekd::teacher_ladder()) row(d, 1);
  } else {
    row(depth, branches);
  }
  return 0;
}

int parse_check(const std::string& format, const std::string& labels, const std::vector<std::string>& files) {
  int failures = 0;
  for (const auto& f : files) {
    try {
      const auto bytes = ekd::read_file_bytes(f);
      const auto set = format == "cifar10"
                           ? ekd::parse_cifar10(bytes, f)
                           : ekd::parse_cifar100(bytes, labels == "coarse" ? ekd::Cifar100Labels::coarse
                                                                            : ekd::Cifar100Labels::fine,
                                                 f);
      std::printf("%s: %zu records, %d classes\n  histogram:", f.c_str(), set.size(), set.num_classes);
      for (auto c : ekd::class_histogram(set)) std::printf(" %zu", c);
      std::printf("\n");
    } catch (const ekd::Error& e) {
      std::fprintf(stderr, "%s: %s\n", f.c_str(), e.what());
      ++failures;
    }
  }
  return failures ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ensemble knowledge distillation experiments"};
  app.require_subcommand(1);

  std::string config, output_dir, axis, values, kind, out, format = "cifar10", labels = "fine", checkpoint;
  std::vector<std::string> sets, inputs, files;
  bool quiet = false, ladder = false;
  int depth = 8, branches = 1, classes = 10, size = 32;

  auto* run = app.add_subcommand("run", "Run one experiment config over its seeds");
  run->add_option("config", config, "Config file (key = value lines)")->required()->check(CLI::ExistingFile);
  run->add_option("--set", sets, "Override a key, e.g. --set epochs=5");
  run->add_option("--output-dir", output_dir, "Override output_dir");
  run->add_flag("-q,--quiet", quiet, "No per-epoch progress");

  auto* sweep = app.add_subcommand("sweep", "Run a config at several values of one axis");
  sweep->add_option("config", config, "Base config file")->required()->check(CLI::ExistingFile);
  sweep->add_option("--axis", axis, "data_fraction or ensemble_size")->required();
  sweep->add_option("--values", values, "Comma-separated axis values")->required();
  sweep->add_option("--set", sets, "Override a key, e.g. --set seeds=1,2");
  sweep->add_option("--output-dir", output_dir, "Override output_dir");
  sweep->add_flag("-q,--quiet", quiet, "No per-epoch progress");

  auto* report = app.add_subcommand("report", "Render a table or plot from completed runs");
  report->add_option("--kind", kind, "table, accuracy_curve or embedding_scatter")->required();
  report->add_option("-o,--output", out, "Output path")->required();
  report->add_option("inputs", inputs, "Run directories or metrics.jsonl files")->required();

  auto* inspect = app.add_subcommand("inspect-model", "Parameter and FLOP counts");
  inspect->add_option("--depth", depth, "ResNet depth (6k+2)");
  inspect->add_option("--branches", branches, "Number of branches");
  inspect->add_option("--classes", classes, "Classifier width");
  inspect->add_option("--image-size", size, "Input height and width");
  inspect->add_flag("--ladder", ladder, "ResNet8 x1..7 and every teacher depth");
  inspect->add_option("--checkpoint", checkpoint, "Describe a checkpoint file instead");

  auto* check = app.add_subcommand("parse-check", "Parse dataset files and print class histograms");
  check->add_option("--format", format, "cifar10 or cifar100")->check(CLI::IsMember({"cifar10", "cifar100"}));
  check->add_option("--labels", labels, "cifar100 label set")->check(CLI::IsMember({"fine", "coarse"}));
  check->add_option("files", files, "Binary dataset files")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const auto cfg = load_with_overrides(config, sets, output_dir);
      ekd::RunOptions opts;
      opts.log = quiet ? nullptr : &std::cerr;
      print_summary(ekd::run_experiment(cfg, opts));
      std::cerr << "runs written under " << cfg.output_dir << "\n";
    } else if (*sweep) {
      const auto cfg = load_with_overrides(config, sets, output_dir);
      const auto recs = ekd::run_sweep(cfg, ekd::parse_sweep_axis(axis), parse_values(values), quiet ? nullptr : &std::cerr);
      if (ekd::parse_sweep_axis(axis) == ekd::SweepAxis::ensemble_size) print_summary(recs);
      else
        for (const auto& p : ekd::accuracy_curve_points(recs))
          std::printf("%s=%s\t%s\t%s\n", axis.c_str(), ekd::detail::fmt_double(p.x).c_str(), p.variant.c_str(),
                      ekd::format_mean_std(p.acc).c_str());
    } else if (*report) {
      std::vector<fs::path> paths(inputs.begin(), inputs.end());
      for (const auto& f : ekd::emit_report(ekd::collect_records(paths), ekd::parse_report_kind(kind), out))
        std::cout << f.string() << "\n";
    } else if (*inspect) {
      return inspect_model(depth, branches, classes, size, ladder, checkpoint);
    } else if (*check) {
      return parse_check(format, labels, files);
    }
  } catch (const ekd::ConfigParseError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ekd::ConfigurationError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
