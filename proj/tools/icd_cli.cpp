// Command-line front end: subcommands map 1:1 onto the runner entry points.

#include <CLI11.hpp>

#include <iostream>
#include <optional>

#include "icd/runner.hpp"

namespace {

struct CliArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string teacher;
  std::string student;
  std::string ckpt;
  std::string method;
};

void add_common(CLI::App* cmd, CliArgs& args) {
  cmd->add_option("--config", args.config, "key = value config file")
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed", args.seed, "override the training seed");
  cmd->add_option("--out", args.out, "output directory override");
}

icd::RunConfig build_config(const CliArgs& args) {
  icd::RunConfig cfg =
      args.config.empty() ? icd::RunConfig{} : icd::parse_config_file(args.config);
  if (args.seed) cfg.train.seed = *args.seed;
  if (!args.out.empty()) cfg.out_dir = args.out;
  if (!args.teacher.empty()) cfg.teacher_ckpt = args.teacher;
  if (!args.student.empty()) cfg.student_ckpt = args.student;
  if (!args.ckpt.empty()) cfg.student_ckpt = args.ckpt;
  if (!args.method.empty()) cfg.method = args.method;
  cfg.finalize();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"implicit clustering distillation workbench"};
  app.require_subcommand(1);
  CliArgs args;

  auto* train_teacher = app.add_subcommand("train-teacher", "train the teacher with labels only");
  add_common(train_teacher, args);

  auto* train_student =
      app.add_subcommand("train-student", "train a student against a frozen teacher");
  add_common(train_student, args);
  train_student->add_option("--teacher", args.teacher, "teacher checkpoint");
  train_student->add_option("--method", args.method, "ce, kd, sdd or icd");

  auto* eval = app.add_subcommand("eval", "test accuracy of a checkpoint");
  add_common(eval, args);
  eval->add_option("--ckpt", args.ckpt, "checkpoint to evaluate");

  auto* grad = app.add_subcommand("grad-check", "finite-difference gradient suite");
  add_common(grad, args);

  auto* gram = app.add_subcommand("gram-dump", "dump teacher/student Gram pairs");
  add_common(gram, args);
  gram->add_option("--teacher", args.teacher, "teacher checkpoint");
  gram->add_option("--student", args.student, "student checkpoint");

  auto* ablate_scales = app.add_subcommand("ablate-scales", "sweep the scale set M");
  add_common(ablate_scales, args);
  ablate_scales->add_option("--teacher", args.teacher, "teacher checkpoint");

  auto* ablate_gamma = app.add_subcommand("ablate-gamma", "sweep gamma over 1..8");
  add_common(ablate_gamma, args);
  ablate_gamma->add_option("--teacher", args.teacher, "teacher checkpoint");

  auto* disc = app.add_subcommand("discrepancy", "logit correlation discrepancy report");
  add_common(disc, args);
  disc->add_option("--teacher", args.teacher, "teacher checkpoint");
  disc->add_option("--student", args.student, "student checkpoint");

  CLI11_PARSE(app, argc, argv);

  try {
    const icd::RunConfig cfg = build_config(args);
    if (train_teacher->parsed()) return icd::run_train_teacher(cfg, std::cout);
    if (train_student->parsed()) return icd::run_train_student(cfg, std::cout);
    if (eval->parsed()) return icd::run_eval(cfg, std::cout);
    if (grad->parsed()) return icd::run_grad_check(cfg, std::cout);
    if (gram->parsed()) return icd::run_gram_dump(cfg, std::cout);
    if (ablate_scales->parsed()) return icd::run_ablate_scales(cfg, std::cout);
    if (ablate_gamma->parsed()) return icd::run_ablate_gamma(cfg, std::cout);
    if (disc->parsed()) return icd::run_discrepancy(cfg, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
