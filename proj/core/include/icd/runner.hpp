#pragma once

#include <filesystem>
#include <iosfwd>
#include <vector>

#include "icd/analysis.hpp"
#include "icd/config.hpp"
#include "icd/grad_check.hpp"

namespace icd {

/// Round-trippable decimal formatting used by every CSV/JSON emitter.
std::string format_double(double v);

void write_metrics_csv(const std::filesystem::path& path, const RunMetrics& metrics);

/// Gradient checks for every differentiable op (inputs_per_shape random
/// draws per shape class) plus the full training objective on a tiny
/// teacher/student pair (batch 2, K=3, w=4, M={1,2,4}), checked against
/// central differences for every student parameter and for the student
/// logit map itself.
std::vector<GradCheckReport> gradient_suite(std::uint64_t seed, std::size_t inputs_per_shape,
                                            double tolerance);

// Orchestration behind the CLI subcommands. Each writes its outputs under
// cfg.out_dir and returns a process exit code; 0 means the run completed and
// every invariant spot-check passed.
int run_train_teacher(const RunConfig& cfg, std::ostream& log);
int run_train_student(const RunConfig& cfg, std::ostream& log);
int run_eval(const RunConfig& cfg, std::ostream& log);
int run_grad_check(const RunConfig& cfg, std::ostream& log);
int run_gram_dump(const RunConfig& cfg, std::ostream& log);
int run_ablate_scales(const RunConfig& cfg, std::ostream& log);
int run_ablate_gamma(const RunConfig& cfg, std::ostream& log);
int run_discrepancy(const RunConfig& cfg, std::ostream& log);

}  // namespace icd
