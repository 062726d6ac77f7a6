#include "icd/runner.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "icd/checkpoint.hpp"
#include "icd/rng.hpp"
#include "icd/tensor_io.hpp"

namespace icd {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr std::uint64_t kStreamTeacherInit = 201;
constexpr std::uint64_t kStreamStudentInit = 202;
constexpr std::uint64_t kStreamGradSuite = 203;

namespace fs = std::filesystem;

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory " + dir.string());
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os << text;
}

ChannelStats resolve_stats(const RunConfig& cfg, const Dataset& ds) {
  if (cfg.norm_mean && cfg.norm_std) {
    ChannelStats stats;
    stats.mean = *cfg.norm_mean;
    stats.stddev = *cfg.norm_std;
    for (double s : stats.stddev) {
      if (s <= 0.0) throw ConfigError("norm_std entries must be positive");
    }
    return stats;
  }
  return compute_channel_stats(ds);
}

std::optional<ChannelStats> stats_from_meta(const Checkpoint& ckpt) {
  if (!ckpt.meta.count("norm_mean_0")) return std::nullopt;
  ChannelStats stats;
  for (std::size_t c = 0; c < 3; ++c) {
    stats.mean[c] = meta_get_double(ckpt, "norm_mean_" + std::to_string(c));
    stats.stddev[c] = meta_get_double(ckpt, "norm_std_" + std::to_string(c));
  }
  return stats;
}

void put_stats_meta(std::map<std::string, std::string>& meta, const ChannelStats& stats) {
  for (std::size_t c = 0; c < 3; ++c) {
    meta["norm_mean_" + std::to_string(c)] = meta_double(stats.mean[c]);
    meta["norm_std_" + std::to_string(c)] = meta_double(stats.stddev[c]);
  }
}

ordered_json stats_json(const ChannelStats& stats) {
  ordered_json j;
  j["mean"] = {stats.mean[0], stats.mean[1], stats.mean[2]};
  j["std"] = {stats.stddev[0], stats.stddev[1], stats.stddev[2]};
  return j;
}

ordered_json config_json(const RunConfig& cfg) {
  ordered_json j;
  for (const auto& [k, v] : config_echo(cfg)) j[k] = v;
  return j;
}

ordered_json outcome_json(const TrainOutcome& outcome) {
  const EpochMetrics& last = outcome.metrics.epochs.back();
  ordered_json j;
  j["epochs_run"] = outcome.metrics.epochs.size();
  j["final_test_acc"] = outcome.final_test_acc;
  j["best_test_acc"] = outcome.best_test_acc;
  j["final_train_acc"] = outcome.final_train_acc;
  j["final_loss"] = {{"total", last.loss_total},
                     {"ce", last.loss_ce},
                     {"kd", last.loss_kd},
                     {"sdd", last.loss_sdd},
                     {"icd", last.loss_icd}};
  return j;
}

bool spot_check_outcome(const TrainOutcome& outcome, std::ostream& log) {
  bool ok = true;
  if (outcome.max_component_residual > 1e-10) {
    log << "spot-check FAILED: loss components do not reproduce the total (residual "
        << format_double(outcome.max_component_residual) << ")\n";
    ok = false;
  }
  for (const EpochMetrics& em : outcome.metrics.epochs) {
    if (em.train_acc < 0.0 || em.train_acc > 1.0 || em.test_acc < 0.0 || em.test_acc > 1.0) {
      log << "spot-check FAILED: accuracy outside [0,1] at epoch " << em.epoch << "\n";
      ok = false;
      break;
    }
  }
  return ok;
}

std::map<std::string, std::string> run_meta(const RunConfig& cfg, const TrainOutcome& outcome,
                                            const ChannelStats& stats, const char* kind) {
  std::map<std::string, std::string> meta;
  meta["kind"] = kind;
  meta["seed"] = std::to_string(cfg.train.seed);
  meta["data_seed"] = std::to_string(cfg.dataset.seed);
  meta["dataset"] = dataset_kind_str(cfg.dataset.kind);
  meta["epoch"] = std::to_string(outcome.metrics.epochs.size());
  meta["test_accuracy"] = meta_double(outcome.final_test_acc);
  meta["train_accuracy"] = meta_double(outcome.final_train_acc);
  put_stats_meta(meta, stats);
  return meta;
}

void write_summary(const fs::path& path, ordered_json summary) {
  write_text_file(path, summary.dump(2) + "\n");
}

/// Loads a checkpoint and pairs it with normalization stats (checkpoint meta
/// wins over config-resolved statistics so evaluation matches training).
struct LoadedNet {
  Checkpoint ckpt;
  ConvNet net;
  ChannelStats stats;
};

LoadedNet load_net(const std::string& path, const RunConfig& cfg, const Dataset& ds) {
  if (path.empty()) throw ConfigError("a checkpoint path is required");
  Checkpoint ckpt = load_checkpoint(path);
  ConvNet net = checkpoint_to_net(ckpt, /*trainable=*/false);
  const auto meta_stats = stats_from_meta(ckpt);
  const ChannelStats stats = meta_stats ? *meta_stats : resolve_stats(cfg, ds);
  return {std::move(ckpt), std::move(net), stats};
}

std::vector<std::vector<double>> snapshot_params(const ConvNet& net) {
  std::vector<std::vector<double>> snap;
  for (const Parameter& p : net.params()) {
    snap.emplace_back(p.value.data().begin(), p.value.data().end());
  }
  return snap;
}

bool params_equal(const ConvNet& net, const std::vector<std::vector<double>>& snap) {
  for (std::size_t i = 0; i < net.params().size(); ++i) {
    const auto d = net.params()[i].value.data();
    if (!std::equal(d.begin(), d.end(), snap[i].begin(), snap[i].end())) return false;
  }
  return true;
}

}  // namespace

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_metrics_csv(const std::filesystem::path& path, const RunMetrics& metrics) {
  std::ostringstream os;
  os << "epoch,lr,warmup,loss_total,loss_ce,loss_kd,loss_sdd,loss_icd,train_acc,test_acc\n";
  for (const EpochMetrics& em : metrics.epochs) {
    os << em.epoch << ',' << format_double(em.lr) << ',' << format_double(em.warmup) << ','
       << format_double(em.loss_total) << ',' << format_double(em.loss_ce) << ','
       << format_double(em.loss_kd) << ',' << format_double(em.loss_sdd) << ','
       << format_double(em.loss_icd) << ',' << format_double(em.train_acc) << ','
       << format_double(em.test_acc) << '\n';
  }
  write_text_file(path, os.str());
}

// ---------------------------------------------------------------------------
// Gradient suite
// ---------------------------------------------------------------------------

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = rng.uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(data));
}

/// Random tensor with entries bounded away from zero (for relu's kink).
Tensor random_tensor_off_kink(Shape shape, Rng& rng, double margin) {
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) {
    const double mag = margin + rng.uniform(0.0, 1.0);
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  return Tensor::from_data(std::move(shape), std::move(data));
}

/// Scalarizes an op output with a fixed random weighting so the check does
/// not silently pass through a constant-sum output (e.g. softmax).
std::function<Tensor(const Tensor&)> weighted(const std::function<Tensor(const Tensor&)>& op,
                                              const Tensor& probe_input, Rng& rng) {
  const Tensor probe = op(probe_input);
  const Tensor weights = random_tensor(probe.shape(), rng);
  return [op, weights](const Tensor& x) { return sum_all(mul(op(x), weights)); };
}

void check_op(std::vector<GradCheckReport>& reports, const std::string& name,
              const std::function<Tensor(const Tensor&)>& op, Shape input_shape, Rng& rng,
              std::size_t inputs, double tolerance, double margin = 0.0, double lo = -1.0,
              double hi = 1.0) {
  for (std::size_t i = 0; i < inputs; ++i) {
    const Tensor input = margin > 0.0 ? random_tensor_off_kink(input_shape, rng, margin)
                                      : random_tensor(input_shape, rng, lo, hi);
    const auto fn = weighted(op, input, rng);
    reports.push_back(grad_check(name, fn, input, tolerance));
  }
}

/// Tiny two-network training objective shared by the full-objective checks.
struct ObjectiveFixture {
  ConvNetSpec teacher_spec;
  ConvNetSpec student_spec;
  std::vector<Tensor> teacher_params;
  std::vector<Tensor> student_params;
  std::vector<std::string> student_names;
  Tensor images;
  std::vector<std::size_t> labels;
  DistillConfig distill;
  ScaleSpec scale_spec{{1, 2, 4}, 4};
  CellLogits teacher_cells;
  LogitMap teacher_map{Tensor::zeros({1, 2, 4, 4})};

  explicit ObjectiveFixture(std::uint64_t seed)
      : teacher_spec(ConvNetSpec::make({{4, 2}, {6, 2}}, 16, 3)),
        student_spec(ConvNetSpec::make({{3, 2}, {5, 2}}, 16, 3)),
        teacher_map(Tensor::zeros({1, 2, 4, 4})) {
    Rng rng = Rng::derive(seed, kStreamGradSuite, 7);
    Rng t_init = Rng::derive(seed, kStreamGradSuite, 8);
    Rng s_init = Rng::derive(seed, kStreamGradSuite, 9);
    ConvNet teacher(teacher_spec, t_init, /*trainable=*/false);
    ConvNet student(student_spec, s_init, /*trainable=*/true);
    for (const Parameter& p : teacher.params()) teacher_params.push_back(p.value);
    for (const Parameter& p : student.params()) {
      student_params.push_back(p.value.detached());
      student_names.push_back(p.name);
    }
    images = random_tensor({2, 3, 16, 16}, rng);
    labels = {rng.below(3), rng.below(3)};
    distill.scales = {1, 2, 4};
    distill.temperature = 4.0;
    distill.alpha = 1.0;
    distill.gamma = 2.0;
    distill.warmup_epochs = 30;
    teacher_map = teacher.logit_map(images);
    teacher_cells = pool_cells(teacher_map, scale_spec);
  }

  /// Full objective (warm-up complete) from raw student parameter tensors.
  Tensor objective(const std::vector<Tensor>& params) const {
    const Tensor feats = forward_features_with(student_spec, params, images);
    const LogitMap smap = project_logit_map(feats, params.back());
    const Tensor ce = cross_entropy(global_logits(smap), labels);
    const CellLogits s_cells = pool_cells(smap, scale_spec);
    const Tensor sdd = sdd_loss(teacher_cells, s_cells, distill);
    const Tensor icd = icd_loss(teacher_cells, s_cells, distill);
    return total_loss(ce, sdd, icd, distill, distill.warmup_epochs);
  }

  /// Full structural+decoupled+label objective as a function of the student
  /// logit map alone.
  Tensor objective_of_map(const Tensor& map_values) const {
    const LogitMap smap{map_values};
    const Tensor ce = cross_entropy(global_logits(smap), labels);
    const CellLogits s_cells = pool_cells(smap, scale_spec);
    const Tensor sdd = sdd_loss(teacher_cells, s_cells, distill);
    const Tensor icd = icd_loss(teacher_cells, s_cells, distill);
    return total_loss(ce, sdd, icd, distill, distill.warmup_epochs);
  }
};

}  // namespace

std::vector<GradCheckReport> gradient_suite(std::uint64_t seed, std::size_t inputs_per_shape,
                                            double tolerance) {
  std::vector<GradCheckReport> reports;
  Rng rng = Rng::derive(seed, kStreamGradSuite);
  const std::size_t n = inputs_per_shape;

  // Elementwise and unary ops.
  {
    Rng aux = Rng::derive(seed, kStreamGradSuite, 1);
    const Tensor b1 = random_tensor({4, 3}, aux);
    check_op(reports, "add", [b1](const Tensor& x) { return add(x, b1); }, {4, 3}, rng, n,
             tolerance);
    check_op(reports, "sub", [b1](const Tensor& x) { return sub(x, b1); }, {4, 3}, rng, n,
             tolerance);
    check_op(reports, "mul", [b1](const Tensor& x) { return mul(x, b1); }, {4, 3}, rng, n,
             tolerance);
    check_op(reports, "scale", [](const Tensor& x) { return scale(x, -2.5); }, {6}, rng, n,
             tolerance);
    check_op(reports, "relu", [](const Tensor& x) { return relu(x); }, {5, 4}, rng, n, tolerance,
             /*margin=*/0.05);
    check_op(reports, "log", [](const Tensor& x) { return log(x); }, {3, 3}, rng, n, tolerance,
             0.0, 0.2, 3.0);
    check_op(reports, "exp", [](const Tensor& x) { return exp(x); }, {3, 3}, rng, n, tolerance);
  }

  // Reductions and structure.
  check_op(reports, "sum_axis", [](const Tensor& x) { return sum_axis(x, 1); }, {3, 4, 2}, rng, n,
           tolerance);
  check_op(reports, "mean_axis", [](const Tensor& x) { return mean_axis(x, 0); }, {4, 5}, rng, n,
           tolerance);
  check_op(reports, "sum_all", [](const Tensor& x) { return sum_all(x); }, {7}, rng, n, tolerance);
  check_op(reports, "mean_all", [](const Tensor& x) { return mean_all(x); }, {2, 3, 2}, rng, n,
           tolerance);
  check_op(reports, "transpose", [](const Tensor& x) { return transpose(x); }, {3, 5}, rng, n,
           tolerance);
  check_op(reports, "reshape", [](const Tensor& x) { return reshape(x, {6, 2}); }, {3, 4}, rng, n,
           tolerance);
  check_op(reports, "slice", [](const Tensor& x) { return slice(x, 1, 1, 2); }, {3, 4}, rng, n,
           tolerance);
  {
    Rng aux = Rng::derive(seed, kStreamGradSuite, 2);
    const Tensor other = random_tensor({2, 4}, aux);
    check_op(reports, "concat",
             [other](const Tensor& x) { return concat({x, other}, 0); }, {3, 4}, rng, n,
             tolerance);
  }

  // Linear algebra and axis nonlinearities.
  {
    Rng aux = Rng::derive(seed, kStreamGradSuite, 3);
    const Tensor rhs = random_tensor({4, 2}, aux);
    const Tensor lhs = random_tensor({3, 4}, aux);
    check_op(reports, "matmul_lhs", [rhs](const Tensor& x) { return matmul(x, rhs); }, {3, 4}, rng,
             n, tolerance);
    check_op(reports, "matmul_rhs", [lhs](const Tensor& x) { return matmul(lhs, x); }, {4, 2}, rng,
             n, tolerance);
  }
  check_op(reports, "softmax", [](const Tensor& x) { return softmax(x, 1); }, {3, 5}, rng, n,
           tolerance);
  check_op(reports, "softmax_axis0", [](const Tensor& x) { return softmax(x, 0); }, {4, 2}, rng, n,
           tolerance);
  check_op(reports, "log_softmax", [](const Tensor& x) { return log_softmax(x, 1); }, {3, 5}, rng,
           n, tolerance);
  check_op(reports, "l2_normalize", [](const Tensor& x) { return l2_normalize(x, 1, 1e-12); },
           {3, 4}, rng, n, tolerance, /*margin=*/0.05);

  // KL through softmax re-normalization keeps perturbed inputs on the
  // probability simplex during differencing.
  {
    Rng aux = Rng::derive(seed, kStreamGradSuite, 4);
    const Tensor p_fixed = softmax(random_tensor({4, 3}, aux), 1).detached();
    const Tensor q_fixed = softmax(random_tensor({4, 3}, aux), 1).detached();
    check_op(reports, "kl_divergence_q",
             [p_fixed](const Tensor& x) { return kl_divergence(p_fixed, softmax(x, 1), 1); },
             {4, 3}, rng, n, tolerance);
    check_op(reports, "kl_divergence_p",
             [q_fixed](const Tensor& x) { return kl_divergence(softmax(x, 1), q_fixed, 1); },
             {4, 3}, rng, n, tolerance);
  }

  // Network ops.
  {
    Rng aux = Rng::derive(seed, kStreamGradSuite, 5);
    const Tensor cw = random_tensor({3, 2, 3, 3}, aux);
    const Tensor cb = random_tensor({3}, aux);
    const Tensor cx = random_tensor({2, 2, 5, 5}, aux);
    check_op(reports, "conv2d_input",
             [cw, cb](const Tensor& x) { return conv2d(x, cw, cb, 2, 1); }, {2, 2, 5, 5}, rng, n,
             tolerance);
    check_op(reports, "conv2d_weight",
             [cx, cb](const Tensor& x) { return conv2d(cx, x, cb, 1, 1); }, {3, 2, 3, 3}, rng, n,
             tolerance);
    check_op(reports, "conv2d_bias",
             [cx, cw](const Tensor& x) { return conv2d(cx, cw, x, 1, 1); }, {3}, rng, n,
             tolerance);
    const Tensor pw = random_tensor({4, 3}, aux);
    const Tensor pf = random_tensor({2, 4, 2, 2}, aux);
    check_op(reports, "project_positions_features",
             [pw](const Tensor& x) { return project_positions(x, pw); }, {2, 4, 2, 2}, rng, n,
             tolerance);
    check_op(reports, "project_positions_weight",
             [pf](const Tensor& x) { return project_positions(pf, x); }, {4, 3}, rng, n,
             tolerance);
    check_op(reports, "pool_cells_scale",
             [](const Tensor& x) { return pool_cells_scale(x, 2); }, {2, 3, 4, 4}, rng, n,
             tolerance);
  }
  {
    Rng aux = Rng::derive(seed, kStreamGradSuite, 6);
    std::vector<std::size_t> labels = {aux.below(4), aux.below(4), aux.below(4)};
    for (std::size_t i = 0; i < inputs_per_shape; ++i) {
      const Tensor input = random_tensor({3, 4}, rng);
      reports.push_back(grad_check(
          "cross_entropy", [labels](const Tensor& x) { return cross_entropy(x, labels); }, input,
          tolerance));
    }
  }

  // Full objective: per student parameter and with respect to the logit map.
  {
    const ObjectiveFixture fx(seed);
    for (std::size_t i = 0; i < fx.student_params.size(); ++i) {
      auto fn = [&fx, i](const Tensor& x) {
        std::vector<Tensor> params = fx.student_params;
        params[i] = x;
        return fx.objective(params);
      };
      reports.push_back(
          grad_check("objective/" + fx.student_names[i], fn, fx.student_params[i], tolerance));
    }
    const Tensor map0 = fx.objective_of_map(Tensor::zeros({2, 3, 4, 4})).detached();  // warm call
    (void)map0;
    Rng aux = Rng::derive(seed, kStreamGradSuite, 10);
    const Tensor map_input = random_tensor({2, 3, 4, 4}, aux);
    reports.push_back(grad_check(
        "objective/student_logit_map",
        [&fx](const Tensor& x) { return fx.objective_of_map(x); }, map_input, tolerance));
  }

  return reports;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int run_train_teacher(const RunConfig& cfg, std::ostream& log) {
  ensure_dir(cfg.out_dir);
  const Dataset ds = load_dataset(cfg.dataset);
  const ChannelStats stats = resolve_stats(cfg, ds);
  const ConvNetSpec spec = ConvNetSpec::make(cfg.teacher_stages, ds.image_size, ds.num_classes);
  Rng init = Rng::derive(cfg.train.seed, kStreamTeacherInit);
  ConvNet net(spec, init);

  const TrainOutcome outcome = train_teacher(net, cfg.train, ds, stats, &log);

  const fs::path out(cfg.out_dir);
  save_checkpoint(out / "teacher.ckpt", net, run_meta(cfg, outcome, stats, "teacher"));
  write_metrics_csv(out / "metrics.csv", outcome.metrics);

  ordered_json summary;
  summary["command"] = "train-teacher";
  summary["seed"] = cfg.train.seed;
  summary.update(outcome_json(outcome));
  summary["normalization"] = stats_json(stats);
  summary["config"] = config_json(cfg);
  write_summary(out / "summary.json", summary);

  log << "teacher final test accuracy: " << format_double(outcome.final_test_acc) << "\n";
  return spot_check_outcome(outcome, log) ? 0 : 1;
}

int run_train_student(const RunConfig& cfg, std::ostream& log) {
  ensure_dir(cfg.out_dir);
  const Dataset ds = load_dataset(cfg.dataset);
  const LoadedNet teacher = load_net(cfg.teacher_ckpt, cfg, ds);
  const Method method = parse_method(cfg.method);

  const ConvNetSpec spec = ConvNetSpec::make(cfg.student_stages, ds.image_size, ds.num_classes);
  Rng init = Rng::derive(cfg.train.seed, kStreamStudentInit);
  ConvNet student(spec, init);

  const auto teacher_snapshot = snapshot_params(teacher.net);
  const TrainOutcome outcome =
      train_student(student, teacher.net, method, cfg.train, ds, teacher.stats, &log);
  const bool teacher_unchanged = params_equal(teacher.net, teacher_snapshot);

  const fs::path out(cfg.out_dir);
  auto meta = run_meta(cfg, outcome, teacher.stats, "student");
  meta["method"] = method_str(method);
  save_checkpoint(out / "student.ckpt", student, meta);
  write_metrics_csv(out / "metrics.csv", outcome.metrics);

  ordered_json summary;
  summary["command"] = "train-student";
  summary["method"] = method_str(method);
  summary["seed"] = cfg.train.seed;
  summary.update(outcome_json(outcome));
  summary["normalization"] = stats_json(teacher.stats);
  summary["spot_checks"] = {{"max_component_residual", outcome.max_component_residual},
                            {"teacher_unchanged", teacher_unchanged}};
  summary["config"] = config_json(cfg);
  write_summary(out / "summary.json", summary);

  log << "student (" << method_str(method)
      << ") final test accuracy: " << format_double(outcome.final_test_acc) << "\n";
  bool ok = spot_check_outcome(outcome, log);
  if (!teacher_unchanged) {
    log << "spot-check FAILED: teacher parameters changed during student training\n";
    ok = false;
  }
  return ok ? 0 : 1;
}

int run_eval(const RunConfig& cfg, std::ostream& log) {
  ensure_dir(cfg.out_dir);
  const Dataset ds = load_dataset(cfg.dataset);
  const std::string path = !cfg.student_ckpt.empty() ? cfg.student_ckpt : cfg.teacher_ckpt;
  const LoadedNet loaded = load_net(path, cfg, ds);
  const double acc =
      evaluate_accuracy(loaded.net, ds, Split::kTest, loaded.stats, cfg.train.batch_size);

  ordered_json summary;
  summary["command"] = "eval";
  summary["checkpoint"] = path;
  summary["test_accuracy"] = acc;
  summary["test_samples"] = ds.test_count();
  write_summary(fs::path(cfg.out_dir) / "eval.json", summary);
  log << "test accuracy: " << format_double(acc) << "\n";
  return 0;
}

int run_grad_check(const RunConfig& cfg, std::ostream& log) {
  ensure_dir(cfg.out_dir);
  const std::vector<GradCheckReport> reports = gradient_suite(cfg.train.seed, 3, 1e-4);
  std::ostringstream csv;
  csv << "op,max_abs_err,max_rel_err,tolerance,passed\n";
  bool all_passed = true;
  double worst = 0.0;
  std::string worst_op;
  for (const GradCheckReport& r : reports) {
    csv << r.op_name << ',' << format_double(r.max_abs_err) << ',' << format_double(r.max_rel_err)
        << ',' << format_double(r.tolerance) << ',' << (r.passed ? "true" : "false") << '\n';
    if (!r.passed) {
      all_passed = false;
      log << "FAIL " << r.op_name << "  max_rel_err " << format_double(r.max_rel_err)
          << (r.note.empty() ? "" : "  (" + r.note + ")") << "\n";
    }
    if (r.max_rel_err > worst) {
      worst = r.max_rel_err;
      worst_op = r.op_name;
    }
  }
  write_text_file(fs::path(cfg.out_dir) / "grad_check.csv", csv.str());
  log << reports.size() << " gradient checks, worst rel err " << format_double(worst) << " ("
      << worst_op << "), " << (all_passed ? "all passed" : "FAILURES") << "\n";
  return all_passed ? 0 : 1;
}

int run_gram_dump(const RunConfig& cfg, std::ostream& log) {
  ensure_dir(cfg.out_dir);
  const Dataset ds = load_dataset(cfg.dataset);
  const LoadedNet teacher = load_net(cfg.teacher_ckpt, cfg, ds);
  const LoadedNet student = load_net(cfg.student_ckpt, cfg, ds);
  if (teacher.net.spec().map_width != student.net.spec().map_width ||
      teacher.net.spec().num_classes != student.net.spec().num_classes) {
    throw ConfigError("gram-dump: teacher and student map width / class count must match");
  }

  BatchIterator it(ds, Split::kTest, cfg.train.batch_size, teacher.stats, 0, 0, false, false);
  const auto batch = it.next();
  if (!batch) throw ConfigError("gram-dump: empty test split");

  const ScaleSpec sspec(cfg.train.distill.scales, teacher.net.spec().map_width);
  const CellLogits t_cells = pool_cells(teacher.net.logit_map(batch->images), sspec);
  const CellLogits s_cells = pool_cells(student.net.logit_map(batch->images), sspec);
  const std::vector<GramPair> pairs = gram_pairs(t_cells, s_cells, cfg.train.distill);

  const fs::path path = fs::path(cfg.out_dir) / "gram_dump.bin";
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("gram-dump: cannot open " + path.string());
  write_gram_dump(os, pairs, cfg.train.distill.gram_mode);
  log << "wrote " << pairs.size() << " gram pairs to " << path.string() << "\n";
  return 0;
}

namespace {

/// Trains one student variant for the ablation tables.
TrainOutcome ablation_run(const RunConfig& cfg, const Dataset& ds, const LoadedNet& teacher,
                          const DistillConfig& distill, std::ostream& log) {
  RunConfig variant = cfg;
  variant.train.distill = distill;
  const ConvNetSpec spec =
      ConvNetSpec::make(variant.student_stages, ds.image_size, ds.num_classes);
  Rng init = Rng::derive(variant.train.seed, kStreamStudentInit);
  ConvNet student(spec, init);
  return train_student(student, teacher.net, Method::kIcd, variant.train, ds, teacher.stats,
                       &log);
}

}  // namespace

int run_ablate_scales(const RunConfig& cfg, std::ostream& log) {
  ensure_dir(cfg.out_dir);
  const Dataset ds = load_dataset(cfg.dataset);
  const LoadedNet teacher = load_net(cfg.teacher_ckpt, cfg, ds);

  const std::vector<std::vector<std::size_t>> scale_sets = {{1},    {2},    {4},      {1, 2},
                                                            {1, 4}, {2, 4}, {1, 2, 4}};
  std::ostringstream csv;
  csv << "scales,final_test_acc,best_test_acc,final_train_acc,final_loss_icd\n";
  for (const auto& scales : scale_sets) {
    DistillConfig distill = cfg.train.distill;
    distill.scales = scales;
    log << "ablate-scales: M={";
    for (std::size_t i = 0; i < scales.size(); ++i) log << (i ? "," : "") << scales[i];
    log << "}\n";
    const TrainOutcome outcome = ablation_run(cfg, ds, teacher, distill, log);
    std::string label;
    for (std::size_t i = 0; i < scales.size(); ++i) {
      if (i) label += ';';
      label += std::to_string(scales[i]);
    }
    csv << label << ',' << format_double(outcome.final_test_acc) << ','
        << format_double(outcome.best_test_acc) << ','
        << format_double(outcome.final_train_acc) << ','
        << format_double(outcome.metrics.epochs.back().loss_icd) << '\n';
  }
  write_text_file(fs::path(cfg.out_dir) / "ablate_scales.csv", csv.str());
  log << "wrote ablate_scales.csv\n";
  return 0;
}

int run_ablate_gamma(const RunConfig& cfg, std::ostream& log) {
  ensure_dir(cfg.out_dir);
  const Dataset ds = load_dataset(cfg.dataset);
  const LoadedNet teacher = load_net(cfg.teacher_ckpt, cfg, ds);

  std::ostringstream csv;
  csv << "gamma,final_test_acc,best_test_acc,final_train_acc,final_loss_icd\n";
  for (std::size_t g = 1; g <= 8; ++g) {
    DistillConfig distill = cfg.train.distill;
    distill.gamma = static_cast<double>(g);
    log << "ablate-gamma: gamma=" << g << "\n";
    const TrainOutcome outcome = ablation_run(cfg, ds, teacher, distill, log);
    csv << g << ',' << format_double(outcome.final_test_acc) << ','
        << format_double(outcome.best_test_acc) << ','
        << format_double(outcome.final_train_acc) << ','
        << format_double(outcome.metrics.epochs.back().loss_icd) << '\n';
  }
  write_text_file(fs::path(cfg.out_dir) / "ablate_gamma.csv", csv.str());
  log << "wrote ablate_gamma.csv\n";
  return 0;
}

int run_discrepancy(const RunConfig& cfg, std::ostream& log) {
  ensure_dir(cfg.out_dir);
  const Dataset ds = load_dataset(cfg.dataset);
  const LoadedNet teacher = load_net(cfg.teacher_ckpt, cfg, ds);
  const LoadedNet student = load_net(cfg.student_ckpt, cfg, ds);

  const DiscrepancyReport report = discrepancy(teacher.net, student.net, ds, teacher.stats,
                                               cfg.train.batch_size, cfg.train.distill);

  const std::size_t k = teacher.net.spec().num_classes;
  std::ostringstream csv;
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = 0; b < k; ++b) {
      if (b) csv << ',';
      csv << format_double(report.discrepancy.data()[a * k + b]);
    }
    csv << '\n';
  }
  write_text_file(fs::path(cfg.out_dir) / "discrepancy.csv", csv.str());

  ordered_json summary;
  summary["command"] = "discrepancy";
  summary["mean"] = report.mean_discrepancy;
  summary["per_scale"] = ordered_json::array();
  for (const auto& [m, value] : report.per_scale) {
    summary["per_scale"].push_back({{"m", m}, {"value", value}});
  }
  summary["teacher_constant_class"] = report.teacher_constant_class;
  summary["student_constant_class"] = report.student_constant_class;
  write_summary(fs::path(cfg.out_dir) / "discrepancy.json", summary);

  log << "mean correlation discrepancy: " << format_double(report.mean_discrepancy) << "\n";
  return 0;
}

}  // namespace icd
