#pragma once

#include <iosfwd>
#include <optional>

#include "icd/checkpoint.hpp"
#include "icd/data.hpp"
#include "icd/losses.hpp"

namespace icd {

enum class Method { kCeOnly, kKd, kSdd, kIcd };

const char* method_str(Method m);
Method parse_method(const std::string& text);

struct TrainConfig {
  std::size_t epochs = 240;
  std::size_t batch_size = 64;
  double lr = 0.05;
  std::vector<std::size_t> lr_decay_epochs{150, 180, 210};
  double lr_decay_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 1;
  double schedule_scale = 1.0;  // multiplies epochs and decay milestones
  bool augment = true;
  DistillConfig distill;

  void validate() const;
  std::size_t scaled_epochs() const;
  std::vector<std::size_t> scaled_milestones() const;
};

/// Base lr times decay_factor^(milestones passed); milestones and the epoch
/// count are both multiplied by schedule_scale.
double lr_at(std::size_t epoch, const TrainConfig& cfg);

struct SgdConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

/// Classic coupled-L2 momentum step:
///   v <- momentum * v + (grad + weight_decay * param)
///   param <- param - lr * v
/// Parameters are replaced with fresh leaves; a non-finite gradient aborts.
void sgd_step(std::vector<Parameter>& params, std::vector<std::vector<double>>& velocity,
              const SgdConfig& cfg);

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  double warmup = 0.0;
  double loss_total = 0.0;
  double loss_ce = 0.0;
  double loss_kd = 0.0;
  double loss_sdd = 0.0;
  double loss_icd = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double seconds = 0.0;  // reported on the console; kept out of result files
};

struct RunMetrics {
  std::vector<EpochMetrics> epochs;
};

struct TrainOutcome {
  RunMetrics metrics;
  double final_test_acc = 0.0;
  double best_test_acc = 0.0;
  double final_train_acc = 0.0;
  /// Largest |logged_total - recomputed_total| over all batches; an invariant
  /// spot-check surfaced through the CLI exit code.
  double max_component_residual = 0.0;
};

/// Top-1 accuracy on a split, evaluated in deterministic order on a frozen
/// copy of the network.
double evaluate_accuracy(const ConvNet& net, const Dataset& ds, Split split,
                         const ChannelStats& stats, std::size_t batch_size);

/// Label-supervision training (teacher recipe).
TrainOutcome train_teacher(ConvNet& net, const TrainConfig& cfg, const Dataset& ds,
                           const ChannelStats& stats, std::ostream* log = nullptr);

/// Student training against a frozen teacher. The teacher's class count and
/// map width must match the student's. Methods:
///   ce_only: L_CE
///   kd:      L_CE + kd_weight * KD
///   sdd:     L_CE + warmup * alpha * SDD
///   icd:     L_CE + warmup * (alpha * SDD + gamma * iCD)
TrainOutcome train_student(ConvNet& student, const ConvNet& teacher, Method method,
                           const TrainConfig& cfg, const Dataset& ds, const ChannelStats& stats,
                           std::ostream* log = nullptr);

}  // namespace icd
