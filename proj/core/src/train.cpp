#include "icd/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>

namespace icd {

const char* method_str(Method m) {
  switch (m) {
    case Method::kCeOnly: return "ce_only";
    case Method::kKd: return "kd";
    case Method::kSdd: return "sdd";
    case Method::kIcd: return "icd";
  }
  return "?";
}

Method parse_method(const std::string& text) {
  if (text == "ce" || text == "ce_only") return Method::kCeOnly;
  if (text == "kd") return Method::kKd;
  if (text == "sdd") return Method::kSdd;
  if (text == "icd") return Method::kIcd;
  throw ConfigError("unknown method '" + text + "' (expected ce, kd, sdd or icd)");
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("TrainConfig: epochs must be positive");
  if (batch_size == 0) throw ConfigError("TrainConfig: batch size must be positive");
  if (lr <= 0.0) throw ConfigError("TrainConfig: lr must be positive");
  if (lr_decay_factor <= 0.0) throw ConfigError("TrainConfig: lr decay factor must be positive");
  if (momentum < 0.0) throw ConfigError("TrainConfig: momentum must be non-negative");
  if (weight_decay < 0.0) throw ConfigError("TrainConfig: weight decay must be non-negative");
  if (schedule_scale <= 0.0) throw ConfigError("TrainConfig: schedule scale must be positive");
  for (std::size_t i = 1; i < lr_decay_epochs.size(); ++i) {
    if (lr_decay_epochs[i] <= lr_decay_epochs[i - 1]) {
      throw ConfigError("TrainConfig: decay epochs must be strictly increasing");
    }
  }
  const auto milestones = scaled_milestones();
  for (std::size_t m : milestones) {
    if (m >= scaled_epochs()) {
      throw ConfigError("TrainConfig: scaled decay epoch " + std::to_string(m) +
                        " is not below the scaled epoch count " +
                        std::to_string(scaled_epochs()));
    }
  }
  distill.validate();
}

std::size_t TrainConfig::scaled_epochs() const {
  const auto scaled = std::llround(static_cast<double>(epochs) * schedule_scale);
  return scaled < 1 ? 1 : static_cast<std::size_t>(scaled);
}

std::vector<std::size_t> TrainConfig::scaled_milestones() const {
  std::vector<std::size_t> out;
  out.reserve(lr_decay_epochs.size());
  for (std::size_t m : lr_decay_epochs) {
    out.push_back(static_cast<std::size_t>(
        std::llround(static_cast<double>(m) * schedule_scale)));
  }
  return out;
}

double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  double lr = cfg.lr;
  for (std::size_t m : cfg.scaled_milestones()) {
    if (epoch >= m) lr *= cfg.lr_decay_factor;
  }
  return lr;
}

void sgd_step(std::vector<Parameter>& params, std::vector<std::vector<double>>& velocity,
              const SgdConfig& cfg) {
  if (velocity.empty()) velocity.resize(params.size());
  if (velocity.size() != params.size()) {
    throw ShapeError("sgd_step: velocity count " + std::to_string(velocity.size()) +
                     " != parameter count " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    const std::size_t n = p.value.size();
    auto& v = velocity[i];
    if (v.empty()) v.assign(n, 0.0);
    if (v.size() != n) throw ShapeError("sgd_step: velocity shape mismatch for " + p.name);

    static const std::vector<double> kNoGrad;
    const std::span<const double> g = p.value.has_grad() ? p.value.grad()
                                                         : std::span<const double>(kNoGrad);
    if (!g.empty() && !all_finite(g)) {
      throw DivergenceError("sgd_step: non-finite gradient for " + p.name);
    }
    const auto pv = p.value.data();
    std::vector<double> next(n);
    for (std::size_t j = 0; j < n; ++j) {
      const double grad = (g.empty() ? 0.0 : g[j]) + cfg.weight_decay * pv[j];
      v[j] = cfg.momentum * v[j] + grad;
      next[j] = pv[j] - cfg.lr * v[j];
    }
    p.value = Tensor::from_data(p.value.shape(), std::move(next), true);
  }
}

namespace {

ConvNet frozen_copy(const ConvNet& net) {
  std::vector<std::pair<std::string, Tensor>> tensors;
  tensors.reserve(net.params().size());
  for (const Parameter& p : net.params()) tensors.emplace_back(p.name, p.value);
  return ConvNet(net.spec(), tensors, false);
}

std::size_t argmax_row(const double* row, std::size_t k) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < k; ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

/// Teacher logit maps for training batches. When augmentation is off, every
/// epoch sees the same normalized images, so the maps are computed once per
/// sample and gathered per batch; the gather is bit-identical to a fresh
/// forward because the forward treats batch elements independently.
class TeacherMaps {
 public:
  TeacherMaps(const ConvNet& teacher, const Dataset& ds, const ChannelStats& stats,
              std::size_t batch_size, bool cacheable)
      : teacher_(teacher),
        classes_(teacher.spec().num_classes),
        width_(teacher.spec().map_width) {
    if (!cacheable) return;
    const std::size_t per = classes_ * width_ * width_;
    cached_.resize(ds.train_count() * per);
    BatchIterator it(ds, Split::kTrain, batch_size, stats, /*seed=*/0, /*epoch=*/0,
                     /*shuffle=*/false, /*augment=*/false);
    while (auto batch = it.next()) {
      const Tensor map = teacher_.logit_map(batch->images).values;
      const auto mv = map.data();
      for (std::size_t i = 0; i < batch->indices.size(); ++i) {
        std::copy(mv.begin() + static_cast<std::ptrdiff_t>(i * per),
                  mv.begin() + static_cast<std::ptrdiff_t>((i + 1) * per),
                  cached_.begin() + static_cast<std::ptrdiff_t>(batch->indices[i] * per));
      }
    }
    have_cache_ = true;
  }

  LogitMap map_for(const Batch& batch) const {
    if (!have_cache_) return teacher_.logit_map(batch.images);
    const std::size_t per = classes_ * width_ * width_;
    std::vector<double> data(batch.indices.size() * per);
    for (std::size_t i = 0; i < batch.indices.size(); ++i) {
      std::copy(cached_.begin() + static_cast<std::ptrdiff_t>(batch.indices[i] * per),
                cached_.begin() + static_cast<std::ptrdiff_t>((batch.indices[i] + 1) * per),
                data.begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    return LogitMap(
        Tensor::from_data({batch.indices.size(), classes_, width_, width_}, std::move(data)));
  }

 private:
  const ConvNet& teacher_;
  std::size_t classes_;
  std::size_t width_;
  std::vector<double> cached_;
  bool have_cache_ = false;
};

TrainOutcome train_loop(ConvNet& net, const ConvNet* teacher, Method method,
                        const TrainConfig& cfg, const Dataset& ds, const ChannelStats& stats,
                        std::ostream* log) {
  cfg.validate();
  if (!net.trainable()) throw ConfigError("train: network is not trainable");
  const DistillConfig& dc = cfg.distill;

  std::optional<ConvNet> frozen_teacher;
  std::optional<ScaleSpec> scale_spec;
  std::optional<TeacherMaps> teacher_maps;
  if (method != Method::kCeOnly) {
    if (!teacher) throw ConfigError("train: method requires a teacher checkpoint");
    if (teacher->spec().num_classes != net.spec().num_classes ||
        teacher->spec().map_width != net.spec().map_width) {
      throw ConfigError("train: teacher (K=" + std::to_string(teacher->spec().num_classes) +
                        ", w=" + std::to_string(teacher->spec().map_width) +
                        ") does not pair with student (K=" +
                        std::to_string(net.spec().num_classes) +
                        ", w=" + std::to_string(net.spec().map_width) + ")");
    }
    frozen_teacher.emplace(frozen_copy(*teacher));
    if (method == Method::kSdd || method == Method::kIcd) {
      scale_spec.emplace(dc.scales, net.spec().map_width);
    }
  }

  const std::size_t epochs = cfg.scaled_epochs();
  std::vector<std::vector<double>> velocity;
  TrainOutcome outcome;
  outcome.metrics.epochs.reserve(epochs);

  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at(epoch, cfg);
    const double warm = warmup_factor(epoch, dc.warmup_epochs);
    const SgdConfig sgd{lr, cfg.momentum, cfg.weight_decay};

    const double w_kd = method == Method::kKd ? dc.kd_weight : 0.0;
    const double w_sdd =
        (method == Method::kSdd || method == Method::kIcd) ? warm * dc.alpha : 0.0;
    const double w_icd = method == Method::kIcd ? warm * dc.gamma : 0.0;
    const bool use_teacher = w_kd > 0.0 || w_sdd > 0.0 || w_icd > 0.0;
    if (use_teacher && !teacher_maps) {
      teacher_maps.emplace(*frozen_teacher, ds, stats, cfg.batch_size, !cfg.augment);
    }

    double sum_total = 0.0, sum_ce = 0.0, sum_kd = 0.0, sum_sdd = 0.0, sum_icd = 0.0;
    std::size_t correct = 0, seen = 0, batch_index = 0;

    BatchIterator it(ds, Split::kTrain, cfg.batch_size, stats, cfg.seed, epoch,
                     /*shuffle=*/true, cfg.augment);
    while (auto batch = it.next()) {
      const std::size_t b = batch->labels.size();
      const LogitMap smap = net.logit_map(batch->images);
      const Tensor logits = global_logits(smap);
      const Tensor ce = cross_entropy(logits, batch->labels);

      Tensor total = ce;
      double kd_v = 0.0, sdd_v = 0.0, icd_v = 0.0;
      if (use_teacher) {
        const LogitMap tmap = teacher_maps->map_for(*batch);
        if (w_kd > 0.0) {
          const Tensor kd = kd_loss(tmap, smap, dc.temperature, dc.tau_squared);
          kd_v = kd.item();
          total = add(total, scale(kd, w_kd));
        }
        if (w_sdd > 0.0 || w_icd > 0.0) {
          const CellLogits t_cells = pool_cells(tmap, *scale_spec);
          const CellLogits s_cells = pool_cells(smap, *scale_spec);
          if (w_sdd > 0.0) {
            const Tensor sdd = sdd_loss(t_cells, s_cells, dc);
            sdd_v = sdd.item();
            total = add(total, scale(sdd, w_sdd));
          }
          if (w_icd > 0.0) {
            const Tensor icd = icd_loss(t_cells, s_cells, dc);
            icd_v = icd.item();
            total = add(total, scale(icd, w_icd));
          }
        }
      }

      const double total_v = total.item();
      const double ce_v = ce.item();
      if (!std::isfinite(total_v)) {
        throw DivergenceError("train: non-finite loss at epoch " + std::to_string(epoch) +
                              ", batch " + std::to_string(batch_index));
      }
      const double recomputed = ce_v + w_kd * kd_v + w_sdd * sdd_v + w_icd * icd_v;
      outcome.max_component_residual =
          std::max(outcome.max_component_residual, std::abs(total_v - recomputed));

      total.backward();
      sgd_step(net.params(), velocity, sgd);

      const auto lv = logits.data();
      for (std::size_t i = 0; i < b; ++i) {
        if (argmax_row(lv.data() + i * net.spec().num_classes, net.spec().num_classes) ==
            batch->labels[i]) {
          ++correct;
        }
      }
      const double bw = static_cast<double>(b);
      sum_total += total_v * bw;
      sum_ce += ce_v * bw;
      sum_kd += kd_v * bw;
      sum_sdd += sdd_v * bw;
      sum_icd += icd_v * bw;
      seen += b;
      ++batch_index;
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.lr = lr;
    em.warmup = warm;
    const double inv_seen = 1.0 / static_cast<double>(seen);
    em.loss_total = sum_total * inv_seen;
    em.loss_ce = sum_ce * inv_seen;
    em.loss_kd = sum_kd * inv_seen;
    em.loss_sdd = sum_sdd * inv_seen;
    em.loss_icd = sum_icd * inv_seen;
    em.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    em.test_acc = evaluate_accuracy(net, ds, Split::kTest, stats, cfg.batch_size);
    em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    outcome.metrics.epochs.push_back(em);

    outcome.final_test_acc = em.test_acc;
    outcome.final_train_acc = em.train_acc;
    outcome.best_test_acc = std::max(outcome.best_test_acc, em.test_acc);

    if (log) {
      char line[256];
      std::snprintf(line, sizeof(line),
                    "epoch %3zu  lr %.5g  warm %.3f  loss %.5f (ce %.5f kd %.5f sdd %.5f icd "
                    "%.5f)  train %.4f  test %.4f  %.1fs",
                    epoch, lr, warm, em.loss_total, em.loss_ce, em.loss_kd, em.loss_sdd,
                    em.loss_icd, em.train_acc, em.test_acc, em.seconds);
      (*log) << line << '\n';
    }
  }
  return outcome;
}

}  // namespace

double evaluate_accuracy(const ConvNet& net, const Dataset& ds, Split split,
                         const ChannelStats& stats, std::size_t batch_size) {
  const ConvNet frozen = frozen_copy(net);
  const std::size_t k = net.spec().num_classes;
  std::size_t correct = 0, seen = 0;
  BatchIterator it(ds, split, batch_size, stats, /*seed=*/0, /*epoch=*/0, /*shuffle=*/false,
                   /*augment=*/false);
  while (auto batch = it.next()) {
    const Tensor logits = global_logits(frozen.logit_map(batch->images));
    const auto lv = logits.data();
    for (std::size_t i = 0; i < batch->labels.size(); ++i) {
      if (argmax_row(lv.data() + i * k, k) == batch->labels[i]) ++correct;
    }
    seen += batch->labels.size();
  }
  return static_cast<double>(correct) / static_cast<double>(seen);
}

TrainOutcome train_teacher(ConvNet& net, const TrainConfig& cfg, const Dataset& ds,
                           const ChannelStats& stats, std::ostream* log) {
  return train_loop(net, nullptr, Method::kCeOnly, cfg, ds, stats, log);
}

TrainOutcome train_student(ConvNet& student, const ConvNet& teacher, Method method,
                           const TrainConfig& cfg, const Dataset& ds, const ChannelStats& stats,
                           std::ostream* log) {
  return train_loop(student, &teacher, method, cfg, ds, stats, log);
}

}  // namespace icd
