#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "kdreid/errors.hpp"
#include "kdreid/evaluation.hpp"
#include "kdreid/losses.hpp"
#include "kdreid/model.hpp"
#include "kdreid/sampling.hpp"
#include "kdreid/scenario.hpp"
#include "kdreid/synth.hpp"
#include "kdreid/tape.hpp"

namespace kdreid {

/// lr0 / decay_factor^floor(epoch / decay_every)
inline double learning_rate(std::size_t epoch, const TrainConfig& config) {
  return config.lr0 / std::pow(config.lr_decay_factor, static_cast<double>(epoch / config.lr_decay_every));
}

/// Independent, platform-stable rng seed for a named stream.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index = 0) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  auto mix = [](std::uint64_t z) {  // splitmix64 finalizer
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(base ^ h) ^ mix(index));
}

/// Plain SGD, optional heavy-ball momentum.
class SgdOptimizer {
 public:
  explicit SgdOptimizer(double momentum = 0.0) : momentum_(momentum) {}

  void step(BackboneModel& model, double lr) {
    auto params = model.parameters();
    if (velocity_.size() != params.size()) velocity_.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto v = p.values();
      if (momentum_ == 0.0) {
        for (std::size_t k = 0; k < v.size(); ++k) v[k] -= lr * g[k];
      } else {
        auto& vel = velocity_[i];
        if (vel.size() != v.size()) vel.assign(v.size(), 0.0);
        for (std::size_t k = 0; k < v.size(); ++k) {
          vel[k] = momentum_ * vel[k] + g[k];
          v[k] -= lr * vel[k];
        }
      }
    }
  }

 private:
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

// ---------------------------------------------------------------------------
// Single-target domain adaptation methods.

/// Inputs of one STDA step: the model being adapted, its source and target
/// batches, and their embeddings already recorded on the tape.
struct StdaStep {
  BackboneModel& model;
  const Batch& source;
  const Batch& target;
  Var source_embedding;
  Var target_embedding;
};

/// A pluggable STDA method: returns the adaptation loss to minimize. It must
/// not read target identities (the batch enforces this).
struct StdaMethod {
  std::string name;
  std::function<Var(Tape&, const StdaStep&)> adapt_step;
};

inline StdaMethod mmd_method() {
  return {"mmd", [](Tape&, const StdaStep& s) {
            // Aligned on the unit sphere so the loss cannot be lowered by shrinking the features.
            const Var src = l2_normalize_rows(s.source_embedding, kNormEpsilon);
            const Var tgt = l2_normalize_rows(s.target_embedding, kNormEpsilon);
            const auto bw = median_bandwidths(src.value(), tgt.value(), default_bandwidth_multipliers());
            return mmd_loss(src, tgt, bw);
          }};
}

/// No adaptation term; only the supervised source loss acts.
inline StdaMethod identity_method() {
  return {"identity", [](Tape& t, const StdaStep&) { return t.constant(Tensor(1, 1, 0.0)); }};
}

inline std::vector<std::string> stda_method_names() { return {"mmd", "identity"}; }

inline StdaMethod stda_method(const std::string& name) {
  if (name == "mmd") return mmd_method();
  if (name == "identity") return identity_method();
  throw ConfigError("unknown STDA method '" + name + "'");
}

// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<int> class_indices(const std::vector<int>& identities, const std::map<int, int>& classes) {
  std::vector<int> out;
  out.reserve(identities.size());
  for (int id : identities) out.push_back(classes.at(id));
  return out;
}

}  // namespace detail

struct PretrainLog {
  std::vector<double> epoch_loss;
};

/// Cross-entropy through a temporary classifier head plus batch-hard triplet
/// on the embedding, over PK batches of the labeled source. The classifier is
/// removed on return.
inline PretrainLog pretrain_supervised(BackboneModel& model, const DomainDataset& source, const TrainConfig& config,
                                       std::uint64_t seed) {
  if (!source.labeled()) throw ContractError("pretrain_supervised: '" + source.domain_id() + "' is unlabeled");
  config.validate("pretrain");
  PretrainLog log;
  if (config.max_epochs == 0) return log;
  std::mt19937_64 rng(seed);
  std::map<int, int> classes;
  for (int id : source.identities()) classes.emplace(id, 0);
  int next = 0;
  for (auto& [id, c] : classes) c = next++;
  model.attach_classifier(classes.size(), rng);
  PkSampler sampler(source, config.batch_p, config.batch_k);
  SgdOptimizer opt(config.momentum);
  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    const double lr = learning_rate(epoch, config);
    double total = 0.0;
    const std::size_t steps = std::max<std::size_t>(1, sampler.batches_per_epoch());
    for (std::size_t s = 0; s < steps; ++s) {
      const Batch batch = sampler.next(rng);
      const auto labels = detail::class_indices(batch.identities(), classes);
      Tape tape;
      const auto out = model.forward(tape, batch.inputs());
      const Var loss = add(cross_entropy_loss(*out.logits, labels),
                           batch_hard_triplet(out.embedding, batch.identities(), config.margin));
      tape.backward(loss);
      opt.step(model, lr);
      total += loss.scalar();
    }
    log.epoch_loss.push_back(total / static_cast<double>(steps));
  }
  model.detach_classifier();
  return log;
}

struct StdaLog {
  std::vector<double> epoch_adapt_loss;
  std::vector<double> epoch_grad_norm;  // mean L2 norm of the full gradient
};

/// Adapts `model` from `source` to unlabeled `target` with 32 + 32 paired
/// batches, minimizing method loss + source_weight * batch-hard triplet on the
/// source half. Stops at max_epochs, or once the epoch-mean adaptation loss has
/// not improved by 1% of its best value for stop_window epochs.
inline StdaLog stda_adapt(BackboneModel& model, const DomainDataset& source, const DomainDataset& target,
                          const StdaMethod& method, const TrainConfig& config, std::uint64_t seed) {
  if (!source.labeled()) throw ContractError("stda_adapt: source '" + source.domain_id() + "' must be labeled");
  if (target.labeled()) throw ContractError("stda_adapt: target '" + target.domain_id() + "' must be unlabeled");
  config.validate("stda");
  std::mt19937_64 rng(seed);
  PkSampler src_sampler(source, kPairedGroups, kTrackletSize);
  PkSampler tgt_sampler(target, kPairedGroups, kTrackletSize);
  SgdOptimizer opt(config.momentum);
  StdaLog log;
  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    const double lr = learning_rate(epoch, config);
    const std::size_t steps = std::max<std::size_t>(1, tgt_sampler.batches_per_epoch());
    double adapt_total = 0.0, grad_total = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      const Batch bs = src_sampler.next(rng);
      const Batch bt = tgt_sampler.next(rng);
      Tape tape;
      const Var es = model.forward(tape, bs.inputs()).embedding;
      const Var et = model.forward(tape, bt.inputs()).embedding;
      const Var adapt = method.adapt_step(tape, StdaStep{model, bs, bt, es, et});
      Var loss = adapt;
      if (config.source_weight > 0.0) {
        loss = add(loss, scale(batch_hard_triplet(es, bs.identities(), config.margin), config.source_weight));
      }
      tape.backward(loss);
      double g2 = 0.0;
      for (const Tensor* p : model.parameters())
        for (double g : p->grad()) g2 += g * g;
      grad_total += std::sqrt(g2);
      opt.step(model, lr);
      adapt_total += adapt.scalar();
    }
    const double mean = adapt_total / static_cast<double>(steps);
    log.epoch_adapt_loss.push_back(mean);
    log.epoch_grad_norm.push_back(grad_total / static_cast<double>(steps));
    if (mean < best - 0.01 * std::abs(best) || !std::isfinite(best)) {
      best = mean;
      stale = 0;
    } else if (++stale >= config.stop_window) {
      break;
    }
  }
  return log;
}

// ---------------------------------------------------------------------------
// Multi-teacher distillation.

struct KdTeacher {
  const BackboneModel* model;
  const DomainDataset* target;  // unlabeled adaptation data of this teacher
};

struct KdLog {
  std::vector<std::vector<std::size_t>> epoch_orders;  // target order per epoch
  std::vector<double> validation_map;  // entry 0: before distillation
  std::vector<double> epoch_loss;
  std::size_t best_epoch = 0;  // 0 means the initial student was kept
};

struct KdOutcome {
  BackboneModel student;
  KdLog log;
};

/// Random order of the T targets for one epoch.
inline std::vector<std::size_t> epoch_target_order(std::size_t targets, std::mt19937_64& rng) {
  std::vector<std::size_t> order(targets);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

/// One distillation update on a target batch. The teacher is only run
/// forward, outside the tape.
inline double kd_step(BackboneModel& student, const BackboneModel& teacher, const Batch& batch, SgdOptimizer& opt,
                      double lr) {
  const Tensor teacher_feats = teacher.embed(batch.inputs());
  Tape tape;
  const Var loss = kd_similarity_loss(student.forward(tape, batch.inputs()).embedding, teacher_feats);
  tape.backward(loss);
  opt.step(student, lr);
  return loss.scalar();
}

inline double average_map(const BackboneModel& model, std::span<const QueryGallerySplit> splits) {
  double s = 0.0;
  for (const auto& split : splits) s += evaluate(model, split).mAP;
  return s / static_cast<double>(splits.size());
}

/// Distills each target's frozen teacher into the student with the
/// self-similarity loss on target-only batches (P=16, K=4 by default). The
/// target order is reshuffled every epoch. Training stops once the average
/// validation mAP has improved by less than stop_delta points for stop_window
/// consecutive epochs, or at max_epochs; the best-scoring student is returned.
///
/// When `source` is given and kd_source_supervision is set, a batch-hard
/// triplet term on a source batch is added to every step.
inline KdOutcome kd_distill(const BackboneModel& initial, std::span<const KdTeacher> teachers, const TrainConfig& config,
                            std::span<const QueryGallerySplit> validation, std::uint64_t seed,
                            const DomainDataset* source = nullptr) {
  if (teachers.empty()) throw ConfigError("kd_distill: no teachers");
  if (validation.size() != teachers.size()) throw ConfigError("kd_distill: one validation split per target required");
  config.validate("kd");
  for (const auto& t : teachers) {
    if (t.target->labeled()) throw ContractError("kd_distill: target '" + t.target->domain_id() + "' must be unlabeled");
  }
  std::mt19937_64 rng(seed);
  std::vector<PkSampler> samplers;
  for (const auto& t : teachers) samplers.emplace_back(*t.target, config.batch_p, config.batch_k);
  std::optional<PkSampler> src_sampler;
  if (config.kd_source_supervision && source != nullptr) src_sampler.emplace(*source, kPairedGroups, kTrackletSize);

  KdOutcome out{initial, {}};
  BackboneModel student = initial;
  SgdOptimizer opt(config.momentum);
  double best = average_map(student, validation);
  out.log.validation_map.push_back(best);
  const double delta = config.stop_delta / 100.0;
  std::size_t stale = 0;
  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    const double lr = learning_rate(epoch, config);
    const auto order = epoch_target_order(teachers.size(), rng);
    out.log.epoch_orders.push_back(order);
    double total = 0.0;
    std::size_t steps = 0;
    for (std::size_t i : order) {
      const std::size_t n = std::max<std::size_t>(1, samplers[i].batches_per_epoch());
      for (std::size_t b = 0; b < n; ++b) {
        const Batch bt = samplers[i].next(rng);
        if (src_sampler) {
          const Batch bs = src_sampler->next(rng);
          const Tensor teacher_feats = teachers[i].model->embed(bt.inputs());
          Tape tape;
          const Var kd = kd_similarity_loss(student.forward(tape, bt.inputs()).embedding, teacher_feats);
          const Var sup = batch_hard_triplet(student.forward(tape, bs.inputs()).embedding, bs.identities(),
                                             config.margin);
          const Var loss = add(kd, scale(sup, config.source_weight));
          tape.backward(loss);
          opt.step(student, lr);
          total += kd.scalar();
        } else {
          total += kd_step(student, *teachers[i].model, bt, opt, lr);
        }
        ++steps;
      }
    }
    out.log.epoch_loss.push_back(total / static_cast<double>(steps));
    const double score = average_map(student, validation);
    out.log.validation_map.push_back(score);
    stale = score - best < delta ? stale + 1 : 0;
    if (score > best) {
      best = score;
      out.student = student;
      out.log.best_epoch = epoch + 1;
    }
    if (stale >= config.stop_window) break;
  }
  return out;
}

}  // namespace kdreid
