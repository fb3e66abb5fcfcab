#pragma once

#include <cstdio>
#include <future>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "kdreid/adaptation.hpp"
#include "kdreid/evaluation.hpp"
#include "kdreid/model.hpp"
#include "kdreid/scenario.hpp"
#include "kdreid/synth.hpp"

namespace kdreid {

/// Executes the rows of an ExperimentConfig. Datasets, teachers and
/// source-pretrained students are built lazily and shared between rows and
/// widths, so a sweep trains each teacher once.
///
/// Every stochastic stage draws from its own stream derived from the scenario
/// seed and the stage name, which makes the results independent of row order
/// and of whether teachers are adapted in parallel.
class MtdaRunner {
 public:
  struct TargetData {
    DomainDataset train;  // unlabeled
    QueryGallerySplit validation;  // carved from train identities
    QueryGallerySplit test;  // held-out identities
  };

  explicit MtdaRunner(ExperimentConfig config) : cfg_(std::move(config)) { validate(); }

  const ExperimentConfig& config() const { return cfg_; }

  const DomainDataset& source() {
    if (!source_) source_ = generate_domain(cfg_.source);
    return *source_;
  }

  const std::vector<TargetData>& targets() {
    if (targets_.empty()) {
      for (std::size_t i = 0; i < cfg_.targets.size(); ++i) {
        const auto& spec = cfg_.targets[i].spec;
        const DomainDataset full = generate_domain(spec);
        auto parts = partition_identities(full, cfg_.test_fraction, derive_seed(cfg_.seed, "partition", i));
        DomainDataset train = parts.train.without_labels();
        DomainDataset test = parts.test.without_labels();
        auto val = split_query_gallery(train, cfg_.query_fraction, derive_seed(cfg_.seed, "validation", i));
        auto tst = split_query_gallery(test, cfg_.query_fraction, derive_seed(cfg_.seed, "test", i));
        targets_.push_back({std::move(train), std::move(val), std::move(tst)});
      }
    }
    return targets_;
  }

  Architecture architecture(double width) const {
    return Architecture{cfg_.source.input_dim, cfg_.hidden, cfg_.embed_dim}.scaled(width);
  }

  /// Teacher backbone after supervised source pre-training (shared by all
  /// targets before adaptation).
  const BackboneModel& pretrained_teacher() {
    if (!teacher_base_) {
      std::mt19937_64 init(derive_seed(cfg_.seed, "teacher-init"));
      BackboneModel m = BackboneModel::create(architecture(cfg_.teacher_width), ModelRole::Teacher, "",
                                              cfg_.teacher_width, init);
      pretrain_supervised(m, source(), cfg_.pretrain, derive_seed(cfg_.seed, "teacher-pretrain"));
      teacher_base_ = std::move(m);
    }
    return *teacher_base_;
  }

  /// Teacher of target i adapted with `method`.
  const BackboneModel& teacher(std::size_t i, const std::string& method) {
    ensure_teachers({{i, method}});
    return teachers_.at({i, method});
  }

  const BackboneModel& pretrained_student(double width) {
    auto it = students_.find(width);
    if (it == students_.end()) {
      std::mt19937_64 init(derive_seed(cfg_.seed, "student-init", width_key(width)));
      BackboneModel m = BackboneModel::create(architecture(width), ModelRole::Student, "", width, init);
      pretrain_supervised(m, source(), cfg_.pretrain, derive_seed(cfg_.seed, "student-pretrain", width_key(width)));
      it = students_.emplace(width, std::move(m)).first;
    }
    return it->second;
  }

  /// Target index -> method with the best validation mAP among the mixed
  /// candidates (first candidate wins ties).
  std::vector<std::string> mixed_selection() {
    std::vector<std::pair<std::size_t, std::string>> needed;
    for (std::size_t i = 0; i < cfg_.targets.size(); ++i)
      for (const auto& m : cfg_.mixed_candidates) needed.emplace_back(i, m);
    ensure_teachers(needed);
    std::vector<std::string> pick;
    for (std::size_t i = 0; i < cfg_.targets.size(); ++i) {
      double best = -1.0;
      std::string chosen;
      for (const auto& m : cfg_.mixed_candidates) {
        const double s = evaluate(teachers_.at({i, m}), targets()[i].validation).mAP;
        if (s > best) {
          best = s;
          chosen = m;
        }
      }
      pick.push_back(chosen);
    }
    return pick;
  }

  /// Every configured row for one student width.
  ResultsTable run_width(double width) { return run_width(width, cfg_.rows); }

  /// Same, for an explicit row list; teachers and students already trained are reused.
  ResultsTable run_width(double width, std::span<const RowKind> rows) {
    ResultsTable table;
    table.scenario_id = cfg_.scenario_id;
    table.width_scale = width;
    for (const auto& t : cfg_.targets) table.target_ids.push_back(t.spec.domain_id);
    for (RowKind r : rows) table.rows.push_back(run_row(r, width));
    return table;
  }

  /// Models produced by the last run_row calls, keyed by artifact name.
  const std::map<std::string, BackboneModel>& trained_models() const { return trained_; }

 private:
  static std::uint64_t width_key(double width) { return static_cast<std::uint64_t>(std::llround(width * 1e6)); }

  static std::string width_tag(double width) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "w%g", width);
    return buf;
  }

  void validate() const {
    if (cfg_.targets.empty()) throw ConfigError("experiment: at least one target required");
    for (const auto& t : cfg_.targets) {
      stda_method(t.method);
      if (t.spec.input_dim != cfg_.source.input_dim) {
        throw ConfigError("experiment: target '" + t.spec.domain_id + "' input_dim differs from source");
      }
    }
    stda_method(cfg_.effective_blend_method());
    if (cfg_.mixed_candidates.empty()) throw ConfigError("experiment: mixed_candidates is empty");
    for (const auto& m : cfg_.mixed_candidates) stda_method(m);
    for (double w : cfg_.widths)
      if (!(w > 0.0)) throw ConfigError("experiment: width scales must be positive");
    if (!(cfg_.teacher_width > 0.0)) throw ConfigError("experiment: teacher_width must be positive");
    if (cfg_.embed_dim == 0) throw ConfigError("experiment: embed_dim must be positive");
  }

  void ensure_teachers(const std::vector<std::pair<std::size_t, std::string>>& wanted) {
    std::vector<std::pair<std::size_t, std::string>> todo;
    for (const auto& key : wanted)
      if (!teachers_.count(key) && std::find(todo.begin(), todo.end(), key) == todo.end()) todo.push_back(key);
    if (todo.empty()) return;
    const BackboneModel& base = pretrained_teacher();
    const DomainDataset& src = source();
    const auto& tgts = targets();
    auto adapt = [&](const std::pair<std::size_t, std::string>& key) {
      BackboneModel m = base;
      m.set_role(ModelRole::Teacher, cfg_.targets[key.first].spec.domain_id);
      stda_adapt(m, src, tgts[key.first].train, stda_method(key.second), cfg_.stda,
                 derive_seed(cfg_.seed, "stda-" + key.second, key.first));
      return m;
    };
    if (cfg_.parallel_teachers && todo.size() > 1) {
      std::vector<std::future<BackboneModel>> jobs;
      for (const auto& key : todo) jobs.push_back(std::async(std::launch::async, adapt, key));
      for (std::size_t j = 0; j < todo.size(); ++j) teachers_.emplace(todo[j], jobs[j].get());
    } else {
      for (const auto& key : todo) teachers_.emplace(key, adapt(key));
    }
  }

  std::vector<Metrics> evaluate_on_targets(const BackboneModel& m) {
    std::vector<Metrics> out;
    for (const auto& t : targets()) out.push_back(evaluate(m, t.test));
    return out;
  }

  ResultRow make_row(RowKind kind, std::vector<Metrics> metrics, ComplexityReport complexity, std::size_t count = 1,
                     std::vector<std::string> methods = {}) {
    ResultRow row;
    row.name = std::string(row_name(kind));
    row.per_target = std::move(metrics);
    for (const auto& m : row.per_target) {
      row.avg_map += m.mAP;
      row.avg_rank1 += m.rank1();
    }
    row.avg_map /= static_cast<double>(row.per_target.size());
    row.avg_rank1 /= static_cast<double>(row.per_target.size());
    row.complexity = complexity;
    row.model_count = count;
    row.methods = std::move(methods);
    return row;
  }

  ResultRow distill_row(RowKind kind, double width, const std::vector<std::string>& methods) {
    std::vector<std::pair<std::size_t, std::string>> keys;
    for (std::size_t i = 0; i < methods.size(); ++i) keys.emplace_back(i, methods[i]);
    ensure_teachers(keys);
    std::vector<KdTeacher> kd;
    std::vector<QueryGallerySplit> val;
    for (std::size_t i = 0; i < methods.size(); ++i) {
      kd.push_back({&teachers_.at(keys[i]), &targets()[i].train});
      val.push_back(targets()[i].validation);
    }
    auto outcome = kd_distill(pretrained_student(width), kd, cfg_.kd, val,
                              derive_seed(cfg_.seed, "kd", width_key(width)), &source());
    const ComplexityReport cx = complexity_report(outcome.student);
    auto metrics = evaluate_on_targets(outcome.student);
    trained_[width_tag(width) + "-" + std::string(row_name(kind))] = std::move(outcome.student);
    return make_row(kind, std::move(metrics), cx, 1, methods);
  }

  ResultRow run_row(RowKind kind, double width) {
    switch (kind) {
      case RowKind::LowerBound: {
        const BackboneModel& s = pretrained_student(width);
        trained_[width_tag(width) + "-lower_bound"] = s;
        return make_row(kind, evaluate_on_targets(s), complexity_report(s));
      }
      case RowKind::PerTarget: {
        std::vector<Metrics> metrics;
        std::vector<std::string> methods;
        ComplexityReport single;
        for (std::size_t i = 0; i < cfg_.targets.size(); ++i) {
          const auto& m = cfg_.targets[i].method;
          const BackboneModel& t = teacher(i, m);
          metrics.push_back(evaluate(t, targets()[i].test));
          methods.push_back(m);
          single = complexity_report(t);
          trained_["teacher-" + cfg_.targets[i].spec.domain_id + "-" + m] = t;
        }
        const std::size_t count = cfg_.targets.size();
        return make_row(kind, std::move(metrics), {single.num_parameters * count, single.flops_per_sample}, count,
                        std::move(methods));
      }
      case RowKind::Blending: {
        std::vector<DomainDataset> parts;
        for (const auto& t : targets()) parts.push_back(t.train);
        const DomainDataset blend = blend_targets(parts);
        BackboneModel s = pretrained_student(width);
        const std::string& method = cfg_.effective_blend_method();
        stda_adapt(s, source(), blend, stda_method(method), cfg_.stda,
                   derive_seed(cfg_.seed, "blend-" + method, width_key(width)));
        auto metrics = evaluate_on_targets(s);
        const auto cx = complexity_report(s);
        trained_[width_tag(width) + "-blending"] = s;
        return make_row(kind, std::move(metrics), cx, 1, std::vector<std::string>(cfg_.targets.size(), method));
      }
      case RowKind::KdReid: {
        std::vector<std::string> methods;
        for (const auto& t : cfg_.targets) methods.push_back(t.method);
        return distill_row(kind, width, methods);
      }
      case RowKind::KdMixed:
        return distill_row(kind, width, mixed_selection());
      case RowKind::UpperBound: {
        std::vector<DomainDataset> parts;
        {
          EvaluationScope oracle;
          for (const auto& t : targets()) parts.push_back(t.train.with_revealed_labels());
        }
        const DomainDataset blend = blend_targets(parts);
        BackboneModel s = pretrained_student(width);
        pretrain_supervised(s, blend, cfg_.pretrain, derive_seed(cfg_.seed, "upper", width_key(width)));
        auto metrics = evaluate_on_targets(s);
        const auto cx = complexity_report(s);
        trained_[width_tag(width) + "-upper_bound"] = s;
        return make_row(kind, std::move(metrics), cx);
      }
    }
    throw ConfigError("unhandled row");
  }

  ExperimentConfig cfg_;
  std::optional<DomainDataset> source_;
  std::vector<TargetData> targets_;
  std::optional<BackboneModel> teacher_base_;
  std::map<std::pair<std::size_t, std::string>, BackboneModel> teachers_;
  std::map<double, BackboneModel> students_;
  std::map<std::string, BackboneModel> trained_;
};

/// Runs every requested row of `scenario` for one student width.
inline ResultsTable run_mtda_experiment(const ExperimentConfig& scenario, double width) {
  MtdaRunner runner(scenario);
  return runner.run_width(width);
}

inline ResultsTable run_mtda_experiment(const ExperimentConfig& scenario) {
  return run_mtda_experiment(scenario, scenario.widths.front());
}

}  // namespace kdreid
