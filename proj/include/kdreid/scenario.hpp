#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "kdreid/errors.hpp"
#include "kdreid/evaluation.hpp"
#include "kdreid/synth.hpp"

namespace kdreid {

/// Optimizer schedule and stopping rule of one training phase.
struct TrainConfig {
  double lr0 = 0.01;
  std::size_t lr_decay_every = 5;
  double lr_decay_factor = 10.0;
  std::size_t batch_p = 16;
  std::size_t batch_k = kTrackletSize;
  double margin = 0.3;
  double stop_delta = 0.5;  // percentage points of average mAP
  std::size_t stop_window = 5;
  std::size_t max_epochs = 30;
  double momentum = 0.0;
  double source_weight = 1.0;  // supervised source term next to the STDA loss
  bool kd_source_supervision = false;

  bool operator==(const TrainConfig&) const = default;

  void validate(const std::string& section) const {
    auto fail = [&](const std::string& m) { throw ConfigError("[" + section + "] " + m); };
    if (!(lr0 > 0.0)) fail("lr0 must be positive");
    if (lr_decay_every < 1) fail("lr_decay_every must be >= 1");
    if (!(lr_decay_factor > 0.0)) fail("lr_decay_factor must be positive");
    if (batch_p < 2) fail("batch_p must be >= 2");
    if (batch_k < 1) fail("batch_k must be >= 1");
    if (!(margin > 0.0)) fail("margin must be positive");
    if (!(stop_delta > 0.0)) fail("stop_delta must be positive");
    if (stop_window < 1) fail("stop_window must be >= 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
    if (!(source_weight >= 0.0)) fail("source_weight must be nonnegative");
  }
};

enum class RowKind { LowerBound, PerTarget, Blending, KdReid, KdMixed, UpperBound };

inline constexpr RowKind kAllRows[] = {RowKind::LowerBound, RowKind::PerTarget, RowKind::Blending,
                                       RowKind::KdReid,     RowKind::KdMixed,   RowKind::UpperBound};

inline std::string_view row_name(RowKind r) {
  switch (r) {
    case RowKind::LowerBound: return "lower_bound";
    case RowKind::PerTarget: return "per_target";
    case RowKind::Blending: return "blending";
    case RowKind::KdReid: return "kd_reid";
    case RowKind::KdMixed: return "kd_mixed";
    case RowKind::UpperBound: return "upper_bound";
  }
  return "?";
}

inline RowKind parse_row(std::string_view name) {
  for (RowKind r : kAllRows)
    if (row_name(r) == name) return r;
  throw ConfigError("unknown row '" + std::string(name) + "'");
}

struct TargetConfig {
  DomainSpec spec;
  std::string method = "mmd";

  bool operator==(const TargetConfig&) const = default;
};

/// One multi-target scenario, optionally swept over student widths.
struct ExperimentConfig {
  std::string scenario_id = "scenario";
  std::uint64_t seed = 0;
  DomainSpec source;
  std::vector<TargetConfig> targets;
  std::vector<RowKind> rows{RowKind::KdReid};
  std::vector<double> widths{1.0};  // student width scales
  double teacher_width = 4.0;
  std::vector<std::size_t> hidden{32};  // widths at scale 1
  std::size_t embed_dim = 16;
  std::string blend_method;  // empty: first target's method
  std::vector<std::string> mixed_candidates{"mmd", "identity"};
  double test_fraction = 0.5;
  double query_fraction = 0.5;
  bool parallel_teachers = false;
  TrainConfig pretrain;
  TrainConfig stda;
  TrainConfig kd;
  std::string output_dir = "out";

  bool operator==(const ExperimentConfig&) const = default;

  const std::string& effective_blend_method() const {
    return blend_method.empty() ? targets.front().method : blend_method;
  }

  bool has_row(RowKind r) const {
    for (RowKind x : rows)
      if (x == r) return true;
    return false;
  }
};

struct ResultRow {
  std::string name;
  std::vector<Metrics> per_target;
  double avg_map = 0.0;
  double avg_rank1 = 0.0;
  ComplexityReport complexity;  // totals over all deployed models
  std::size_t model_count = 1;  // T for one-model-per-target
  std::vector<std::string> methods;  // STDA method per target, when applicable
};

struct ResultsTable {
  std::string scenario_id;
  double width_scale = 1.0;
  std::vector<std::string> target_ids;
  std::vector<ResultRow> rows;

  const ResultRow* find(std::string_view name) const {
    for (const auto& r : rows)
      if (r.name == name) return &r;
    return nullptr;
  }
};

}  // namespace kdreid
