#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "kdreid/experiment.hpp"

using namespace kdreid;
namespace fs = std::filesystem;

namespace {

const char* kMinimal = R"(
[source]
id = src
input_dim = 8

[target]
id = t1
rotation = 0.5
)";

const char* kSmall = R"(# small end-to-end scenario
[experiment]
scenario = tiny
seed = 3
rows = blending kd_reid
hidden = 12
embed_dim = 6
teacher_width = 2

[source]
id = src
identities = 16
cameras = 2
samples_per_camera = 4
input_dim = 8
seed = 1

[target]
id = t1
identities = 16
cameras = 2
samples_per_camera = 4
seed = 2
rotation = 0.5

[target]
id = t2
identities = 16
cameras = 2
samples_per_camera = 4
seed = 3
rotation = 0.9
scale = 0.8

[pretrain]
max_epochs = 2

[stda]
max_epochs = 1

[kd]
max_epochs = 2
)";

int parse_error_line(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ParseError& e) {
    return e.line();
  }
  return -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("kdreid_test_" + name);
  fs::remove_all(p);
  return p;
}

ResultsTable hand_table() {
  ResultsTable t;
  t.scenario_id = "hand";
  t.width_scale = 0.5;
  t.target_ids = {"a", "b"};
  ResultRow pt;
  pt.name = "per_target";
  pt.per_target = {Metrics{0.5, {0.25, 1.0}, 2}, Metrics{0.25, {0.75, 1.0}, 2}};
  pt.avg_map = 0.375;
  pt.avg_rank1 = 0.5;
  pt.complexity = {300, 40};
  pt.model_count = 3;
  t.rows.push_back(pt);
  return t;
}

}  // namespace

TEST(ParseConfig, MinimalConfigUsesDefaults) {
  const ExperimentConfig cfg = parse_config(kMinimal);
  const ExperimentConfig defaults;
  ASSERT_EQ(cfg.targets.size(), 1u);
  EXPECT_EQ(cfg.targets[0].spec.input_dim, 8u);
  EXPECT_EQ(cfg.targets[0].spec.shift.rotation_angle, 0.5);
  EXPECT_EQ(cfg.targets[0].method, "mmd");
  EXPECT_EQ(cfg.rows, defaults.rows);
  EXPECT_EQ(cfg.widths, defaults.widths);
  EXPECT_EQ(cfg.kd, defaults.kd);
  EXPECT_EQ(cfg.kd.lr0, 0.01);
  EXPECT_EQ(cfg.kd.batch_p, 16u);
  EXPECT_EQ(cfg.kd.batch_k, 4u);
}

TEST(ParseConfig, ErrorsCarryLineNumbers) {
  const std::string base = kMinimal;
  EXPECT_EQ(parse_error_line("[experiment]\nrows = kd_reid kd_reid\n" + base), 2);
  EXPECT_EQ(parse_error_line("[experiment]\nrows = teacher_soup\n" + base), 2);
  EXPECT_EQ(parse_error_line("[experiment]\ncolour = blue\n" + base), 2);
  EXPECT_EQ(parse_error_line("[experiment]\nseed = 1\nseed = 2\n" + base), 3);
  EXPECT_EQ(parse_error_line("[bogus]\n" + base), 1);
  EXPECT_EQ(parse_error_line(base + "method = dann\n"), 9);
  // missing [target]: reported one past the last line
  EXPECT_EQ(parse_error_line("[source]\nid = src\ninput_dim = 8\n"), 4);
  EXPECT_EQ(parse_error_line("[target]\nid = t1\n"), 3);
  EXPECT_EQ(parse_error_line("[source]\nid = src\n[target]\nid = t\n"), 1);
  EXPECT_EQ(parse_error_line(base + "[target]\nid = t1\n"), 9);
  EXPECT_EQ(parse_error_line(base + "[kd]\nlr0 = -1\n"), 9);
  EXPECT_EQ(parse_error_line(base + "[pretrain]\n[kd]\nstop_window = 0\n"), 10);
  EXPECT_EQ(parse_error_line("[experiment]\nseed = x\n" + base), 2);
}

TEST(ParseConfig, SerializeRoundTrips) {
  ExperimentConfig cfg = parse_config(kSmall);
  cfg.widths = {1.0, 0.5, 0.25};
  cfg.targets[1].spec.shift.translation = {0.1, -0.2, 0.3, 0, 0, 0, 0, 1.0 / 3.0};
  cfg.kd.kd_source_supervision = true;
  cfg.stda.momentum = 0.9;
  const std::string text = serialize_config(cfg);
  const ExperimentConfig back = parse_config(text);
  EXPECT_EQ(back, cfg);
  EXPECT_EQ(serialize_config(back), text);
}

TEST(ParseConfig, TranslationRandomHasRequestedNorm) {
  const ExperimentConfig cfg = parse_config(std::string(kMinimal) + "translation_random = 2.5 7\n");
  const auto& t = cfg.targets[0].spec.shift.translation;
  ASSERT_EQ(t.size(), 8u);
  double n = 0.0;
  for (double v : t) n += v * v;
  EXPECT_NEAR(std::sqrt(n), 2.5, 1e-12);
  EXPECT_EQ(parse_config(std::string(kMinimal) + "translation_random = 2.5 7\n").targets[0].spec.shift.translation, t);
}

TEST(Report, GridAndLines) {
  const ResultsTable t = hand_table();
  const std::string grid = report(t);
  EXPECT_NE(grid.find("scenario hand, student width 0.5"), std::string::npos);
  EXPECT_NE(grid.find("Avg mAP"), std::string::npos);
  EXPECT_NE(grid.find("3 x 100"), std::string::npos);
  EXPECT_NE(grid.find("37.50"), std::string::npos);
  const std::string lines = result_lines(t);
  EXPECT_EQ(lines,
            "scenario=hand width=0.5 row=per_target a.mAP=50.00 a.R1=25.00 b.mAP=25.00 b.R1=75.00 avg.mAP=37.50 "
            "avg.R1=50.00 models=3 params_per_model=100 flops=40\n");
}

TEST(Report, EmptyRowsGiveHeaderOnly) {
  ResultsTable t = hand_table();
  t.rows.clear();
  const std::string grid = report(t);
  std::size_t n = 0;
  for (char c : grid) n += c == '\n';
  EXPECT_EQ(n, 3u);  // title, header, separator
  EXPECT_EQ(result_lines(t), "");
}

TEST(Report, SweepSeriesCountsPoints) {
  std::vector<ResultsTable> tables;
  for (double w : {1.0, 0.5, 0.25}) {
    ResultsTable t;
    t.width_scale = w;
    for (const char* name : {"blending", "kd_reid"}) {
      ResultRow r;
      r.name = name;
      r.avg_map = w / 2;
      r.complexity.num_parameters = static_cast<std::uint64_t>(1000 * w);
      t.rows.push_back(r);
    }
    tables.push_back(t);
  }
  const auto series = sweep_series(tables);
  ASSERT_EQ(series.size(), 2u);
  EXPECT_EQ(series.at("kd_reid"), "# kd_reid: parameters average_mAP\n1000 50.00\n500 25.00\n250 12.50\n");
}

TEST(Run, WritesArtifactsAndIsByteDeterministic) {
  ExperimentConfig cfg = parse_config(kSmall);
  cfg.widths = {1.0, 0.5, 0.25};
  cfg.output_dir = scratch_dir("det").string();
  const RunArtifacts a = run(cfg);
  std::vector<std::string> first;
  for (const auto& f : a.files) first.push_back(slurp(f));
  const RunArtifacts b = run(cfg);
  ASSERT_EQ(a.files, b.files);
  for (std::size_t i = 0; i < a.files.size(); ++i) EXPECT_EQ(slurp(b.files[i]), first[i]) << a.files[i];

  const fs::path dir = cfg.output_dir;
  EXPECT_FALSE(fs::exists(dir / "INCOMPLETE"));
  EXPECT_TRUE(fs::exists(dir / "results.txt"));
  EXPECT_TRUE(fs::exists(dir / "results.lines"));
  EXPECT_TRUE(fs::exists(dir / "sweep_blending.tsv"));
  EXPECT_TRUE(fs::exists(dir / "sweep_kd_reid.tsv"));
  EXPECT_EQ(a.tables.size(), 3u);
  std::size_t lines = 0;
  for (char c : slurp(dir / "sweep_kd_reid.tsv")) lines += c == '\n';
  EXPECT_EQ(lines, 4u);  // comment plus one point per width
  EXPECT_EQ(parse_config(slurp(dir / "config.cfg")), cfg);
}

TEST(Run, LowerBoundOnlyTrainsNoTeachers) {
  ExperimentConfig cfg = parse_config(kSmall);
  cfg.rows = {RowKind::LowerBound};
  cfg.output_dir = scratch_dir("lower").string();
  const RunArtifacts a = run(cfg);
  for (const auto& f : a.files) EXPECT_EQ(f.filename().string().find("teacher"), std::string::npos) << f;
  ASSERT_EQ(a.tables.size(), 1u);
  EXPECT_EQ(a.tables[0].rows.size(), 1u);
}

TEST(Run, FailureLeavesMarker) {
  ExperimentConfig cfg = parse_config(kSmall);
  cfg.source.num_identities = 2;  // too few identities for a PK batch
  cfg.output_dir = scratch_dir("fail").string();
  EXPECT_THROW(run(cfg), ExperimentError);
  EXPECT_TRUE(fs::exists(fs::path(cfg.output_dir) / "INCOMPLETE"));
}
