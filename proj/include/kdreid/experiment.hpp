#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "kdreid/adaptation.hpp"
#include "kdreid/errors.hpp"
#include "kdreid/model.hpp"
#include "kdreid/mtda.hpp"
#include "kdreid/scenario.hpp"

namespace kdreid {

/// Raised by run() with the scenario id prepended to the failing module's
/// message.
class ExperimentError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream is{std::string(s)};
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct LineCursor {
  int line;

  [[noreturn]] void fail(const std::string& what) const { throw ParseError(line, what); }

  double real(const std::string& v) const {
    double out = 0.0;
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (r.ec != std::errc{} || r.ptr != v.data() + v.size() || !std::isfinite(out)) fail("'" + v + "' is not a number");
    return out;
  }

  std::uint64_t whole(const std::string& v) const {
    std::uint64_t out = 0;
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (r.ec != std::errc{} || r.ptr != v.data() + v.size()) fail("'" + v + "' is not a nonnegative integer");
    return out;
  }

  bool flag(const std::string& v) const {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    fail("'" + v + "' is not a boolean");
  }

  std::string word(const std::string& v) const {
    const auto w = split_words(v);
    if (w.size() != 1) fail("expected a single word, got '" + v + "'");
    return w.front();
  }

  std::vector<double> reals(const std::string& v) const {
    std::vector<double> out;
    for (const auto& w : split_words(v)) out.push_back(real(w));
    return out;
  }
};

struct PendingDomain {
  DomainSpec spec;
  std::string method = "mmd";
  int header_line = 0;
  int method_line = 0;
  bool has_dim = false;
  bool random_translation = false;
  double translation_norm = 0.0;
  std::uint64_t translation_seed = 0;
  int translation_line = 0;
};

inline void parse_train_key(TrainConfig& t, const std::string& key, const std::string& v, const LineCursor& at) {
  if (key == "lr0") t.lr0 = at.real(v);
  else if (key == "lr_decay_every") t.lr_decay_every = at.whole(v);
  else if (key == "lr_decay_factor") t.lr_decay_factor = at.real(v);
  else if (key == "batch_p") t.batch_p = at.whole(v);
  else if (key == "batch_k") t.batch_k = at.whole(v);
  else if (key == "margin") t.margin = at.real(v);
  else if (key == "stop_delta") t.stop_delta = at.real(v);
  else if (key == "stop_window") t.stop_window = at.whole(v);
  else if (key == "max_epochs") t.max_epochs = at.whole(v);
  else if (key == "momentum") t.momentum = at.real(v);
  else if (key == "source_weight") t.source_weight = at.real(v);
  else if (key == "kd_source_supervision") t.kd_source_supervision = at.flag(v);
  else at.fail("unknown key '" + key + "'");
}

inline void parse_domain_key(PendingDomain& d, bool is_target, const std::string& key, const std::string& v,
                             const LineCursor& at) {
  DomainSpec& s = d.spec;
  if (key == "id") s.domain_id = at.word(v);
  else if (key == "identities") s.num_identities = at.whole(v);
  else if (key == "cameras") s.cameras = at.whole(v);
  else if (key == "samples_per_camera") s.samples_per_identity_per_camera = at.whole(v);
  else if (key == "input_dim") {
    s.input_dim = at.whole(v);
    d.has_dim = true;
  } else if (key == "seed") s.seed = at.whole(v);
  else if (key == "rotation") s.shift.rotation_angle = at.real(v);
  else if (key == "scale") s.shift.scale = at.real(v);
  else if (key == "noise") s.shift.noise_std = at.real(v);
  else if (key == "camera_offset") s.shift.camera_offset_std = at.real(v);
  else if (key == "translation") {
    s.shift.translation = at.reals(v);
    d.random_translation = false;
  } else if (key == "translation_random") {
    const auto w = split_words(v);
    if (w.size() != 2) at.fail("translation_random takes <norm> <seed>");
    d.random_translation = true;
    d.translation_norm = at.real(w[0]);
    d.translation_seed = at.whole(w[1]);
    d.translation_line = at.line;
  } else if (is_target && key == "method") {
    d.method = at.word(v);
    d.method_line = at.line;
    try {
      stda_method(d.method);
    } catch (const ConfigError&) {
      at.fail("unknown method '" + d.method + "'");
    }
  } else {
    at.fail("unknown key '" + key + "'");
  }
}

// Translation of the given norm along a seeded random direction.
inline std::vector<double> random_translation(std::size_t dim, double norm, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(dim);
  double sq = 0.0;
  for (double& x : v) {
    x = normal(rng);
    sq += x * x;
  }
  const double f = sq > 0.0 ? norm / std::sqrt(sq) : 0.0;
  for (double& x : v) x *= f;
  return v;
}

inline DomainSpec finish_domain(PendingDomain& d, std::size_t source_dim) {
  if (!d.has_dim) d.spec.input_dim = source_dim;
  if (d.random_translation) {
    if (d.spec.input_dim < 2) throw ParseError(d.translation_line, "translation_random needs input_dim >= 2");
    d.spec.shift.translation = random_translation(d.spec.input_dim, d.translation_norm, d.translation_seed);
  }
  try {
    d.spec.validate();
  } catch (const SpecError& e) {
    throw ParseError(d.header_line, e.what());
  }
  return d.spec;
}

}  // namespace detail

/// Parses the line-oriented scenario format:
///
///   # comment
///   [experiment]            scenario, seed, rows, widths, teacher_width,
///                           hidden, embed_dim, blend_method, mixed_candidates,
///                           test_fraction, query_fraction, parallel_teachers,
///                           output_dir
///   [source]                id, identities, cameras, samples_per_camera,
///                           input_dim, seed, rotation, scale, noise,
///                           camera_offset, translation | translation_random
///   [target]                same keys plus method; repeat once per target
///   [pretrain] [stda] [kd]  TrainConfig fields
///
/// Lists are space separated. Omitted keys keep their defaults and a target
/// without input_dim inherits the source's.
inline ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig cfg;
  detail::PendingDomain source;
  bool have_source = false;
  std::vector<detail::PendingDomain> targets;
  std::string section;
  std::set<std::pair<std::string, std::string>> seen;  // (section instance, key)
  std::string instance;
  int blend_line = 0, mixed_line = 0, last_line = 0;

  std::map<std::string, int> phase_line;  // section header lines
  std::istringstream in{std::string(text)};
  std::string raw;
  for (int line = 1; std::getline(in, raw); ++line) {
    last_line = line;
    const detail::LineCursor at{line};
    std::string s = detail::trim(raw.substr(0, raw.find('#')));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') at.fail("malformed section header '" + s + "'");
      section = detail::trim(std::string_view(s).substr(1, s.size() - 2));
      if (section == "target") {
        targets.emplace_back();
        targets.back().header_line = line;
        instance = "target#" + std::to_string(targets.size());
      } else if (section == "source") {
        if (have_source) at.fail("second [source] section");
        have_source = true;
        source.header_line = line;
        instance = section;
      } else if (section == "experiment" || section == "pretrain" || section == "stda" || section == "kd") {
        instance = section;
        phase_line.emplace(section, line);
      } else {
        at.fail("unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) at.fail("expected 'key = value'");
    const std::string key = detail::trim(std::string_view(s).substr(0, eq));
    const std::string value = detail::trim(std::string_view(s).substr(eq + 1));
    if (section.empty()) at.fail("key '" + key + "' outside of a section");
    if (!seen.insert({instance, key}).second) at.fail("key '" + key + "' repeated in [" + section + "]");

    if (section == "experiment") {
      if (key == "scenario") cfg.scenario_id = at.word(value);
      else if (key == "seed") cfg.seed = at.whole(value);
      else if (key == "rows") {
        cfg.rows.clear();
        for (const auto& w : detail::split_words(value)) {
          RowKind r{};
          try {
            r = parse_row(w);
          } catch (const ConfigError&) {
            at.fail("unknown row '" + w + "'");
          }
          if (cfg.has_row(r)) at.fail("row '" + w + "' listed twice");
          cfg.rows.push_back(r);
        }
        if (cfg.rows.empty()) at.fail("rows is empty");
      } else if (key == "widths") {
        cfg.widths = at.reals(value);
        if (cfg.widths.empty()) at.fail("widths is empty");
        for (double w : cfg.widths)
          if (!(w > 0.0)) at.fail("width scales must be positive");
      } else if (key == "teacher_width") {
        cfg.teacher_width = at.real(value);
        if (!(cfg.teacher_width > 0.0)) at.fail("teacher_width must be positive");
      } else if (key == "hidden") {
        cfg.hidden.clear();
        for (const auto& w : detail::split_words(value)) cfg.hidden.push_back(at.whole(w));
      } else if (key == "embed_dim") cfg.embed_dim = at.whole(value);
      else if (key == "blend_method") {
        cfg.blend_method = at.word(value);
        blend_line = line;
      } else if (key == "mixed_candidates") {
        cfg.mixed_candidates = detail::split_words(value);
        mixed_line = line;
      } else if (key == "test_fraction") cfg.test_fraction = at.real(value);
      else if (key == "query_fraction") cfg.query_fraction = at.real(value);
      else if (key == "parallel_teachers") cfg.parallel_teachers = at.flag(value);
      else if (key == "output_dir") cfg.output_dir = value;
      else at.fail("unknown key '" + key + "'");
    } else if (section == "source") {
      detail::parse_domain_key(source, false, key, value, at);
    } else if (section == "target") {
      detail::parse_domain_key(targets.back(), true, key, value, at);
    } else {
      TrainConfig& t = section == "pretrain" ? cfg.pretrain : section == "stda" ? cfg.stda : cfg.kd;
      detail::parse_train_key(t, key, value, at);
    }
  }

  const int end = last_line + 1;
  if (!have_source) throw ParseError(end, "missing [source] section");
  if (targets.empty()) throw ParseError(end, "missing [target] section");
  if (!source.has_dim) throw ParseError(source.header_line, "[source] needs input_dim");
  cfg.source = detail::finish_domain(source, source.spec.input_dim);
  std::set<std::string> ids{cfg.source.domain_id};
  for (auto& t : targets) {
    TargetConfig tc{detail::finish_domain(t, cfg.source.input_dim), t.method};
    if (tc.spec.input_dim != cfg.source.input_dim) {
      throw ParseError(t.header_line, "target input_dim differs from the source's");
    }
    if (!ids.insert(tc.spec.domain_id).second) {
      throw ParseError(t.header_line, "domain id '" + tc.spec.domain_id + "' used twice");
    }
    cfg.targets.push_back(std::move(tc));
  }
  auto check_method = [](const std::string& m, int line) {
    try {
      stda_method(m);
    } catch (const ConfigError&) {
      throw ParseError(line, "unknown method '" + m + "'");
    }
  };
  if (!cfg.blend_method.empty()) check_method(cfg.blend_method, blend_line);
  if (cfg.mixed_candidates.empty()) throw ParseError(mixed_line, "mixed_candidates is empty");
  for (const auto& m : cfg.mixed_candidates) check_method(m, mixed_line);
  if (cfg.embed_dim == 0) throw ParseError(end, "embed_dim must be positive");
  if (!(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0)) throw ParseError(end, "test_fraction must lie in (0, 1)");
  if (!(cfg.query_fraction > 0.0 && cfg.query_fraction < 1.0)) {
    throw ParseError(end, "query_fraction must lie in (0, 1)");
  }
  const std::pair<const char*, const TrainConfig*> phases[] = {
      {"pretrain", &cfg.pretrain}, {"stda", &cfg.stda}, {"kd", &cfg.kd}};
  for (const auto& [name, t] : phases) {
    try {
      t->validate(name);
    } catch (const ConfigError& e) {
      const auto at = phase_line.find(name);
      throw ParseError(at == phase_line.end() ? end : at->second, e.what());
    }
  }
  return cfg;
}

namespace detail {

inline void write_domain(std::ostream& os, const DomainSpec& s) {
  os << "id = " << s.domain_id << "\n"
     << "identities = " << s.num_identities << "\n"
     << "cameras = " << s.cameras << "\n"
     << "samples_per_camera = " << s.samples_per_identity_per_camera << "\n"
     << "input_dim = " << s.input_dim << "\n"
     << "seed = " << s.seed << "\n"
     << "rotation = " << format_double(s.shift.rotation_angle) << "\n"
     << "scale = " << format_double(s.shift.scale) << "\n"
     << "noise = " << format_double(s.shift.noise_std) << "\n"
     << "camera_offset = " << format_double(s.shift.camera_offset_std) << "\n";
  if (!s.shift.translation.empty()) {
    os << "translation =";
    for (double v : s.shift.translation) os << ' ' << format_double(v);
    os << "\n";
  }
}

inline void write_train(std::ostream& os, const char* name, const TrainConfig& t) {
  os << "\n[" << name << "]\n"
     << "lr0 = " << format_double(t.lr0) << "\n"
     << "lr_decay_every = " << t.lr_decay_every << "\n"
     << "lr_decay_factor = " << format_double(t.lr_decay_factor) << "\n"
     << "batch_p = " << t.batch_p << "\n"
     << "batch_k = " << t.batch_k << "\n"
     << "margin = " << format_double(t.margin) << "\n"
     << "stop_delta = " << format_double(t.stop_delta) << "\n"
     << "stop_window = " << t.stop_window << "\n"
     << "max_epochs = " << t.max_epochs << "\n"
     << "momentum = " << format_double(t.momentum) << "\n"
     << "source_weight = " << format_double(t.source_weight) << "\n"
     << "kd_source_supervision = " << (t.kd_source_supervision ? "true" : "false") << "\n";
}

template <class T, class F>
std::string join(const std::vector<T>& v, F&& f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? " " : "") + f(v[i]);
  return out;
}

}  // namespace detail

/// Writes every field explicitly; parse_config(serialize_config(c)) == c.
inline std::string serialize_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << "[experiment]\n"
     << "scenario = " << cfg.scenario_id << "\n"
     << "seed = " << cfg.seed << "\n"
     << "rows = " << detail::join(cfg.rows, [](RowKind r) { return std::string(row_name(r)); }) << "\n"
     << "widths = " << detail::join(cfg.widths, detail::format_double) << "\n"
     << "teacher_width = " << detail::format_double(cfg.teacher_width) << "\n"
     << "hidden = " << detail::join(cfg.hidden, [](std::size_t h) { return std::to_string(h); }) << "\n"
     << "embed_dim = " << cfg.embed_dim << "\n";
  if (!cfg.blend_method.empty()) os << "blend_method = " << cfg.blend_method << "\n";
  os << "mixed_candidates = " << detail::join(cfg.mixed_candidates, [](const std::string& m) { return m; }) << "\n"
     << "test_fraction = " << detail::format_double(cfg.test_fraction) << "\n"
     << "query_fraction = " << detail::format_double(cfg.query_fraction) << "\n"
     << "parallel_teachers = " << (cfg.parallel_teachers ? "true" : "false") << "\n"
     << "output_dir = " << cfg.output_dir << "\n";
  os << "\n[source]\n";
  detail::write_domain(os, cfg.source);
  for (const auto& t : cfg.targets) {
    os << "\n[target]\n";
    detail::write_domain(os, t.spec);
    os << "method = " << t.method << "\n";
  }
  detail::write_train(os, "pretrain", cfg.pretrain);
  detail::write_train(os, "stda", cfg.stda);
  detail::write_train(os, "kd", cfg.kd);
  return os.str();
}

namespace detail {

inline std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

inline std::uint64_t params_per_model(const ResultRow& r) {
  return r.model_count ? r.complexity.num_parameters / r.model_count : r.complexity.num_parameters;
}

inline std::string params_cell(const ResultRow& r) {
  const std::string per = std::to_string(params_per_model(r));
  return r.model_count > 1 ? std::to_string(r.model_count) + " x " + per : per;
}

}  // namespace detail

/// Aligned plain-text grid: Method, mAP/R1 per target, Average mAP/R1,
/// # Parameters, FLOPs. Metrics are shown in percent.
inline std::string report(const ResultsTable& table) {
  std::vector<std::string> header{"Method"};
  for (const auto& id : table.target_ids) {
    header.push_back(id + " mAP");
    header.push_back(id + " R1");
  }
  for (const char* h : {"Avg mAP", "Avg R1", "# Parameters", "FLOPs"}) header.emplace_back(h);

  std::vector<std::vector<std::string>> cells{header};
  for (const auto& r : table.rows) {
    std::vector<std::string> line{r.name};
    for (std::size_t i = 0; i < table.target_ids.size(); ++i) {
      const bool have = i < r.per_target.size();
      line.push_back(have ? detail::pct(r.per_target[i].mAP) : "-");
      line.push_back(have ? detail::pct(r.per_target[i].rank1()) : "-");
    }
    line.push_back(detail::pct(r.avg_map));
    line.push_back(detail::pct(r.avg_rank1));
    line.push_back(detail::params_cell(r));
    line.push_back(std::to_string(r.complexity.flops_per_sample));
    cells.push_back(std::move(line));
  }

  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : cells)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());

  std::ostringstream os;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", table.width_scale);
  os << "scenario " << table.scenario_id << ", student width " << buf << "\n";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& row = cells[i];
    for (std::size_t c = 0; c < row.size(); ++c) {
      const std::size_t pad = width[c] - row[c].size();
      if (c == 0) os << row[c] << std::string(pad, ' ');
      else os << "  " << std::string(pad, ' ') << row[c];
    }
    os << "\n";
    if (i == 0) {
      std::size_t total = 0;
      for (std::size_t w : width) total += w;
      os << std::string(total + 2 * (width.size() - 1), '-') << "\n";
    }
  }
  return os.str();
}

/// One `key=value` line per row, carrying the same numbers as report().
inline std::string result_lines(const ResultsTable& table) {
  std::ostringstream os;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", table.width_scale);
  for (const auto& r : table.rows) {
    os << "scenario=" << table.scenario_id << " width=" << buf << " row=" << r.name;
    for (std::size_t i = 0; i < table.target_ids.size() && i < r.per_target.size(); ++i) {
      os << ' ' << table.target_ids[i] << ".mAP=" << detail::pct(r.per_target[i].mAP) << ' ' << table.target_ids[i]
         << ".R1=" << detail::pct(r.per_target[i].rank1());
    }
    os << " avg.mAP=" << detail::pct(r.avg_map) << " avg.R1=" << detail::pct(r.avg_rank1)
       << " models=" << r.model_count << " params_per_model=" << detail::params_per_model(r)
       << " flops=" << r.complexity.flops_per_sample;
    if (!r.methods.empty()) os << " methods=" << detail::join(r.methods, [](const std::string& m) { return m; });
    os << "\n";
  }
  return os.str();
}

/// Per-row capacity series over a width sweep: "<parameters> <avg mAP %>".
inline std::map<std::string, std::string> sweep_series(const std::vector<ResultsTable>& tables) {
  std::map<std::string, std::string> out;
  for (const auto& t : tables)
    for (const auto& r : t.rows) {
      auto& s = out[r.name];
      if (s.empty()) s = "# " + r.name + ": parameters average_mAP\n";
      s += std::to_string(r.complexity.num_parameters) + " " + detail::pct(r.avg_map) + "\n";
    }
  return out;
}

struct RunArtifacts {
  std::vector<ResultsTable> tables;
  std::vector<std::filesystem::path> files;  // in write order
};

/// Runs every configured width with one shared runner and writes, under
/// output_dir: config.cfg, checkpoints/<width>-<row>.ckpt, results.txt,
/// results.lines and, for sweeps, sweep_<row>.tsv. An INCOMPLETE marker is
/// present until the run finishes; on failure it stays behind with the
/// error text.
inline RunArtifacts run(const ExperimentConfig& config, std::ostream* progress = nullptr) {
  namespace fs = std::filesystem;
  const fs::path dir = config.output_dir;
  const fs::path marker = dir / "INCOMPLETE";
  RunArtifacts out;
  auto write = [&](const fs::path& p, const std::string& body) {
    fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    f << body;
    if (!f) throw FormatError("cannot write " + p.string());
    out.files.push_back(p);
  };
  auto say = [&](const std::string& m) {
    if (progress) *progress << m << std::endl;
  };

  fs::create_directories(dir);
  {
    std::ofstream f(marker, std::ios::binary);
    f << "run in progress\n";
  }
  try {
    write(dir / "config.cfg", serialize_config(config));
    MtdaRunner runner(config);
    std::string grid, lines;
    for (double w : config.widths) {
      say("width " + detail::format_double(w) + ": running " + std::to_string(config.rows.size()) + " row(s)");
      out.tables.push_back(runner.run_width(w));
      const ResultsTable& t = out.tables.back();
      grid += (grid.empty() ? "" : "\n") + report(t);
      lines += result_lines(t);
      for (const auto& [name, model] : runner.trained_models()) {
        const fs::path p = dir / "checkpoints" / (name + ".ckpt");
        if (std::find(out.files.begin(), out.files.end(), p) != out.files.end()) continue;
        std::ostringstream os;
        write_checkpoint(os, Checkpoint{model, std::mt19937_64(derive_seed(config.seed, "checkpoint")), 0});
        write(p, os.str());
      }
    }
    write(dir / "results.txt", grid);
    write(dir / "results.lines", lines);
    if (config.widths.size() > 1)
      for (const auto& [name, body] : sweep_series(out.tables)) write(dir / ("sweep_" + name + ".tsv"), body);
  } catch (const std::exception& e) {
    std::ofstream f(marker, std::ios::binary);
    f << e.what() << "\n";
    throw ExperimentError("scenario '" + config.scenario_id + "': " + e.what());
  }
  fs::remove(marker);
  return out;
}

}  // namespace kdreid
