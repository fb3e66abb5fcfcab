#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "kdreid/errors.hpp"
#include "kdreid/tape.hpp"
#include "kdreid/tensor.hpp"

namespace kdreid {

struct DenseLayer {
  Tensor weight;  // fan_in x fan_out
  Tensor bias;    // 1 x fan_out
  bool relu = false;

  std::size_t fan_in() const { return weight.rows(); }
  std::size_t fan_out() const { return weight.cols(); }
};

/// Layer widths of an MLP backbone at width scale 1.
struct Architecture {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden;
  std::size_t embed_dim = 0;

  /// Hidden widths and embedding size scaled and rounded, never below 1.
  Architecture scaled(double width_scale) const {
    auto s = [&](std::size_t w) {
      return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(w) * width_scale)));
    };
    Architecture a{input_dim, {}, s(embed_dim)};
    for (std::size_t h : hidden) a.hidden.push_back(s(h));
    return a;
  }

  bool operator==(const Architecture&) const = default;
};

enum class ModelRole { Student, Teacher };

/// MLP feature extractor: ReLU hidden layers, a linear embedding head and,
/// during supervised training only, a linear classifier on the embedding.
class BackboneModel {
 public:
  BackboneModel() = default;

  static BackboneModel create(const Architecture& arch, ModelRole role, std::string domain, double width_scale,
                              std::mt19937_64& rng) {
    if (arch.input_dim == 0 || arch.embed_dim == 0) throw SpecError("backbone: input_dim and embed_dim must be positive");
    BackboneModel m;
    m.role_ = role;
    m.domain_ = std::move(domain);
    m.width_scale_ = width_scale;
    std::size_t in = arch.input_dim;
    for (std::size_t h : arch.hidden) {
      m.layers_.push_back(init_layer(in, h, true, rng));
      in = h;
    }
    m.head_ = init_layer(in, arch.embed_dim, false, rng);
    return m;
  }

  /// Model from explicit layers; used by tests and checkpoint loading.
  static BackboneModel from_layers(std::vector<DenseLayer> hidden, DenseLayer head, ModelRole role = ModelRole::Student,
                                   std::string domain = {}, double width_scale = 1.0) {
    BackboneModel m;
    m.layers_ = std::move(hidden);
    m.head_ = std::move(head);
    m.role_ = role;
    m.domain_ = std::move(domain);
    m.width_scale_ = width_scale;
    m.check_shapes();
    return m;
  }

  std::size_t input_dim() const { return layers_.empty() ? head_.fan_in() : layers_.front().fan_in(); }
  std::size_t embed_dim() const { return head_.fan_out(); }
  const std::vector<DenseLayer>& hidden_layers() const { return layers_; }
  const DenseLayer& embedding_head() const { return head_; }
  const std::optional<DenseLayer>& classifier() const { return classifier_; }
  ModelRole role() const { return role_; }
  const std::string& domain() const { return domain_; }
  double width_scale() const { return width_scale_; }
  void set_role(ModelRole role, std::string domain) {
    role_ = role;
    domain_ = std::move(domain);
  }

  void attach_classifier(std::size_t num_classes, std::mt19937_64& rng) {
    classifier_ = init_layer(embed_dim(), num_classes, false, rng);
  }
  void detach_classifier() { classifier_.reset(); }

  /// Embedding and classifier parameters in a stable order.
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& l : layers_) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    out.push_back(&head_.weight);
    out.push_back(&head_.bias);
    if (classifier_) {
      out.push_back(&classifier_->weight);
      out.push_back(&classifier_->bias);
    }
    return out;
  }

  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> out;
    for (Tensor* p : const_cast<BackboneModel*>(this)->parameters()) out.push_back(p);
    return out;
  }

  void zero_grad() {
    for (Tensor* p : parameters()) p->zero_grad();
  }

  /// Embedding outputs (unnormalized), no tape.
  Tensor embed(const Tensor& inputs) const {
    check_input(inputs);
    Tensor h = inputs;
    for (const auto& l : layers_) {
      h = dense_affine(h, l.weight, l.bias);
      if (l.relu) h = relu(h);
    }
    return dense_affine(h, head_.weight, head_.bias);
  }

  struct TapeOutputs {
    Var embedding;
    std::optional<Var> logits;
  };

  /// Forward pass recorded on `tape`; gradients reach this model's tensors.
  TapeOutputs forward(Tape& tape, const Tensor& inputs) {
    check_input(inputs);
    Var h = tape.constant(inputs);
    for (auto& l : layers_) {
      h = dense_affine(h, tape.parameter(l.weight), tape.parameter(l.bias));
      if (l.relu) h = relu(h);
    }
    TapeOutputs out{dense_affine(h, tape.parameter(head_.weight), tape.parameter(head_.bias)), std::nullopt};
    if (classifier_) {
      out.logits = dense_affine(out.embedding, tape.parameter(classifier_->weight), tape.parameter(classifier_->bias));
    }
    return out;
  }

  bool same_parameters(const BackboneModel& o) const {
    const auto a = parameters(), b = o.parameters();
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!(*a[i] == *b[i])) return false;
    return true;
  }

  void set_classifier(std::optional<DenseLayer> c) { classifier_ = std::move(c); }

 private:
  static DenseLayer init_layer(std::size_t in, std::size_t out, bool relu_after, std::mt19937_64& rng) {
    // He init for ReLU layers, Xavier for linear heads.
    const double std_dev =
        relu_after ? std::sqrt(2.0 / static_cast<double>(in)) : std::sqrt(2.0 / static_cast<double>(in + out));
    std::normal_distribution<double> normal(0.0, std_dev);
    DenseLayer l{Tensor(in, out), Tensor(1, out), relu_after};
    for (double& v : l.weight.values()) v = normal(rng);
    return l;
  }

  void check_input(const Tensor& inputs) const {
    if (inputs.cols() != input_dim()) {
      throw DimensionError("backbone: input has " + std::to_string(inputs.cols()) + " features, model expects " +
                           std::to_string(input_dim()));
    }
  }

  void check_shapes() const {
    std::size_t in = input_dim();
    for (const auto& l : layers_) {
      if (l.fan_in() != in || l.bias.rows() != 1 || l.bias.cols() != l.fan_out()) {
        throw DimensionError("backbone: hidden layer shapes do not chain");
      }
      in = l.fan_out();
    }
    if (head_.fan_in() != in || head_.bias.cols() != head_.fan_out()) {
      throw DimensionError("backbone: embedding head does not match last hidden layer");
    }
  }

  std::vector<DenseLayer> layers_;
  DenseLayer head_;
  std::optional<DenseLayer> classifier_;
  ModelRole role_ = ModelRole::Student;
  std::string domain_;
  double width_scale_ = 1.0;
};

// ---------------------------------------------------------------------------
// Checkpoints.
//
//   kdreid-checkpoint v1
//   role <student|teacher> domain <id|-> width_scale <x> epoch <n>
//   rng <mt19937_64 state words>
//   hidden <count>
//   layer <fan_in> <fan_out> <relu 0|1>      then one line of weights, one of biases
//   head <fan_in> <fan_out>                  same two value lines
//   classifier <none | fan_in fan_out>       same two value lines when present
//
// Reals are printed with %.17g, so a round trip is bit-exact.

inline constexpr const char* kCheckpointMagic = "kdreid-checkpoint";
inline constexpr const char* kCheckpointVersion = "v1";

struct Checkpoint {
  BackboneModel model;
  std::mt19937_64 rng;
  std::size_t epoch = 0;
};

namespace detail {

inline void write_values(std::ostream& os, std::span<const double> v) {
  char buf[32];
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", v[i]);
    os << (i ? " " : "") << buf;
  }
  os << '\n';
}

inline void write_layer(std::ostream& os, const char* tag, const DenseLayer& l, bool with_relu) {
  os << tag << ' ' << l.fan_in() << ' ' << l.fan_out();
  if (with_relu) os << ' ' << (l.relu ? 1 : 0);
  os << '\n';
  write_values(os, l.weight.values());
  write_values(os, l.bias.values());
}

inline Tensor read_values(std::istream& is, std::size_t rows, std::size_t cols) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError("checkpoint: truncated value line");
  std::istringstream ls(line);
  Tensor t(rows, cols);
  for (double& v : t.values()) {
    std::string tok;
    if (!(ls >> tok)) throw FormatError("checkpoint: short value line");
    v = std::strtod(tok.c_str(), nullptr);
  }
  return t;
}

inline DenseLayer read_layer(std::istream& is, const std::string& expect_tag, bool with_relu) {
  std::string line, tag;
  if (!std::getline(is, line)) throw FormatError("checkpoint: missing " + expect_tag);
  std::istringstream ls(line);
  std::size_t in = 0, out = 0;
  int r = 0;
  ls >> tag >> in >> out;
  if (with_relu) ls >> r;
  if (tag != expect_tag || !ls || in == 0 || out == 0) throw FormatError("checkpoint: bad " + expect_tag + " line '" + line + "'");
  DenseLayer l;
  l.weight = read_values(is, in, out);
  l.bias = read_values(is, 1, out);
  l.relu = r != 0;
  return l;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  const BackboneModel& m = ck.model;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", m.width_scale());
  os << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  os << "role " << (m.role() == ModelRole::Student ? "student" : "teacher") << " domain "
     << (m.domain().empty() ? "-" : m.domain()) << " width_scale " << buf << " epoch " << ck.epoch << '\n';
  os << "rng " << ck.rng << '\n';
  os << "hidden " << m.hidden_layers().size() << '\n';
  for (const auto& l : m.hidden_layers()) detail::write_layer(os, "layer", l, true);
  detail::write_layer(os, "head", m.embedding_head(), false);
  if (m.classifier()) {
    detail::write_layer(os, "classifier", *m.classifier(), false);
  } else {
    os << "classifier none\n";
  }
}

inline Checkpoint read_checkpoint(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError("checkpoint: empty input");
  {
    std::istringstream ls(line);
    std::string magic, version;
    ls >> magic >> version;
    if (magic != kCheckpointMagic) throw FormatError("checkpoint: not a checkpoint");
    if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported format version '" + version + "'");
  }
  Checkpoint ck;
  std::string role, domain, k1, k2, k3, k4;
  double width = 1.0;
  if (!std::getline(is, line)) throw FormatError("checkpoint: missing role line");
  {
    std::istringstream ls(line);
    std::string wtok;
    ls >> k1 >> role >> k2 >> domain >> k3 >> wtok >> k4 >> ck.epoch;
    if (k1 != "role" || k2 != "domain" || k3 != "width_scale" || k4 != "epoch" || !ls) {
      throw FormatError("checkpoint: bad role line '" + line + "'");
    }
    width = std::strtod(wtok.c_str(), nullptr);
  }
  if (!std::getline(is, line) || line.rfind("rng ", 0) != 0) throw FormatError("checkpoint: missing rng line");
  {
    std::istringstream ls(line.substr(4));
    ls >> ck.rng;
    if (!ls) throw FormatError("checkpoint: bad rng state");
  }
  std::size_t hidden = 0;
  if (!std::getline(is, line) || std::sscanf(line.c_str(), "hidden %zu", &hidden) != 1) {
    throw FormatError("checkpoint: missing hidden count");
  }
  std::vector<DenseLayer> layers;
  for (std::size_t i = 0; i < hidden; ++i) layers.push_back(detail::read_layer(is, "layer", true));
  DenseLayer head = detail::read_layer(is, "head", false);
  const auto mark = is.tellg();
  std::optional<DenseLayer> classifier;
  if (!std::getline(is, line)) throw FormatError("checkpoint: missing classifier line");
  if (line != "classifier none") {
    is.clear();
    is.seekg(mark);
    classifier = detail::read_layer(is, "classifier", false);
  }
  ck.model = BackboneModel::from_layers(std::move(layers), std::move(head),
                                        role == "teacher" ? ModelRole::Teacher : ModelRole::Student,
                                        domain == "-" ? std::string{} : domain, width);
  ck.model.set_classifier(std::move(classifier));
  return ck;
}

}  // namespace kdreid
