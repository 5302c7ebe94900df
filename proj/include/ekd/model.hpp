#pragma once

// CIFAR-style ResNet (6k+2) descriptions, parameter containers and static
// cost accounting.

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ekd/errors.hpp"
#include "ekd/rng.hpp"

namespace ekd {

struct ModelSpec {
  int depth = 8;
  std::array<int, 3> stage_widths{16, 32, 64};
  int num_classes = 10;
  int in_channels = 3;

  int blocks_per_stage() const noexcept { return (depth - 2) / 6; }
  int feature_dim() const noexcept { return stage_widths[2]; }
  std::string name() const { return "ResNet" + std::to_string(depth); }
  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

// Teacher ladder T1..T7, ordered by depth.
inline const std::vector<int>& teacher_ladder() {
  static const std::vector<int> depths{14, 20, 26, 32, 44, 56, 110};
  return depths;
}

inline void validate(const ModelSpec& spec) {
  if (spec.depth < 8 || (spec.depth - 2) % 6 != 0)
    throw InvalidSpecError("depth " + std::to_string(spec.depth) +
                           " is not of the form 6k+2 with k >= 1");
  for (int w : spec.stage_widths)
    if (w < 1) throw InvalidSpecError("stage widths must be positive");
  if (spec.num_classes < 1) throw InvalidSpecError("num_classes must be positive");
  if (spec.in_channels < 1) throw InvalidSpecError("in_channels must be positive");
}

struct ConvDesc {
  std::string name;     // "<prefix>.conv1"
  std::string bn_name;  // "<prefix>.bn1"
  int in = 0, out = 0, kernel = 3, stride = 1, pad = 1;

  int out_size(int in_size) const noexcept { return (in_size + 2 * pad - kernel) / stride + 1; }
  std::int64_t weights() const noexcept {
    return static_cast<std::int64_t>(out) * in * kernel * kernel;
  }
};

struct BlockDesc {
  ConvDesc conv1, conv2;
  std::optional<ConvDesc> shortcut;  // 1x1 projection when shape changes
};

struct Architecture {
  ConvDesc stem;
  std::vector<BlockDesc> blocks;
  int feature_dim = 0;
  int num_classes = 0;
};

inline Architecture describe(const ModelSpec& spec) {
  validate(spec);
  Architecture a;
  a.stem = {"stem.conv", "stem.bn", spec.in_channels, spec.stage_widths[0], 3, 1, 1};
  int width = spec.stage_widths[0];
  for (int s = 0; s < 3; ++s) {
    const int out = spec.stage_widths[static_cast<std::size_t>(s)];
    for (int b = 0; b < spec.blocks_per_stage(); ++b) {
      const std::string p = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
      const int stride = (s > 0 && b == 0) ? 2 : 1;
      BlockDesc blk;
      blk.conv1 = {p + ".conv1", p + ".bn1", width, out, 3, stride, 1};
      blk.conv2 = {p + ".conv2", p + ".bn2", out, out, 3, 1, 1};
      if (stride != 1 || width != out)
        blk.shortcut = ConvDesc{p + ".shortcut.conv", p + ".shortcut.bn", width, out, 1, stride, 0};
      a.blocks.push_back(std::move(blk));
      width = out;
    }
  }
  a.feature_dim = width;
  a.num_classes = spec.num_classes;
  return a;
}

enum class TensorKind : std::uint8_t {
  conv_weight,
  bn_scale,
  bn_shift,
  linear_weight,
  linear_bias,
  bn_running_mean,
  bn_running_var,
};

inline bool is_buffer(TensorKind k) noexcept {
  return k == TensorKind::bn_running_mean || k == TensorKind::bn_running_var;
}

struct TensorDesc {
  std::string name;
  std::vector<int> shape;
  TensorKind kind;
};

// Every tensor of the model in canonical order.
inline std::vector<TensorDesc> tensor_layout(const ModelSpec& spec) {
  const auto arch = describe(spec);
  std::vector<TensorDesc> out;
  auto add_conv = [&](const ConvDesc& c) {
    out.push_back({c.name + ".weight", {c.out, c.in, c.kernel, c.kernel}, TensorKind::conv_weight});
    out.push_back({c.bn_name + ".weight", {c.out}, TensorKind::bn_scale});
    out.push_back({c.bn_name + ".bias", {c.out}, TensorKind::bn_shift});
    out.push_back({c.bn_name + ".running_mean", {c.out}, TensorKind::bn_running_mean});
    out.push_back({c.bn_name + ".running_var", {c.out}, TensorKind::bn_running_var});
  };
  add_conv(arch.stem);
  for (const auto& b : arch.blocks) {
    add_conv(b.conv1);
    add_conv(b.conv2);
    if (b.shortcut) add_conv(*b.shortcut);
  }
  out.push_back({"head.weight", {arch.feature_dim, arch.num_classes}, TensorKind::linear_weight});
  out.push_back({"head.bias", {arch.num_classes}, TensorKind::linear_bias});
  return out;
}

inline std::size_t shape_size(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

template <typename Scalar>
struct Tensor {
  std::string name;
  std::vector<int> shape;
  std::vector<Scalar> values;

  std::size_t size() const noexcept { return values.size(); }
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

// Learnable tensors (theta) plus batch-norm running statistics.
template <typename Scalar>
struct ParamState {
  std::vector<Tensor<Scalar>> params;
  std::vector<Tensor<Scalar>> buffers;

  const Tensor<Scalar>* find(const std::string& name) const {
    for (const auto* list : {&params, &buffers})
      for (const auto& t : *list)
        if (t.name == name) return &t;
    return nullptr;
  }
  Tensor<Scalar>* find(const std::string& name) {
    return const_cast<Tensor<Scalar>*>(std::as_const(*this).find(name));
  }
  friend bool operator==(const ParamState&, const ParamState&) = default;
};

template <typename To, typename From>
ParamState<To> cast_params(const ParamState<From>& in) {
  ParamState<To> out;
  auto conv = [](const std::vector<Tensor<From>>& src, std::vector<Tensor<To>>& dst) {
    for (const auto& t : src)
      dst.push_back({t.name, t.shape, std::vector<To>(t.values.begin(), t.values.end())});
  };
  conv(in.params, out.params);
  conv(in.buffers, out.buffers);
  return out;
}

// Throws ShapeMismatchError naming the first tensor (in canonical order)
// that is missing or shaped differently from what `spec` dictates.
template <typename Scalar>
void check_params(const ModelSpec& spec, const ParamState<Scalar>& state) {
  const auto layout = tensor_layout(spec);
  std::size_t np = 0, nb = 0;
  for (const auto& d : layout) {
    const auto& list = is_buffer(d.kind) ? state.buffers : state.params;
    auto& pos = is_buffer(d.kind) ? nb : np;
    if (pos >= list.size() || list[pos].name != d.name)
      throw ShapeMismatchError(d.name, "missing or out of order for " + spec.name());
    const auto& t = list[pos++];
    if (t.shape != d.shape) throw ShapeMismatchError(d.name, "shape disagrees with " + spec.name());
    if (t.values.size() != shape_size(d.shape))
      throw ShapeMismatchError(d.name, "value count disagrees with shape");
  }
  if (np != state.params.size() || nb != state.buffers.size())
    throw ShapeMismatchError(np < state.params.size() ? state.params[np].name : state.buffers[nb].name,
                             "unexpected extra tensor for " + spec.name());
}

inline constexpr double kInitStddev = 0.01;

// Weights ~ N(0, 0.01^2); biases and BN shifts 0; BN scales 1; running
// statistics (0, 1).
template <typename Scalar>
ParamState<Scalar> init_params(const ModelSpec& spec, std::uint64_t seed) {
  ParamState<Scalar> st;
  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, kInitStddev);
  for (auto& d : tensor_layout(spec)) {
    Tensor<Scalar> t{d.name, d.shape, std::vector<Scalar>(shape_size(d.shape), Scalar(0))};
    switch (d.kind) {
      case TensorKind::conv_weight:
      case TensorKind::linear_weight:
        for (auto& v : t.values) v = static_cast<Scalar>(gauss(rng));
        break;
      case TensorKind::bn_scale:
      case TensorKind::bn_running_var:
        std::fill(t.values.begin(), t.values.end(), Scalar(1));
        break;
      default:
        break;
    }
    (is_buffer(d.kind) ? st.buffers : st.params).push_back(std::move(t));
  }
  return st;
}

template <typename Scalar = float>
ParamState<Scalar> build_resnet(const ModelSpec& spec, std::uint64_t seed) {
  validate(spec);
  return init_params<Scalar>(spec, seed);
}

// Learnable scalars: convolutions, BN affine pairs and the linear head.
template <typename Scalar>
std::int64_t count_params(const ParamState<Scalar>& state) {
  std::int64_t n = 0;
  for (const auto& t : state.params) n += static_cast<std::int64_t>(t.size());
  return n;
}

inline std::int64_t count_params(const ModelSpec& spec) {
  std::int64_t n = 0;
  for (const auto& d : tensor_layout(spec))
    if (!is_buffer(d.kind)) n += static_cast<std::int64_t>(shape_size(d.shape));
  return n;
}

// Multiply-accumulates of all convolutions (projections included) and the
// linear head for one image.
inline std::int64_t count_flops(const ModelSpec& spec, int height = 32, int width = 32,
                                int channels = 3) {
  if (channels != spec.in_channels)
    throw ShapeError("stem.conv", "expects " + std::to_string(spec.in_channels) + " channels, got " +
                                      std::to_string(channels));
  const auto arch = describe(spec);
  std::int64_t flops = 0;
  auto conv = [&](const ConvDesc& c, int h, int w) {
    const int ho = c.out_size(h), wo = c.out_size(w);
    flops += c.weights() * ho * wo;
    return std::pair{ho, wo};
  };
  auto [h, w] = conv(arch.stem, height, width);
  for (const auto& b : arch.blocks) {
    auto [h1, w1] = conv(b.conv1, h, w);
    conv(b.conv2, h1, w1);
    if (b.shortcut) conv(*b.shortcut, h, w);
    h = h1;
    w = w1;
  }
  flops += static_cast<std::int64_t>(arch.feature_dim) * arch.num_classes;
  return flops;
}

// Student branches plus the paired teacher sub-networks.
struct EnsembleSpec {
  ModelSpec student;
  int student_branches = 1;
  std::vector<ModelSpec> teachers;

  void validate(bool pairing = true) const {
    ekd::validate(student);
    if (student_branches < 1) throw ConfigurationError("student needs at least one branch");
    for (const auto& t : teachers) {
      ekd::validate(t);
      if (t.num_classes != student.num_classes)
        throw ConfigurationError("teacher " + t.name() + " has " + std::to_string(t.num_classes) +
                                 " classes, student has " + std::to_string(student.num_classes));
    }
    if (pairing && static_cast<int>(teachers.size()) != student_branches)
      throw PairingError("student has " + std::to_string(student_branches) + " branches but " +
                         std::to_string(teachers.size()) + " teachers were given");
  }
};

}  // namespace ekd
