#pragma once

#include <cmath>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "ekd/data.hpp"
#include "ekd/model.hpp"
#include "ekd/network.hpp"

namespace ekd::testing {

inline ModelSpec tiny_spec(int depth = 8, int classes = 4, std::array<int, 3> widths = {4, 4, 8}) {
  ModelSpec s;
  s.depth = depth;
  s.stage_widths = widths;
  s.num_classes = classes;
  return s;
}

template <typename S>
ImageBatch<S> random_batch(int n, int c, int h, int w, std::uint64_t seed, int classes = 4) {
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_int_distribution<int> lab(0, classes - 1);
  ImageBatch<S> b;
  b.n = n;
  b.c = c;
  b.h = h;
  b.w = w;
  b.data.resize(static_cast<std::size_t>(n) * c * h * w);
  for (auto& v : b.data) v = static_cast<S>(g(rng));
  for (int i = 0; i < n; ++i) {
    b.labels.push_back(lab(rng));
    b.indices.push_back(static_cast<std::size_t>(i));
  }
  return b;
}

inline bool is_bn_scale(const std::string& name) {
  return name.find("bn") != std::string::npos && name.ends_with(".weight");
}

// Parameters far from the N(0, 0.01) init so every path carries signal.
template <typename S>
ParamState<S> random_params(const ModelSpec& spec, std::uint64_t seed, double scale = 0.3) {
  auto st = init_params<S>(spec, seed);
  Rng rng(seed ^ 0xabcdefULL);
  std::normal_distribution<double> g(0.0, scale);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (auto& t : st.params)
    for (auto& v : t.values) v = static_cast<S>(g(rng) + (is_bn_scale(t.name) ? 1.0 : 0.0));
  for (auto& t : st.buffers)
    for (auto& v : t.values) v = static_cast<S>(t.name.ends_with("running_var") ? u(rng) : g(rng));
  return st;
}

template <typename S>
ImageBatch<S> take(const ImageBatch<S>& b, int i) {
  ImageBatch<S> out;
  out.n = 1;
  out.c = b.c;
  out.h = b.h;
  out.w = b.w;
  const std::size_t per = static_cast<std::size_t>(b.c) * b.h * b.w;
  out.data.assign(b.data.begin() + static_cast<std::ptrdiff_t>(i * per),
                  b.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
  out.labels = {b.labels[static_cast<std::size_t>(i)]};
  out.indices = {0};
  return out;
}

// Straight-loop reference forward in inference mode, written against the
// tensor names only.
struct NaiveResNet {
  const ModelSpec& spec;
  const ParamState<double>& st;

  using Map3 = std::vector<double>;  // c*h*w

  const std::vector<double>& v(const std::string& name) const { return st.find(name)->values; }

  Map3 conv(const Map3& x, int cin, int h, int w, const ConvDesc& c, int& ho, int& wo) const {
    ho = (h + 2 * c.pad - c.kernel) / c.stride + 1;
    wo = (w + 2 * c.pad - c.kernel) / c.stride + 1;
    const auto& W = v(c.name + ".weight");
    Map3 y(static_cast<std::size_t>(c.out) * ho * wo, 0.0);
    for (int o = 0; o < c.out; ++o)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double s = 0;
          for (int i = 0; i < cin; ++i)
            for (int ky = 0; ky < c.kernel; ++ky)
              for (int kx = 0; kx < c.kernel; ++kx) {
                const int iy = oy * c.stride - c.pad + ky, ix = ox * c.stride - c.pad + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                s += W[((static_cast<std::size_t>(o) * cin + i) * c.kernel + ky) * c.kernel + kx] *
                     x[(static_cast<std::size_t>(i) * h + iy) * w + ix];
              }
          y[(static_cast<std::size_t>(o) * ho + oy) * wo + ox] = s;
        }
    return y;
  }

  void bn(Map3& x, int c, int hw, const std::string& name) const {
    const auto &g = v(name + ".weight"), &b = v(name + ".bias"), &m = v(name + ".running_mean"),
               &var = v(name + ".running_var");
    for (int ch = 0; ch < c; ++ch)
      for (int p = 0; p < hw; ++p) {
        auto& e = x[static_cast<std::size_t>(ch) * hw + p];
        e = (e - m[ch]) / std::sqrt(var[ch] + kBnEps) * g[ch] + b[ch];
      }
  }

  static void relu(Map3& x) {
    for (auto& e : x) e = std::max(0.0, e);
  }

  // Returns (features, logits) for one image in C×H×W order.
  std::pair<std::vector<double>, std::vector<double>> run(Map3 x, int h, int w) const {
    const auto arch = describe(spec);
    int ho, wo;
    auto cur = conv(x, spec.in_channels, h, w, arch.stem, ho, wo);
    bn(cur, arch.stem.out, ho * wo, arch.stem.bn_name);
    relu(cur);
    h = ho;
    w = wo;
    int ch = arch.stem.out;
    for (const auto& blk : arch.blocks) {
      int h1, w1, h2, w2;
      auto a = conv(cur, ch, h, w, blk.conv1, h1, w1);
      bn(a, blk.conv1.out, h1 * w1, blk.conv1.bn_name);
      relu(a);
      auto o = conv(a, blk.conv1.out, h1, w1, blk.conv2, h2, w2);
      bn(o, blk.conv2.out, h2 * w2, blk.conv2.bn_name);
      Map3 sc = cur;
      if (blk.shortcut) {
        int hs, ws;
        sc = conv(cur, ch, h, w, *blk.shortcut, hs, ws);
        bn(sc, blk.shortcut->out, hs * ws, blk.shortcut->bn_name);
      }
      for (std::size_t i = 0; i < o.size(); ++i) o[i] += sc[i];
      relu(o);
      cur = std::move(o);
      h = h2;
      w = w2;
      ch = blk.conv2.out;
    }
    std::vector<double> feat(static_cast<std::size_t>(ch), 0.0);
    for (int c = 0; c < ch; ++c) {
      for (int p = 0; p < h * w; ++p) feat[c] += cur[static_cast<std::size_t>(c) * h * w + p];
      feat[c] /= h * w;
    }
    const auto &W = v("head.weight"), &B = v("head.bias");
    std::vector<double> logits(static_cast<std::size_t>(spec.num_classes));
    for (int k = 0; k < spec.num_classes; ++k) {
      logits[k] = B[k];
      for (int c = 0; c < ch; ++c) logits[k] += feat[c] * W[static_cast<std::size_t>(c) * spec.num_classes + k];
    }
    return {feat, logits};
  }
};

}  // namespace ekd::testing
