#pragma once

// ResNet forward/backward and the multi-branch ensemble built from it.
// Activations are kept channel-major, C x (N*H*W), so that every
// convolution is one im2col + GEMM and batch norm reduces along rows.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ekd/data.hpp"
#include "ekd/model.hpp"
#include "ekd/outputs.hpp"

namespace ekd {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

enum class Mode { train, eval };

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;

template <typename S>
struct Activation {
  RowMat<S> x;  // C x (n*h*w)
  int n = 0, h = 0, w = 0;
};

// Gradients parallel to ParamState::params.
template <typename S>
using Gradients = std::vector<std::vector<S>>;

template <typename S>
Gradients<S> zero_gradients(const ParamState<S>& st) {
  Gradients<S> g;
  g.reserve(st.params.size());
  for (const auto& t : st.params) g.emplace_back(t.size(), S(0));
  return g;
}

namespace kernels {

template <typename S>
void im2col(const Activation<S>& in, const ConvDesc& c, int ho, int wo, RowMat<S>& col) {
  const int k = c.kernel;
  const std::size_t hw_in = static_cast<std::size_t>(in.h) * in.w;
  const std::size_t hw_out = static_cast<std::size_t>(ho) * wo;
  col.resize(static_cast<Eigen::Index>(c.in) * k * k, static_cast<Eigen::Index>(in.n * hw_out));
  for (int ch = 0; ch < c.in; ++ch)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        S* dst = col.row((ch * k + ky) * k + kx).data();
        for (int img = 0; img < in.n; ++img) {
          const S* src = in.x.row(ch).data() + img * hw_in;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * c.stride - c.pad + ky;
            S* row = dst + img * hw_out + static_cast<std::size_t>(oy) * wo;
            if (iy < 0 || iy >= in.h) {
              std::fill(row, row + wo, S(0));
              continue;
            }
            const S* srow = src + static_cast<std::size_t>(iy) * in.w;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * c.stride - c.pad + kx;
              row[ox] = (ix >= 0 && ix < in.w) ? srow[ix] : S(0);
            }
          }
        }
      }
}

template <typename S>
void col2im(const RowMat<S>& col, const ConvDesc& c, int n, int h, int w, int ho, int wo, RowMat<S>& dx) {
  const int k = c.kernel;
  const std::size_t hw_in = static_cast<std::size_t>(h) * w;
  const std::size_t hw_out = static_cast<std::size_t>(ho) * wo;
  dx.setZero(c.in, static_cast<Eigen::Index>(n * hw_in));
  for (int ch = 0; ch < c.in; ++ch)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const S* src = col.row((ch * k + ky) * k + kx).data();
        for (int img = 0; img < n; ++img) {
          S* dst = dx.row(ch).data() + img * hw_in;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * c.stride - c.pad + ky;
            if (iy < 0 || iy >= h) continue;
            const S* row = src + img * hw_out + static_cast<std::size_t>(oy) * wo;
            S* drow = dst + static_cast<std::size_t>(iy) * w;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * c.stride - c.pad + kx;
              if (ix >= 0 && ix < w) drow[ix] += row[ox];
            }
          }
        }
      }
}

template <typename S>
void conv_forward(const Activation<S>& in, const ConvDesc& c, std::span<const S> weight, Activation<S>& out) {
  const int ho = c.out_size(in.h), wo = c.out_size(in.w);
  RowMat<S> col;
  im2col(in, c, ho, wo, col);
  Eigen::Map<const RowMat<S>> W(weight.data(), c.out, static_cast<Eigen::Index>(c.in) * c.kernel * c.kernel);
  out.n = in.n;
  out.h = ho;
  out.w = wo;
  out.x.resize(c.out, col.cols());
  out.x.noalias() = W * col;
}

// Writes dweight, returns dinput.
template <typename S>
void conv_backward(const Activation<S>& in, const ConvDesc& c, std::span<const S> weight,
                   const RowMat<S>& dout, std::span<S> dweight, RowMat<S>* din) {
  const int ho = c.out_size(in.h), wo = c.out_size(in.w);
  RowMat<S> col;
  im2col(in, c, ho, wo, col);
  const auto kk = static_cast<Eigen::Index>(c.in) * c.kernel * c.kernel;
  Eigen::Map<RowMat<S>> dW(dweight.data(), c.out, kk);
  dW.noalias() = dout * col.transpose();
  if (!din) return;
  Eigen::Map<const RowMat<S>> W(weight.data(), c.out, kk);
  RowMat<S> dcol(kk, dout.cols());
  dcol.noalias() = W.transpose() * dout;
  col2im(dcol, c, in.n, in.h, in.w, ho, wo, *din);
}

template <typename S>
struct BnCache {
  RowMat<S> xhat;
  std::vector<S> inv_std;
};

// Normalizes rows of x in place. Train mode uses batch statistics and
// updates the running buffers; eval mode uses the buffers.
template <typename S>
void bn_forward(RowMat<S>& x, std::span<const S> gamma, std::span<const S> beta, std::span<S> running_mean,
                std::span<S> running_var, BnCache<S>* cache, bool train) {
  const Eigen::Index C = x.rows(), N = x.cols();
  if (cache) {
    cache->xhat.resize(C, N);
    cache->inv_std.resize(static_cast<std::size_t>(C));
  }
  for (Eigen::Index c = 0; c < C; ++c) {
    auto row = x.row(c);
    const auto cu = static_cast<std::size_t>(c);
    S mean, var;
    if (train) {
      mean = row.mean();
      var = (row.array() - mean).square().mean();
      const S unbiased = N > 1 ? var * S(N) / S(N - 1) : var;
      running_mean[cu] = S(1 - kBnMomentum) * running_mean[cu] + S(kBnMomentum) * mean;
      running_var[cu] = S(1 - kBnMomentum) * running_var[cu] + S(kBnMomentum) * unbiased;
    } else {
      mean = running_mean[cu];
      var = running_var[cu];
    }
    const S inv = S(1) / std::sqrt(var + S(kBnEps));
    row.array() = (row.array() - mean) * inv;
    if (cache) {
      cache->xhat.row(c) = row;
      cache->inv_std[cu] = inv;
    }
    row.array() = row.array() * gamma[cu] + beta[cu];
  }
}

// dy is overwritten with dx.
template <typename S>
void bn_backward(RowMat<S>& dy, const BnCache<S>& cache, std::span<const S> gamma, std::span<S> dgamma,
                 std::span<S> dbeta) {
  const Eigen::Index C = dy.rows(), N = dy.cols();
  for (Eigen::Index c = 0; c < C; ++c) {
    const auto cu = static_cast<std::size_t>(c);
    auto g = dy.row(c);
    const auto xh = cache.xhat.row(c);
    const S db = g.sum();
    const S dg = g.dot(xh);
    dgamma[cu] = dg;
    dbeta[cu] = db;
    const S scale = gamma[cu] * cache.inv_std[cu] / S(N);
    g.array() = scale * (S(N) * g.array() - db - xh.array() * dg);
  }
}

template <typename S>
void relu_inplace(RowMat<S>& x) {
  x = x.cwiseMax(S(0));
}

// dy *= (y > 0)
template <typename S>
void relu_backward(RowMat<S>& dy, const RowMat<S>& y) {
  dy = (y.array() > S(0)).select(dy, S(0));
}

}  // namespace kernels

template <typename S>
struct NetOutput {
  Mat<S> features;  // batch x M
  Mat<S> logits;    // batch x K
};

// One CIFAR ResNet owning its parameters. `infer` is const and safe to call
// concurrently; `forward(.., Mode::train)` caches activations for `backward`.
template <typename S>
class ResNet {
 public:
  ResNet(ModelSpec spec, ParamState<S> params) : spec_(spec), arch_(describe(spec)), params_(std::move(params)) {
    check_params(spec_, params_);
    index_params();
  }

  static ResNet initialized(const ModelSpec& spec, std::uint64_t seed) {
    return ResNet(spec, build_resnet<S>(spec, seed));
  }

  const ModelSpec& spec() const noexcept { return spec_; }
  const Architecture& architecture() const noexcept { return arch_; }
  const ParamState<S>& params() const noexcept { return params_; }
  ParamState<S>& params() noexcept { return params_; }

  NetOutput<S> infer(const ImageBatch<S>& batch) const {
    Activation<S> act = to_activation(batch);
    return run(act, nullptr, false);
  }

  NetOutput<S> forward(const ImageBatch<S>& batch, Mode mode) {
    Activation<S> act = to_activation(batch);
    if (mode == Mode::eval) {
      cache_.valid = false;
      return run(act, nullptr, false);
    }
    cache_ = Cache{};
    cache_.input = std::move(act);
    auto out = run(cache_.input, &cache_, true);
    cache_.valid = true;
    return out;
  }

  // Gradient of the loss w.r.t. every parameter, given dL/dlogits for the
  // last train-mode forward.
  Gradients<S> backward(const Mat<S>& dlogits) const {
    if (!cache_.valid) throw Error("backward called without a train-mode forward");
    Gradients<S> g = zero_gradients(params_);
    const auto& feats = cache_.features;
    const Eigen::Index n = feats.rows();
    const int M = arch_.feature_dim, K = arch_.num_classes;

    Eigen::Map<RowMat<S>> dW(g[head_w_].data(), M, K);
    Eigen::Map<const RowMat<S>> W(p(head_w_).data(), M, K);
    dW.noalias() = feats.transpose() * dlogits;
    Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(g[head_b_].data(), K) = dlogits.colwise().sum().transpose();
    Mat<S> dfeat = dlogits * W.transpose();  // n x M

    const auto& last = cache_.block_out.empty() ? cache_.stem_out : cache_.block_out.back();
    const std::size_t hw = static_cast<std::size_t>(last.h) * last.w;
    RowMat<S> d(M, static_cast<Eigen::Index>(n * hw));
    for (int c = 0; c < M; ++c)
      for (Eigen::Index img = 0; img < n; ++img)
        d.row(c).segment(img * static_cast<Eigen::Index>(hw), static_cast<Eigen::Index>(hw))
            .setConstant(dfeat(img, c) / S(hw));

    for (std::size_t b = arch_.blocks.size(); b-- > 0;) {
      const auto& blk = arch_.blocks[b];
      const auto& bc = cache_.blocks[b];
      const auto& bidx = block_idx_[b];
      const auto& in = b == 0 ? cache_.stem_out : cache_.block_out[b - 1];
      kernels::relu_backward(d, cache_.block_out[b].x);

      RowMat<S> dsc = d;
      RowMat<S> dmain = std::move(d);
      bn_back(dmain, bc.bn2, bidx.conv2, g);
      RowMat<S> da1;
      conv_back(bc.a1, blk.conv2, bidx.conv2, dmain, g, &da1);
      kernels::relu_backward(da1, bc.a1.x);
      bn_back(da1, bc.bn1, bidx.conv1, g);
      RowMat<S> din;
      conv_back(in, blk.conv1, bidx.conv1, da1, g, &din);
      if (blk.shortcut) {
        bn_back(dsc, bc.bnsc, bidx.shortcut, g);
        RowMat<S> dsc_in;
        conv_back(in, *blk.shortcut, bidx.shortcut, dsc, g, &dsc_in);
        din += dsc_in;
      } else {
        din += dsc;
      }
      d = std::move(din);
    }
    kernels::relu_backward(d, cache_.stem_out.x);
    bn_back(d, cache_.stem_bn, stem_idx_, g);
    conv_back(cache_.input, arch_.stem, stem_idx_, d, g, nullptr);
    return g;
  }

 private:
  struct ConvIdx {
    std::size_t w = 0, gamma = 0, beta = 0, rmean = 0, rvar = 0;
  };
  struct BlockIdx {
    ConvIdx conv1, conv2, shortcut;
  };
  struct BlockCache {
    kernels::BnCache<S> bn1, bn2, bnsc;
    Activation<S> a1;
  };
  struct Cache {
    bool valid = false;
    Activation<S> input;
    kernels::BnCache<S> stem_bn;
    Activation<S> stem_out;
    std::vector<BlockCache> blocks;
    std::vector<Activation<S>> block_out;
    Mat<S> features;
  };

  std::size_t param_index(const std::string& name) const {
    for (std::size_t i = 0; i < params_.params.size(); ++i)
      if (params_.params[i].name == name) return i;
    throw ShapeMismatchError(name, "missing");
  }
  std::size_t buffer_index(const std::string& name) const {
    for (std::size_t i = 0; i < params_.buffers.size(); ++i)
      if (params_.buffers[i].name == name) return i;
    throw ShapeMismatchError(name, "missing");
  }
  ConvIdx conv_index(const ConvDesc& c) const {
    return {param_index(c.name + ".weight"), param_index(c.bn_name + ".weight"),
            param_index(c.bn_name + ".bias"), buffer_index(c.bn_name + ".running_mean"),
            buffer_index(c.bn_name + ".running_var")};
  }
  void index_params() {
    stem_idx_ = conv_index(arch_.stem);
    block_idx_.clear();
    for (const auto& b : arch_.blocks) {
      BlockIdx bi{conv_index(b.conv1), conv_index(b.conv2), {}};
      if (b.shortcut) bi.shortcut = conv_index(*b.shortcut);
      block_idx_.push_back(bi);
    }
    head_w_ = param_index("head.weight");
    head_b_ = param_index("head.bias");
  }

  std::span<const S> p(std::size_t i) const { return params_.params[i].values; }

  Activation<S> to_activation(const ImageBatch<S>& batch) const {
    if (batch.c != spec_.in_channels)
      throw ShapeError(arch_.stem.name, "expects " + std::to_string(spec_.in_channels) +
                                            " input channels, got " + std::to_string(batch.c));
    if (batch.n < 1 || batch.h < 1 || batch.w < 1) throw ShapeError(arch_.stem.name, "empty input batch");
    if (batch.data.size() != static_cast<std::size_t>(batch.n) * batch.c * batch.h * batch.w)
      throw ShapeError(arch_.stem.name, "batch buffer does not match its declared shape");
    Activation<S> a;
    a.n = batch.n;
    a.h = batch.h;
    a.w = batch.w;
    const std::size_t hw = static_cast<std::size_t>(batch.h) * batch.w;
    a.x.resize(batch.c, static_cast<Eigen::Index>(batch.n * hw));
    for (int i = 0; i < batch.n; ++i)
      for (int c = 0; c < batch.c; ++c)
        std::copy_n(batch.data.data() + (static_cast<std::size_t>(i) * batch.c + c) * hw, hw,
                    a.x.row(c).data() + i * hw);
    return a;
  }

  // conv -> BN (no activation)
  void conv_bn(const Activation<S>& in, const ConvDesc& c, const ConvIdx& idx, Activation<S>& out,
               kernels::BnCache<S>* cache, bool train) const {
    kernels::conv_forward(in, c, p(idx.w), out);
    auto& buf = const_cast<ParamState<S>&>(params_).buffers;  // running stats, written in train mode only
    kernels::bn_forward<S>(out.x, p(idx.gamma), p(idx.beta), buf[idx.rmean].values, buf[idx.rvar].values,
                           cache, train);
  }

  void bn_back(RowMat<S>& d, const kernels::BnCache<S>& cache, const ConvIdx& idx, Gradients<S>& g) const {
    kernels::bn_backward<S>(d, cache, p(idx.gamma), g[idx.gamma], g[idx.beta]);
  }
  void conv_back(const Activation<S>& in, const ConvDesc& c, const ConvIdx& idx, const RowMat<S>& dout,
                 Gradients<S>& g, RowMat<S>* din) const {
    kernels::conv_backward<S>(in, c, p(idx.w), dout, g[idx.w], din);
  }

  NetOutput<S> run(const Activation<S>& input, Cache* cache, bool train) const {
    Activation<S> cur;
    conv_bn(input, arch_.stem, stem_idx_, cur, cache ? &cache->stem_bn : nullptr, train);
    kernels::relu_inplace(cur.x);
    if (cache) {
      cache->stem_out = cur;
      cache->blocks.resize(arch_.blocks.size());
      cache->block_out.resize(arch_.blocks.size());
    }
    for (std::size_t b = 0; b < arch_.blocks.size(); ++b) {
      const auto& blk = arch_.blocks[b];
      const auto& idx = block_idx_[b];
      BlockCache* bc = cache ? &cache->blocks[b] : nullptr;
      Activation<S> a1;
      conv_bn(cur, blk.conv1, idx.conv1, a1, bc ? &bc->bn1 : nullptr, train);
      kernels::relu_inplace(a1.x);
      Activation<S> out;
      conv_bn(a1, blk.conv2, idx.conv2, out, bc ? &bc->bn2 : nullptr, train);
      if (blk.shortcut) {
        Activation<S> sc;
        conv_bn(cur, *blk.shortcut, idx.shortcut, sc, bc ? &bc->bnsc : nullptr, train);
        out.x += sc.x;
      } else {
        out.x += cur.x;
      }
      kernels::relu_inplace(out.x);
      if (bc) {
        bc->a1 = std::move(a1);
        cache->block_out[b] = out;
      }
      cur = std::move(out);
    }

    const int M = arch_.feature_dim, K = arch_.num_classes;
    const std::size_t hw = static_cast<std::size_t>(cur.h) * cur.w;
    NetOutput<S> o;
    o.features.resize(cur.n, M);
    for (int c = 0; c < M; ++c)
      for (int img = 0; img < cur.n; ++img)
        o.features(img, c) = cur.x.row(c).segment(img * static_cast<Eigen::Index>(hw), static_cast<Eigen::Index>(hw)).sum() / S(hw);
    Eigen::Map<const RowMat<S>> W(p(head_w_).data(), M, K);
    Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> bias(p(head_b_).data(), K);
    o.logits.noalias() = o.features * W;
    o.logits.rowwise() += bias;
    if (cache) cache->features = o.features;
    return o;
  }

  ModelSpec spec_;
  Architecture arch_;
  ParamState<S> params_;
  ConvIdx stem_idx_;
  std::vector<BlockIdx> block_idx_;
  std::size_t head_w_ = 0, head_b_ = 0;
  Cache cache_;
};

// N parallel members whose logits are summed: CompNet (identical branches)
// or TeachNet (heterogeneous teachers).
template <typename S>
class Ensemble {
 public:
  Ensemble() = default;
  explicit Ensemble(std::vector<ResNet<S>> members) : members_(std::move(members)) {
    if (members_.empty()) throw ConfigurationError("an ensemble needs at least one member");
    for (const auto& m : members_)
      if (m.spec().num_classes != members_.front().spec().num_classes)
        throw ConfigurationError("ensemble members disagree on num_classes");
  }

  static Ensemble branches(const ModelSpec& spec, int count, std::uint64_t seed, std::uint64_t tag) {
    std::vector<ResNet<S>> m;
    for (int i = 0; i < count; ++i)
      m.push_back(ResNet<S>::initialized(spec, derive_seed(seed, {tag, static_cast<std::uint64_t>(i)})));
    return Ensemble(std::move(m));
  }

  std::size_t size() const noexcept { return members_.size(); }
  int num_classes() const { return members_.front().spec().num_classes; }
  ResNet<S>& operator[](std::size_t i) { return members_[i]; }
  const ResNet<S>& operator[](std::size_t i) const { return members_[i]; }
  std::vector<ResNet<S>>& members() noexcept { return members_; }
  const std::vector<ResNet<S>>& members() const noexcept { return members_; }

  std::vector<ModelSpec> specs() const {
    std::vector<ModelSpec> s;
    for (const auto& m : members_) s.push_back(m.spec());
    return s;
  }
  std::vector<ParamState<S>> states() const {
    std::vector<ParamState<S>> s;
    for (const auto& m : members_) s.push_back(m.params());
    return s;
  }

  BranchOutputs forward(const ImageBatch<S>& batch, Mode mode) {
    std::vector<Eigen::MatrixXd> f, q;
    for (auto& m : members_) {
      auto o = m.forward(batch, mode);
      f.push_back(o.features.template cast<double>());
      q.push_back(o.logits.template cast<double>());
    }
    return combine(std::move(f), std::move(q));
  }

  BranchOutputs infer(const ImageBatch<S>& batch) const {
    std::vector<Eigen::MatrixXd> f, q;
    for (const auto& m : members_) {
      auto o = m.infer(batch);
      f.push_back(o.features.template cast<double>());
      q.push_back(o.logits.template cast<double>());
    }
    return combine(std::move(f), std::move(q));
  }

  std::vector<Gradients<S>> backward(const std::vector<Eigen::MatrixXd>& dlogits) const {
    if (dlogits.size() != members_.size()) throw PairingError("one logit gradient per member expected");
    std::vector<Gradients<S>> g;
    for (std::size_t i = 0; i < members_.size(); ++i)
      g.push_back(members_[i].backward(dlogits[i].template cast<S>()));
    return g;
  }

 private:
  std::vector<ResNet<S>> members_;
};

}  // namespace ekd
