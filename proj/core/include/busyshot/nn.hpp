#pragma once

// Minimal CPU layers with hand-written backward passes. forward() is pure and
// safe for concurrent callers; forward_train() caches what backward() needs.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "busyshot/tensor.hpp"

namespace busyshot::nn {

template <typename T>
struct Parameter {
  std::string name;
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string param_name, std::vector<int> dims, T fill = T(0))
      : name(std::move(param_name)), shape(std::move(dims)) {
    std::size_t count = 1;
    for (int d : shape) count *= static_cast<std::size_t>(d);
    value.assign(count, fill);
    grad.assign(count, T(0));
  }

  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& prefix, int in_channels, int out_channels, int kernel = 3)
      : weight(prefix + ".weight", {out_channels, in_channels, kernel, kernel}),
        bias(prefix + ".bias", {out_channels}),
        in_(in_channels), out_(out_channels), k_(kernel) {}

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return k_; }

  void init_kaiming(std::mt19937_64& rng) {
    const double stddev = std::sqrt(2.0 / (static_cast<double>(in_) * k_ * k_));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : weight.value) v = static_cast<T>(dist(rng));
    std::fill(bias.value.begin(), bias.value.end(), T(0));
  }

  Tensor<T> forward(const Tensor<T>& x) const { return run(x, nullptr); }

  Tensor<T> forward_train(const Tensor<T>& x) {
    n_ = x.n;
    h_ = x.h;
    w_ = x.w;
    return run(x, &col_);
  }

  Tensor<T> backward(const Tensor<T>& grad_out, bool need_input_grad) {
    const std::size_t hw = static_cast<std::size_t>(h_) * w_;
    const std::size_t cols = hw * static_cast<std::size_t>(n_);
    if (col_.cols() != static_cast<Eigen::Index>(cols)) {
      throw ShapeError("conv backward without a cached training forward");
    }
    RowMatrix<T> g(out_, static_cast<Eigen::Index>(cols));
    for (int co = 0; co < out_; ++co) {
      T* row = g.data() + static_cast<std::size_t>(co) * cols;
      for (int in = 0; in < n_; ++in) {
        const T* src = grad_out.plane(in, co).data();
        std::memcpy(row + static_cast<std::size_t>(in) * hw, src, hw * sizeof(T));
      }
    }
    if (weight.trainable) {
      Eigen::Map<RowMatrix<T>> dw(weight.grad.data(), out_, in_ * k_ * k_);
      dw.noalias() += g * col_.transpose();
    }
    if (bias.trainable) {
      for (int co = 0; co < out_; ++co) bias.grad[co] += g.row(co).sum();
    }
    Tensor<T> dx;
    if (need_input_grad) {
      Eigen::Map<const RowMatrix<T>> wmat(weight.value.data(), out_, in_ * k_ * k_);
      RowMatrix<T> dcol = wmat.transpose() * g;
      dx = Tensor<T>(n_, in_, h_, w_);
      col2im(dcol, dx);
    }
    col_.resize(0, 0);
    return dx;
  }

  std::vector<Parameter<T>*> parameters() { return {&weight, &bias}; }

  Parameter<T> weight;
  Parameter<T> bias;

 private:
  Tensor<T> run(const Tensor<T>& x, RowMatrix<T>* cache) const {
    if (x.c != in_) {
      throw ShapeError("conv expects " + std::to_string(in_) + " channels, got " +
                       std::to_string(x.c));
    }
    const std::size_t hw = x.plane_size();
    const std::size_t cols = hw * static_cast<std::size_t>(x.n);
    RowMatrix<T> col(static_cast<Eigen::Index>(in_) * k_ * k_, static_cast<Eigen::Index>(cols));
    im2col(x, col);

    Eigen::Map<const RowMatrix<T>> wmat(weight.value.data(), out_, in_ * k_ * k_);
    RowMatrix<T> out = wmat * col;

    Tensor<T> y(x.n, out_, x.h, x.w);
    for (int co = 0; co < out_; ++co) {
      const T b = bias.value[co];
      const T* row = out.data() + static_cast<std::size_t>(co) * cols;
      for (int in = 0; in < x.n; ++in) {
        T* dst = y.plane(in, co).data();
        const T* src = row + static_cast<std::size_t>(in) * hw;
        for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] + b;
      }
    }
    if (cache) *cache = std::move(col);
    return y;
  }

  void im2col(const Tensor<T>& x, RowMatrix<T>& col) const {
    const int pad = k_ / 2;
    const std::size_t hw = x.plane_size();
    const std::size_t cols = hw * static_cast<std::size_t>(x.n);
    for (int ci = 0; ci < in_; ++ci) {
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          const std::size_t r = (static_cast<std::size_t>(ci) * k_ + ky) * k_ + kx;
          T* row = col.data() + r * cols;
          for (int in = 0; in < x.n; ++in) {
            const T* src = x.plane(in, ci).data();
            T* dst = row + static_cast<std::size_t>(in) * hw;
            for (int y = 0; y < x.h; ++y) {
              const int sy = y + ky - pad;
              T* drow = dst + static_cast<std::size_t>(y) * x.w;
              if (sy < 0 || sy >= x.h) {
                std::fill(drow, drow + x.w, T(0));
                continue;
              }
              const T* srow = src + static_cast<std::size_t>(sy) * x.w;
              const int shift = kx - pad;
              const int x0 = std::max(0, -shift);
              const int x1 = std::min(x.w, x.w - shift);
              for (int xx = 0; xx < x0; ++xx) drow[xx] = T(0);
              for (int xx = x0; xx < x1; ++xx) drow[xx] = srow[xx + shift];
              for (int xx = std::max(x1, x0); xx < x.w; ++xx) drow[xx] = T(0);
            }
          }
        }
      }
    }
  }

  void col2im(const RowMatrix<T>& col, Tensor<T>& dx) const {
    const int pad = k_ / 2;
    const std::size_t hw = dx.plane_size();
    const std::size_t cols = hw * static_cast<std::size_t>(dx.n);
    for (int ci = 0; ci < in_; ++ci) {
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          const std::size_t r = (static_cast<std::size_t>(ci) * k_ + ky) * k_ + kx;
          const T* row = col.data() + r * cols;
          for (int in = 0; in < dx.n; ++in) {
            T* dst = dx.plane(in, ci).data();
            const T* src = row + static_cast<std::size_t>(in) * hw;
            for (int y = 0; y < dx.h; ++y) {
              const int sy = y + ky - pad;
              if (sy < 0 || sy >= dx.h) continue;
              const T* srow = src + static_cast<std::size_t>(y) * dx.w;
              T* drow = dst + static_cast<std::size_t>(sy) * dx.w;
              const int shift = kx - pad;
              const int x0 = std::max(0, -shift);
              const int x1 = std::min(dx.w, dx.w - shift);
              for (int xx = x0; xx < x1; ++xx) drow[xx + shift] += srow[xx];
            }
          }
        }
      }
    }
  }

  int in_ = 0;
  int out_ = 0;
  int k_ = 3;
  int n_ = 0;
  int h_ = 0;
  int w_ = 0;
  RowMatrix<T> col_;
};

/// Per-sample normalization over channel groups, with per-channel affine.
template <typename T>
class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(const std::string& prefix, int channels, int groups, double eps = 1e-5)
      : gamma(prefix + ".gamma", {channels}, T(1)),
        beta(prefix + ".beta", {channels}, T(0)),
        channels_(channels), groups_(groups), eps_(eps) {
    if (groups <= 0 || channels % groups != 0) {
      throw ConfigError("group count " + std::to_string(groups) + " does not divide " +
                        std::to_string(channels) + " channels");
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const { return run(x, nullptr, nullptr); }

  Tensor<T> forward_train(const Tensor<T>& x) {
    xhat_ = Tensor<T>(x.n, x.c, x.h, x.w);
    return run(x, &xhat_, &inv_std_);
  }

  Tensor<T> backward(const Tensor<T>& grad_out, bool need_input_grad) {
    if (xhat_.empty()) throw ShapeError("group norm backward without cached forward");
    const int per_group = channels_ / groups_;
    const std::size_t hw = xhat_.plane_size();
    const double count = static_cast<double>(per_group) * static_cast<double>(hw);
    Tensor<T> dx;
    if (need_input_grad) dx = Tensor<T>(xhat_.n, xhat_.c, xhat_.h, xhat_.w);
    for (int in = 0; in < xhat_.n; ++in) {
      for (int g = 0; g < groups_; ++g) {
        double sum_dxhat = 0.0;
        double sum_dxhat_xhat = 0.0;
        for (int cc = 0; cc < per_group; ++cc) {
          const int ch = g * per_group + cc;
          const T* go = grad_out.plane(in, ch).data();
          const T* xh = xhat_.plane(in, ch).data();
          double dg = 0.0;
          double db = 0.0;
          for (std::size_t i = 0; i < hw; ++i) {
            dg += static_cast<double>(go[i]) * xh[i];
            db += go[i];
          }
          if (gamma.trainable) gamma.grad[ch] += static_cast<T>(dg);
          if (beta.trainable) beta.grad[ch] += static_cast<T>(db);
          sum_dxhat += db * gamma.value[ch];
          sum_dxhat_xhat += dg * gamma.value[ch];
        }
        if (!need_input_grad) continue;
        const double inv = inv_std_[static_cast<std::size_t>(in) * groups_ + g];
        const double mean_dxhat = sum_dxhat / count;
        const double mean_dxhat_xhat = sum_dxhat_xhat / count;
        for (int cc = 0; cc < per_group; ++cc) {
          const int ch = g * per_group + cc;
          const double ga = gamma.value[ch];
          const T* go = grad_out.plane(in, ch).data();
          const T* xh = xhat_.plane(in, ch).data();
          T* d = dx.plane(in, ch).data();
          for (std::size_t i = 0; i < hw; ++i) {
            d[i] = static_cast<T>(inv * (go[i] * ga - mean_dxhat - xh[i] * mean_dxhat_xhat));
          }
        }
      }
    }
    xhat_ = Tensor<T>();
    return dx;
  }

  std::vector<Parameter<T>*> parameters() { return {&gamma, &beta}; }

  Parameter<T> gamma;
  Parameter<T> beta;

 private:
  Tensor<T> run(const Tensor<T>& x, Tensor<T>* xhat, std::vector<T>* inv_std) const {
    if (x.c != channels_) throw ShapeError("group norm channel mismatch");
    const int per_group = channels_ / groups_;
    const std::size_t hw = x.plane_size();
    const std::size_t len = hw * per_group;
    const double count = static_cast<double>(len);
    Tensor<T> y(x.n, x.c, x.h, x.w);
    if (inv_std) inv_std->assign(static_cast<std::size_t>(x.n) * groups_, T(0));
    for (int in = 0; in < x.n; ++in) {
      for (int g = 0; g < groups_; ++g) {
        const T* base = x.plane(in, g * per_group).data();
        double sum = 0.0;
        for (std::size_t i = 0; i < len; ++i) sum += base[i];
        const double mean = sum / count;
        double var = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
          const double d = base[i] - mean;
          var += d * d;
        }
        var /= count;
        const double inv = 1.0 / std::sqrt(var + eps_);
        if (inv_std) (*inv_std)[static_cast<std::size_t>(in) * groups_ + g] = static_cast<T>(inv);
        for (int cc = 0; cc < per_group; ++cc) {
          const int ch = g * per_group + cc;
          const T ga = gamma.value[ch];
          const T be = beta.value[ch];
          const T* src = x.plane(in, ch).data();
          T* dst = y.plane(in, ch).data();
          T* xh = xhat ? xhat->plane(in, ch).data() : nullptr;
          for (std::size_t i = 0; i < hw; ++i) {
            const T v = static_cast<T>((src[i] - mean) * inv);
            if (xh) xh[i] = v;
            dst[i] = ga * v + be;
          }
        }
      }
    }
    return y;
  }

  int channels_ = 0;
  int groups_ = 1;
  double eps_ = 1e-5;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
};

template <typename T>
class ReLU {
 public:
  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> y = x;
    for (auto& v : y.data) v = v > T(0) ? v : T(0);
    return y;
  }

  Tensor<T> forward_train(const Tensor<T>& x) {
    active_.assign(x.size(), 0);
    for (std::size_t i = 0; i < x.size(); ++i) active_[i] = x.data[i] > T(0);
    return forward(x);
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    Tensor<T> dx = grad_out;
    for (std::size_t i = 0; i < dx.size(); ++i) {
      if (!active_[i]) dx.data[i] = T(0);
    }
    active_.clear();
    return dx;
  }

 private:
  std::vector<unsigned char> active_;
};

/// 2x2 max pooling with stride 2; spatial dims must be even.
template <typename T>
class MaxPool2 {
 public:
  Tensor<T> forward(const Tensor<T>& x) const { return run(x, nullptr); }

  Tensor<T> forward_train(const Tensor<T>& x) {
    in_n_ = x.n;
    in_c_ = x.c;
    in_h_ = x.h;
    in_w_ = x.w;
    return run(x, &argmax_);
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    Tensor<T> dx(in_n_, in_c_, in_h_, in_w_);
    const std::size_t out_plane = grad_out.plane_size();
    std::size_t o = 0;
    for (int in = 0; in < in_n_; ++in) {
      for (int ch = 0; ch < in_c_; ++ch) {
        T* dst = dx.plane(in, ch).data();
        for (std::size_t i = 0; i < out_plane; ++i, ++o) dst[argmax_[o]] += grad_out.data[o];
      }
    }
    argmax_.clear();
    return dx;
  }

 private:
  Tensor<T> run(const Tensor<T>& x, std::vector<unsigned>* argmax) const {
    if (x.h % 2 != 0 || x.w % 2 != 0) {
      throw ShapeError("max pool needs even spatial dims, got " + x.shape_string());
    }
    Tensor<T> y(x.n, x.c, x.h / 2, x.w / 2);
    if (argmax) argmax->assign(y.size(), 0);
    std::size_t o = 0;
    for (int in = 0; in < x.n; ++in) {
      for (int ch = 0; ch < x.c; ++ch) {
        const T* src = x.plane(in, ch).data();
        for (int y0 = 0; y0 < y.h; ++y0) {
          for (int x0 = 0; x0 < y.w; ++x0, ++o) {
            const int base = 2 * y0 * x.w + 2 * x0;
            int best = base;
            if (src[base + 1] > src[best]) best = base + 1;
            if (src[base + x.w] > src[best]) best = base + x.w;
            if (src[base + x.w + 1] > src[best]) best = base + x.w + 1;
            y.data[o] = src[best];
            if (argmax) (*argmax)[o] = static_cast<unsigned>(best);
          }
        }
      }
    }
    return y;
  }

  std::vector<unsigned> argmax_;
  int in_n_ = 0;
  int in_c_ = 0;
  int in_h_ = 0;
  int in_w_ = 0;
};

template <typename T>
class GlobalAvgPool {
 public:
  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> y(x.n, x.c, 1, 1);
    const double denom = static_cast<double>(x.plane_size());
    for (int in = 0; in < x.n; ++in) {
      for (int ch = 0; ch < x.c; ++ch) {
        double s = 0.0;
        for (T v : x.plane(in, ch)) s += v;
        y.at(in, ch, 0, 0) = static_cast<T>(s / denom);
      }
    }
    return y;
  }

  Tensor<T> forward_train(const Tensor<T>& x) {
    h_ = x.h;
    w_ = x.w;
    return forward(x);
  }

  Tensor<T> backward(const Tensor<T>& grad_out) const {
    Tensor<T> dx(grad_out.n, grad_out.c, h_, w_);
    const T scale = T(1) / static_cast<T>(static_cast<std::size_t>(h_) * w_);
    for (int in = 0; in < grad_out.n; ++in) {
      for (int ch = 0; ch < grad_out.c; ++ch) {
        const T g = grad_out.at(in, ch, 0, 0) * scale;
        for (T& v : dx.plane(in, ch)) v = g;
      }
    }
    return dx;
  }

 private:
  int h_ = 0;
  int w_ = 0;
};

/// Fully connected layer over flattened N x C x 1 x 1 inputs.
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& prefix, int in_features, int out_features)
      : weight(prefix + ".weight", {out_features, in_features}),
        bias(prefix + ".bias", {out_features}),
        in_(in_features), out_(out_features) {}

  int in_features() const { return in_; }
  int out_features() const { return out_; }

  void init_uniform(std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : weight.value) v = static_cast<T>(dist(rng));
    std::fill(bias.value.begin(), bias.value.end(), T(0));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    if (static_cast<int>(x.sample_size()) != in_) {
      throw ShapeError("linear layer expects " + std::to_string(in_) + " features");
    }
    Eigen::Map<const RowMatrix<T>> xin(x.data.data(), x.n, in_);
    Eigen::Map<const RowMatrix<T>> wmat(weight.value.data(), out_, in_);
    Tensor<T> y(x.n, out_, 1, 1);
    Eigen::Map<RowMatrix<T>> yout(y.data.data(), x.n, out_);
    yout.noalias() = xin * wmat.transpose();
    for (int in = 0; in < x.n; ++in) {
      for (int o = 0; o < out_; ++o) yout(in, o) += bias.value[o];
    }
    return y;
  }

  Tensor<T> forward_train(const Tensor<T>& x) {
    input_ = x;
    return forward(x);
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    Eigen::Map<const RowMatrix<T>> g(grad_out.data.data(), grad_out.n, out_);
    Eigen::Map<const RowMatrix<T>> xin(input_.data.data(), input_.n, in_);
    Eigen::Map<const RowMatrix<T>> wmat(weight.value.data(), out_, in_);
    if (weight.trainable) {
      Eigen::Map<RowMatrix<T>> dw(weight.grad.data(), out_, in_);
      dw.noalias() += g.transpose() * xin;
    }
    if (bias.trainable) {
      for (int o = 0; o < out_; ++o) bias.grad[o] += g.col(o).sum();
    }
    Tensor<T> dx(input_.n, input_.c, input_.h, input_.w);
    Eigen::Map<RowMatrix<T>> dxm(dx.data.data(), input_.n, in_);
    dxm.noalias() = g * wmat;
    input_ = Tensor<T>();
    return dx;
  }

  std::vector<Parameter<T>*> parameters() { return {&weight, &bias}; }

  Parameter<T> weight;
  Parameter<T> bias;

 private:
  int in_ = 0;
  int out_ = 0;
  Tensor<T> input_;
};

}  // namespace busyshot::nn
