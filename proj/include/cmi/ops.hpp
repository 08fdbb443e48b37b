#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cmi/autograd.hpp"
#include "cmi/gemm.hpp"
#include "cmi/tensor.hpp"

namespace cmi {

struct Conv2dOptions {
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 0, pad_w = 0;
};

struct Pool2dOptions {
  std::size_t window_h = 2, window_w = 2;
  std::size_t stride_h = 2, stride_w = 2;
  std::size_t pad_h = 0, pad_w = 0;
};

// floor((in + 2*pad - kernel) / stride) + 1, or a StructuralError when the
// padded extent cannot hold the kernel.
inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                   std::size_t pad, const char* op) {
  require(kernel >= 1 && stride >= 1, std::string(op) + ": kernel and stride must be >= 1");
  const std::size_t padded = in + 2 * pad;
  if (padded < kernel)
    throw StructuralError(std::string(op) + ": padded extent " + std::to_string(padded) +
                          " is smaller than kernel extent " + std::to_string(kernel) +
                          " (non-positive output extent)");
  return (padded - kernel) / stride + 1;
}

namespace detail {

struct ConvGeometry {
  std::size_t cin, h, w, kh, kw, ho, wo;
  Conv2dOptions opt;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t pixels() const { return ho * wo; }
  bool is_pointwise() const {
    return kh == 1 && kw == 1 && opt.stride_h == 1 && opt.stride_w == 1 && opt.pad_h == 0 &&
           opt.pad_w == 0;
  }
};

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols, std::size_t ld) {
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = cols + ((c * g.kh + i) * g.kw + j) * ld;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.opt.stride_h + i) - static_cast<long>(g.opt.pad_h);
          T* dst = row + oh * g.wo;
          if (ih < 0 || ih >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.wo, T{0});
            continue;
          }
          const T* src = img + (c * g.h + static_cast<std::size_t>(ih)) * g.w;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw =
                static_cast<long>(ow * g.opt.stride_w + j) - static_cast<long>(g.opt.pad_w);
            dst[ow] = (iw < 0 || iw >= static_cast<long>(g.w)) ? T{0} : src[iw];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* img, std::size_t ld) {
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = cols + ((c * g.kh + i) * g.kw + j) * ld;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.opt.stride_h + i) - static_cast<long>(g.opt.pad_h);
          if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
          T* dst = img + (c * g.h + static_cast<std::size_t>(ih)) * g.w;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw =
                static_cast<long>(ow * g.opt.stride_w + j) - static_cast<long>(g.opt.pad_w);
            if (iw >= 0 && iw < static_cast<long>(g.w)) dst[iw] += row[oh * g.wo + ow];
          }
        }
      }
}

// Columns for the whole batch: [K, N*P], image n in columns [n*P, (n+1)*P).
template <typename T>
std::vector<T> batch_cols(const T* x, const ConvGeometry& g, std::size_t N) {
  const std::size_t K = g.patch(), P = g.pixels(), L = N * P, in_img = g.cin * g.h * g.w;
  std::vector<T> cols(K * L);
  if (g.is_pointwise()) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < K; ++c)
        std::copy_n(x + n * in_img + c * P, P, cols.data() + c * L + n * P);
  } else {
    for (std::size_t n = 0; n < N; ++n) im2col(x + n * in_img, g, cols.data() + n * P, L);
  }
  return cols;
}

}  // namespace detail

// Cross-correlation. `bias` may be an undefined Var for a bias-free conv.
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weights, const Var<T>& bias,
              const Conv2dOptions& opt = {}) {
  const auto& x = input.value();
  const auto& w = weights.value();
  require(x.rank() == 4, "conv2d: input must be rank 4 (N,C,H,W), got " + shape_str(x.shape()));
  require(w.rank() == 4, "conv2d: weights must be rank 4 (Cout,Cin,kH,kW), got " +
                             shape_str(w.shape()));
  require(x.dim(1) == w.dim(1), "conv2d: input channels " + std::to_string(x.dim(1)) +
                                    " disagree with weight channels " + std::to_string(w.dim(1)));
  const std::size_t N = x.dim(0), cout = w.dim(0);
  if (bias.defined())
    require(bias.value().rank() == 1 && bias.value().dim(0) == cout,
            "conv2d: bias must have shape [" + std::to_string(cout) + "]");

  detail::ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), w.dim(2), w.dim(3), 0, 0, opt};
  g.ho = conv_out_extent(g.h, g.kh, opt.stride_h, opt.pad_h, "conv2d");
  g.wo = conv_out_extent(g.w, g.kw, opt.stride_w, opt.pad_w, "conv2d");

  const std::size_t K = g.patch(), P = g.pixels(), L = N * P;
  std::vector<T> y(cout * L, T{0});
  {
    const auto cols = detail::batch_cols(x.data(), g, N);
    if (bias.defined())
      for (std::size_t oc = 0; oc < cout; ++oc) std::fill_n(y.data() + oc * L, L, bias.value()[oc]);
    gemm::nn(cout, L, K, w.data(), cols.data(), y.data());
  }
  Tensor<T> out({N, cout, g.ho, g.wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oc = 0; oc < cout; ++oc)
      std::copy_n(y.data() + oc * L + n * P, P, out.data() + (n * cout + oc) * P);

  std::vector<Var<T>> inputs{input, weights};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return make_result<T>(
      std::move(out), std::move(inputs),
      [g, N, cout, has_bias](Node<T>& self) {
        Node<T>& xin = *self.parents[0];
        Node<T>& wn = *self.parents[1];
        const std::size_t K = g.patch(), P = g.pixels(), L = N * P, in_img = g.cin * g.h * g.w;
        std::vector<T> dy(cout * L);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t oc = 0; oc < cout; ++oc)
            std::copy_n(self.grad.data() + (n * cout + oc) * P, P, dy.data() + oc * L + n * P);
        if (wn.requires_grad) {
          const auto cols = detail::batch_cols(xin.value.data(), g, N);
          gemm::nt(cout, K, L, dy.data(), cols.data(), wn.grad_buffer().data());
        }
        if (xin.requires_grad) {
          std::vector<T> dcols(K * L, T{0});
          gemm::tn(K, L, cout, wn.value.data(), dy.data(), dcols.data());
          T* dx = xin.grad_buffer().data();
          for (std::size_t n = 0; n < N; ++n) {
            if (g.is_pointwise()) {
              for (std::size_t c = 0; c < K; ++c) {
                const T* src = dcols.data() + c * L + n * P;
                T* dst = dx + n * in_img + c * P;
                for (std::size_t p = 0; p < P; ++p) dst[p] += src[p];
              }
            } else {
              detail::col2im_add(dcols.data() + n * P, g, dx + n * in_img, L);
            }
          }
        }
        if (has_bias && self.parents[2]->requires_grad) {
          T* db = self.parents[2]->grad_buffer().data();
          for (std::size_t oc = 0; oc < cout; ++oc) {
            T acc{0};
            for (std::size_t l = 0; l < L; ++l) acc += dy[oc * L + l];
            db[oc] += acc;
          }
        }
      },
      "conv2d");
}

// Window maximum over non-padded positions. Ties resolve to the first element
// in row-major scan order, which also receives the whole gradient.
template <typename T>
Var<T> maxpool2d(const Var<T>& input, const Pool2dOptions& opt) {
  const auto& x = input.value();
  require(x.rank() == 4, "maxpool2d: input must be rank 4, got " + shape_str(x.shape()));
  require(opt.pad_h < opt.window_h && opt.pad_w < opt.window_w,
          "maxpool2d: padding must be smaller than the window");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = conv_out_extent(H, opt.window_h, opt.stride_h, opt.pad_h, "maxpool2d");
  const std::size_t Wo = conv_out_extent(W, opt.window_w, opt.stride_w, opt.pad_w, "maxpool2d");
  Tensor<T> out({N, C, Ho, Wo});
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* plane = x.data() + nc * H * W;
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_idx = 0;
        bool found = false;
        for (std::size_t i = 0; i < opt.window_h; ++i) {
          const long ih = static_cast<long>(oh * opt.stride_h + i) - static_cast<long>(opt.pad_h);
          if (ih < 0 || ih >= static_cast<long>(H)) continue;
          for (std::size_t j = 0; j < opt.window_w; ++j) {
            const long iw = static_cast<long>(ow * opt.stride_w + j) - static_cast<long>(opt.pad_w);
            if (iw < 0 || iw >= static_cast<long>(W)) continue;
            const std::size_t idx = static_cast<std::size_t>(ih) * W + static_cast<std::size_t>(iw);
            if (!found || plane[idx] > best) {
              best = plane[idx];
              best_idx = idx;
              found = true;
            }
          }
        }
        const std::size_t o = (nc * Ho + oh) * Wo + ow;
        out[o] = best;
        argmax[o] = nc * H * W + best_idx;
      }
  }
  return make_result<T>(
      std::move(out), {input},
      [argmax = std::move(argmax)](Node<T>& self) {
        auto& dx = self.parents[0]->grad_buffer();
        for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += self.grad[o];
      },
      "maxpool2d");
}

// Window mean over the non-padded positions it covers.
template <typename T>
Var<T> avgpool2d(const Var<T>& input, const Pool2dOptions& opt) {
  const auto& x = input.value();
  require(x.rank() == 4, "avgpool2d: input must be rank 4, got " + shape_str(x.shape()));
  require(opt.pad_h < opt.window_h && opt.pad_w < opt.window_w,
          "avgpool2d: padding must be smaller than the window");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = conv_out_extent(H, opt.window_h, opt.stride_h, opt.pad_h, "avgpool2d");
  const std::size_t Wo = conv_out_extent(W, opt.window_w, opt.stride_w, opt.pad_w, "avgpool2d");

  auto window = [=](std::size_t oh, std::size_t ow) {
    const long h0 = static_cast<long>(oh * opt.stride_h) - static_cast<long>(opt.pad_h);
    const long w0 = static_cast<long>(ow * opt.stride_w) - static_cast<long>(opt.pad_w);
    const std::size_t hb = static_cast<std::size_t>(std::max(h0, 0L));
    const std::size_t wb = static_cast<std::size_t>(std::max(w0, 0L));
    const std::size_t he = static_cast<std::size_t>(std::min(h0 + static_cast<long>(opt.window_h), static_cast<long>(H)));
    const std::size_t we = static_cast<std::size_t>(std::min(w0 + static_cast<long>(opt.window_w), static_cast<long>(W)));
    return std::array<std::size_t, 4>{hb, he, wb, we};
  };

  Tensor<T> out({N, C, Ho, Wo});
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* plane = x.data() + nc * H * W;
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        const auto [hb, he, wb, we] = window(oh, ow);
        T acc{0};
        for (std::size_t h = hb; h < he; ++h)
          for (std::size_t w = wb; w < we; ++w) acc += plane[h * W + w];
        out[(nc * Ho + oh) * Wo + ow] = acc / static_cast<T>((he - hb) * (we - wb));
      }
  }
  return make_result<T>(
      std::move(out), {input},
      [=](Node<T>& self) {
        auto& dx = self.parents[0]->grad_buffer();
        for (std::size_t nc = 0; nc < N * C; ++nc)
          for (std::size_t oh = 0; oh < Ho; ++oh)
            for (std::size_t ow = 0; ow < Wo; ++ow) {
              const auto [hb, he, wb, we] = window(oh, ow);
              const T g = self.grad[(nc * Ho + oh) * Wo + ow] / static_cast<T>((he - hb) * (we - wb));
              for (std::size_t h = hb; h < he; ++h)
                for (std::size_t w = wb; w < we; ++w) dx[nc * H * W + h * W + w] += g;
            }
      },
      "avgpool2d");
}

// (N,C,H,W) -> (N,C) spatial mean.
template <typename T>
Var<T> global_avg_pool(const Var<T>& input) {
  const auto& x = input.value();
  require(x.rank() == 4, "global_avg_pool: input must be rank 4, got " + shape_str(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  require(HW > 0, "global_avg_pool: empty spatial extent");
  Tensor<T> out({N, C});
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    T acc{0};
    for (std::size_t i = 0; i < HW; ++i) acc += x[nc * HW + i];
    out[nc] = acc / static_cast<T>(HW);
  }
  return make_result<T>(
      std::move(out), {input},
      [N, C, HW](Node<T>& self) {
        auto& dx = self.parents[0]->grad_buffer();
        for (std::size_t nc = 0; nc < N * C; ++nc) {
          const T g = self.grad[nc] / static_cast<T>(HW);
          for (std::size_t i = 0; i < HW; ++i) dx[nc * HW + i] += g;
        }
      },
      "global_avg_pool");
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& inputs) {
  require(!inputs.empty(), "concat_channels: no inputs");
  const auto& first = inputs.front().value();
  require(first.rank() == 4, "concat_channels: inputs must be rank 4");
  const std::size_t N = first.dim(0), H = first.dim(2), W = first.dim(3);
  std::vector<std::size_t> channels;
  std::size_t total = 0;
  for (const auto& v : inputs) {
    const auto& t = v.value();
    require(t.rank() == 4 && t.dim(0) == N && t.dim(2) == H && t.dim(3) == W,
            "concat_channels: batch/spatial mismatch " + shape_str(first.shape()) + " vs " +
                shape_str(t.shape()));
    channels.push_back(t.dim(1));
    total += t.dim(1);
  }
  const std::size_t HW = H * W;
  Tensor<T> out({N, total, H, W});
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const T* src = inputs[i].value().data() + n * channels[i] * HW;
      std::copy(src, src + channels[i] * HW, out.data() + (n * total + offset) * HW);
      offset += channels[i];
    }
  }
  return make_result<T>(
      std::move(out), inputs,
      [N, HW, total, channels](Node<T>& self) {
        std::size_t offset = 0;
        for (std::size_t i = 0; i < channels.size(); ++i) {
          Node<T>& p = *self.parents[i];
          if (p.requires_grad) {
            T* dx = p.grad_buffer().data();
            for (std::size_t n = 0; n < N; ++n) {
              const T* g = self.grad.data() + (n * total + offset) * HW;
              T* d = dx + n * channels[i] * HW;
              for (std::size_t k = 0; k < channels[i] * HW; ++k) d[k] += g[k];
            }
          }
          offset += channels[i];
        }
      },
      "concat_channels");
}

// Channels [begin, begin+count) of an (N,C,H,W) tensor.
template <typename T>
Var<T> slice_channels(const Var<T>& input, std::size_t begin, std::size_t count) {
  const auto& x = input.value();
  require(x.rank() == 4, "slice_channels: input must be rank 4");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  require(begin + count <= C && count > 0, "slice_channels: range out of bounds");
  Tensor<T> out({N, count, x.dim(2), x.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    const T* src = x.data() + (n * C + begin) * HW;
    std::copy(src, src + count * HW, out.data() + n * count * HW);
  }
  return make_result<T>(
      std::move(out), {input},
      [=](Node<T>& self) {
        auto& dx = self.parents[0]->grad_buffer();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t k = 0; k < count * HW; ++k)
            dx[(n * C + begin) * HW + k] += self.grad[n * count * HW + k];
      },
      "slice_channels");
}

// (N,D) x (D,K) + (K)
template <typename T>
Var<T> dense(const Var<T>& input, const Var<T>& weights, const Var<T>& bias) {
  const auto& x = input.value();
  const auto& w = weights.value();
  require(x.rank() == 2 && w.rank() == 2, "dense: expected (N,D) input and (D,K) weights");
  require(x.dim(1) == w.dim(0), "dense: inner dimensions disagree: " + shape_str(x.shape()) +
                                    " x " + shape_str(w.shape()));
  const std::size_t N = x.dim(0), D = x.dim(1), K = w.dim(1);
  require(!bias.defined() || (bias.value().rank() == 1 && bias.value().dim(0) == K),
          "dense: bias must have shape [" + std::to_string(K) + "]");
  Tensor<T> out({N, K});
  if (bias.defined())
    for (std::size_t n = 0; n < N; ++n)
      std::copy(bias.value().data(), bias.value().data() + K, out.data() + n * K);
  gemm::nn(N, K, D, x.data(), w.data(), out.data());
  std::vector<Var<T>> inputs{input, weights};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(
      std::move(out), std::move(inputs),
      [N, D, K](Node<T>& self) {
        Node<T>& xn = *self.parents[0];
        Node<T>& wn = *self.parents[1];
        if (xn.requires_grad) gemm::nt(N, D, K, self.grad.data(), wn.value.data(), xn.grad_buffer().data());
        if (wn.requires_grad) gemm::tn(D, K, N, xn.value.data(), self.grad.data(), wn.grad_buffer().data());
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
          T* db = self.parents[2]->grad_buffer().data();
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t k = 0; k < K; ++k) db[k] += self.grad[n * K + k];
        }
      },
      "dense");
}

template <typename T>
Var<T> flatten(const Var<T>& input) {
  const auto& x = input.value();
  require(x.rank() >= 1, "flatten: scalar input");
  const std::size_t N = x.dim(0);
  return make_result<T>(
      x.reshaped({N, N ? x.size() / N : 0}), {input},
      [](Node<T>& self) {
        auto& dx = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[i];
      },
      "flatten");
}

enum class NormMode { train, eval };

template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  explicit BatchNormState(std::size_t channels = 0)
      : running_mean({channels}, T{0}), running_var({channels}, T{1}) {}
};

// Per-channel normalization. Train mode uses batch statistics (biased
// variance) and updates the running estimates with an exponential moving
// average; eval mode normalizes with the running estimates.
template <typename T>
Var<T> batchnorm(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta,
                 BatchNormState<T>& state, NormMode mode, T eps = T(1e-3),
                 T momentum = T(0.1)) {
  const auto& x = input.value();
  require(x.rank() == 4, "batchnorm: input must be rank 4, got " + shape_str(x.shape()));
  require(eps > T{0}, "batchnorm: eps must be positive");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const std::size_t M = N * HW;
  require(M >= 1, "batchnorm: zero-size batch");
  require(gamma.value().size() == C && beta.value().size() == C &&
              state.running_mean.size() == C && state.running_var.size() == C,
          "batchnorm: parameter size does not match channel count " + std::to_string(C));

  std::vector<T> mean(C), inv_std(C);
  if (mode == NormMode::train) {
    for (std::size_t c = 0; c < C; ++c) {
      T s{0};
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
      }
      const T mu = s / static_cast<T>(M);
      T ss{0};
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const T var = ss / static_cast<T>(M);
      mean[c] = mu;
      inv_std[c] = T{1} / std::sqrt(var + eps);
      const T unbiased = M > 1 ? ss / static_cast<T>(M - 1) : var;
      state.running_mean[c] = (T{1} - momentum) * state.running_mean[c] + momentum * mu;
      state.running_var[c] = (T{1} - momentum) * state.running_var[c] + momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = T{1} / std::sqrt(state.running_var[c] + eps);
    }
  }

  Tensor<T> xhat(x.shape());
  Tensor<T> out(x.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * HW;
      const T g = gamma.value()[c], b = beta.value()[c];
      for (std::size_t i = 0; i < HW; ++i) {
        const T h = (x[base + i] - mean[c]) * inv_std[c];
        xhat[base + i] = h;
        out[base + i] = g * h + b;
      }
    }

  const bool batch_stats = mode == NormMode::train;
  return make_result<T>(
      std::move(out), {input, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        Node<T>& xn = *self.parents[0];
        Node<T>& gn = *self.parents[1];
        Node<T>& bn = *self.parents[2];
        for (std::size_t c = 0; c < C; ++c) {
          T sum_dy{0}, sum_dy_xhat{0};
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t base = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              sum_dy += self.grad[base + i];
              sum_dy_xhat += self.grad[base + i] * xhat[base + i];
            }
          }
          if (gn.requires_grad) gn.grad_buffer()[c] += sum_dy_xhat;
          if (bn.requires_grad) bn.grad_buffer()[c] += sum_dy;
          if (!xn.requires_grad) continue;
          auto& dx = xn.grad_buffer();
          const T g = gn.value[c];
          const T Mt = static_cast<T>(M);
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t base = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              const T dy = self.grad[base + i];
              if (batch_stats)
                dx[base + i] += g * inv_std[c] / Mt * (Mt * dy - sum_dy - xhat[base + i] * sum_dy_xhat);
              else
                dx[base + i] += g * inv_std[c] * dy;
            }
          }
        }
      },
      "batchnorm");
}

// Inverted dropout: kept units are scaled by 1/(1-rate). Identity when not training.
template <typename T>
Var<T> dropout(const Var<T>& input, T rate, bool training, std::mt19937_64& rng) {
  require(rate >= T{0} && rate < T{1}, "dropout: rate must be in [0,1)");
  if (!training || rate == T{0}) return input;
  const auto& x = input.value();
  std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
  std::vector<T> mask(x.size());
  const T scale = T{1} / (T{1} - rate);
  for (auto& m : mask) m = keep(rng) ? scale : T{0};
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * mask[i];
  return make_result<T>(
      std::move(out), {input},
      [mask = std::move(mask)](Node<T>& self) {
        auto& dx = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < mask.size(); ++i) dx[i] += self.grad[i] * mask[i];
      },
      "dropout");
}

// Elementwise map; `derivative(x, y)` gets the input and the forward output.
template <typename T, typename F, typename D>
Var<T> map_elementwise(const Var<T>& input, F f, D derivative, const char* op_name) {
  const auto& x = input.value();
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return make_result<T>(
      std::move(out), {input},
      [derivative](Node<T>& self) {
        Node<T>& xn = *self.parents[0];
        auto& dx = xn.grad_buffer();
        for (std::size_t i = 0; i < dx.size(); ++i)
          dx[i] += self.grad[i] * derivative(xn.value[i], self.value[i]);
      },
      op_name);
}

template <typename T>
Var<T> sum(const Var<T>& input) {
  const auto& x = input.value();
  T acc{0};
  for (T v : x.values()) acc += v;
  return make_result<T>(
      Tensor<T>({1}, std::vector<T>{acc}), {input},
      [](Node<T>& self) {
        auto& dx = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[0];
      },
      "sum");
}

// Σ coeffs[i] * x[i] for a constant coefficient tensor.
template <typename T>
Var<T> weighted_sum(const Var<T>& input, const Tensor<T>& coeffs) {
  const auto& x = input.value();
  require(coeffs.shape() == x.shape(), "weighted_sum: coefficient shape mismatch");
  T acc{0};
  for (std::size_t i = 0; i < x.size(); ++i) acc += coeffs[i] * x[i];
  return make_result<T>(
      Tensor<T>({1}, std::vector<T>{acc}), {input},
      [coeffs](Node<T>& self) {
        auto& dx = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[0] * coeffs[i];
      },
      "weighted_sum");
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result<T>(
      std::move(out), {a, b},
      [](Node<T>& self) {
        Node<T>& an = *self.parents[0];
        Node<T>& bn = *self.parents[1];
        // a and b may be the same node; the two accumulations then add up.
        if (an.requires_grad) {
          auto& da = an.grad_buffer();
          for (std::size_t i = 0; i < da.size(); ++i) da[i] += self.grad[i] * bn.value[i];
        }
        if (bn.requires_grad) {
          auto& db = bn.grad_buffer();
          for (std::size_t i = 0; i < db.size(); ++i) db[i] += self.grad[i] * an.value[i];
        }
      },
      "mul");
}

// Mean over the batch of -log softmax(logits)[label], max-subtracted.
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const std::size_t> labels) {
  const auto& z = logits.value();
  require(z.rank() == 2, "softmax_cross_entropy: logits must be (N,K), got " + shape_str(z.shape()));
  const std::size_t N = z.dim(0), K = z.dim(1);
  require(N >= 1 && K >= 1, "softmax_cross_entropy: empty logits");
  require(labels.size() == N, "softmax_cross_entropy: label count " + std::to_string(labels.size()) +
                                  " does not match batch " + std::to_string(N));
  for (std::size_t l : labels)
    require(l < K, "softmax_cross_entropy: label " + std::to_string(l) + " out of range [0," +
                       std::to_string(K) + ")");
  Tensor<T> probs({N, K});
  T loss{0};
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = z.data() + n * K;
    const T mx = *std::max_element(row, row + K);
    T denom{0};
    for (std::size_t k = 0; k < K; ++k) denom += std::exp(row[k] - mx);
    const T log_denom = std::log(denom);
    for (std::size_t k = 0; k < K; ++k) probs[n * K + k] = std::exp(row[k] - mx - log_denom);
    loss -= row[labels[n]] - mx - log_denom;
  }
  loss /= static_cast<T>(N);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return make_result<T>(
      Tensor<T>({1}, std::vector<T>{loss}), {logits},
      [N, K, probs = std::move(probs), lab = std::move(lab)](Node<T>& self) {
        auto& dz = self.parents[0]->grad_buffer();
        const T scale = self.grad[0] / static_cast<T>(N);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t k = 0; k < K; ++k)
            dz[n * K + k] += scale * (probs[n * K + k] - (k == lab[n] ? T{1} : T{0}));
      },
      "softmax_cross_entropy");
}

}  // namespace cmi
