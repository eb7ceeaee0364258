#include "resdense/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace resdense {
namespace {

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* what) {
  if (!t.defined()) throw ShapeError(std::string(what) + ": undefined tensor");
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) +
                     ", got shape " + shape_to_string(t.shape()));
  }
}

template <typename T>
Tensor<T> make_output(Shape shape, std::vector<T> values) {
  return Tensor<T>(std::move(shape), std::move(values));
}

// Row-major C[M x N] += A[M x K] * B[K x N].
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T{0}) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M x N] += A[K x M]^T * B[K x N].
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = a[p * m + i];
      if (av == T{0}) continue;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M x N] += A[M x K] * B[N x K]^T, via an explicit transpose of B.
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             std::vector<T>& scratch) {
  scratch.resize(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t p = 0; p < k; ++p) scratch[p * n + j] = b[j * k + p];
  }
  gemm_nn(m, n, k, a, scratch.data(), c);
}

struct ConvGeometry {
  std::size_t n, c, h, w;
  std::size_t o, kh, kw;
  std::size_t oh, ow;
  std::size_t stride, pad_top, pad_left;

  std::size_t patch() const { return c * kh * kw; }
  std::size_t positions() const { return oh * ow; }
};

// col[(ci*kh + ki)*kw + kj][oy*ow + ox]
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const std::size_t positions = g.positions();
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((ci * g.kh + ki) * g.kw + kj) * positions;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad_top);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                      static_cast<std::ptrdiff_t>(g.pad_left);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                ix < static_cast<std::ptrdiff_t>(g.w);
            row[oy * g.ow + ox] = inside ? x[(ci * g.h + static_cast<std::size_t>(iy)) * g.w +
                                             static_cast<std::size_t>(ix)]
                                         : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* dx) {
  const std::size_t positions = g.positions();
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((ci * g.kh + ki) * g.kw + kj) * positions;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad_top);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                      static_cast<std::ptrdiff_t>(g.pad_left);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            dx[(ci * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] +=
                row[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

std::size_t conv_extent(std::size_t in, std::size_t before, std::size_t after, std::size_t k,
                        std::size_t stride, const char* axis) {
  const std::size_t padded = in + before + after;
  if (padded < k) {
    throw ShapeError(std::string("conv2d: kernel ") + axis + " extent " + std::to_string(k) +
                     " exceeds padded input extent " + std::to_string(padded));
  }
  if ((padded - k) % stride != 0) {
    throw ShapeError(std::string("conv2d: non-integral output ") + axis + ": (" +
                     std::to_string(padded) + " - " + std::to_string(k) + ") / " +
                     std::to_string(stride) + " is not an integer");
  }
  return (padded - k) / stride + 1;
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel,
                 const OptionalTensor<T>& bias, Conv2dOptions options, TapePtr<T> tape) {
  require_rank(input, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  if (options.stride == 0) throw ShapeError("conv2d: stride must be positive");

  ConvGeometry g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.o = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = options.stride;
  g.pad_top = options.padding;
  g.pad_left = options.padding;
  if (kernel.dim(1) != g.c) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                     " input channels, input " + shape_to_string(input.shape()) + " has " +
                     std::to_string(g.c));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.o)) {
    throw ShapeError("conv2d: bias must have shape [" + std::to_string(g.o) + "], got " +
                     shape_to_string(bias->shape()));
  }
  g.oh = conv_extent(g.h, options.padding, options.trailing(), g.kh, g.stride, "height");
  g.ow = conv_extent(g.w, options.padding, options.trailing(), g.kw, g.stride, "width");

  const std::size_t positions = g.positions();
  const std::size_t patch = g.patch();
  const std::size_t in_sample = g.c * g.h * g.w;
  const std::size_t out_sample = g.o * positions;

  std::vector<T> out(g.n * out_sample, T{0});
  std::vector<T> col(patch * positions);
  const T* x = input.data().data();
  const T* wk = kernel.data().data();
  for (std::size_t s = 0; s < g.n; ++s) {
    im2col(g, x + s * in_sample, col.data());
    T* y = out.data() + s * out_sample;
    if (bias) {
      const auto b = bias->data();
      for (std::size_t oc = 0; oc < g.o; ++oc) std::fill_n(y + oc * positions, positions, b[oc]);
    }
    gemm_nn(g.o, positions, patch, wk, col.data(), y);
  }

  Tensor<T> result = make_output<T>({g.n, g.o, g.oh, g.ow}, std::move(out));
  const Tensor<T>* bias_ptr = bias ? &*bias : nullptr;
  if (should_record(tape, {&input, &kernel, bias_ptr})) {
    auto in_h = input.handle();
    auto k_h = kernel.handle();
    auto b_h = bias ? bias->handle() : nullptr;
    auto out_h = result.handle();
    std::vector<typename Tape<T>::ImplPtr> inputs{in_h, k_h};
    if (b_h) inputs.push_back(b_h);
    tape->record("conv2d", std::move(inputs), out_h, [g, in_h, k_h, b_h, out_h] {
      const std::size_t positions = g.positions();
      const std::size_t patch = g.patch();
      const std::size_t in_sample = g.c * g.h * g.w;
      const std::size_t out_sample = g.o * positions;
      const T* dy = out_h->grad.data();
      std::vector<T> col(patch * positions);
      std::vector<T> dcol;
      std::vector<T> scratch;
      T* dk = k_h->requires_grad ? grad_buffer(*k_h).data() : nullptr;
      T* dx = in_h->requires_grad ? grad_buffer(*in_h).data() : nullptr;
      for (std::size_t s = 0; s < g.n; ++s) {
        const T* dys = dy + s * out_sample;
        if (dk != nullptr) {
          im2col(g, in_h->data.data() + s * in_sample, col.data());
          gemm_nt(g.o, patch, positions, dys, col.data(), dk, scratch);
        }
        if (dx != nullptr) {
          dcol.assign(patch * positions, T{0});
          gemm_tn(patch, positions, g.o, k_h->data.data(), dys, dcol.data());
          col2im(g, dcol.data(), dx + s * in_sample);
        }
      }
      if (b_h && b_h->requires_grad) {
        auto db = grad_buffer(*b_h);
        for (std::size_t s = 0; s < g.n; ++s) {
          for (std::size_t oc = 0; oc < g.o; ++oc) {
            double acc = 0;
            const T* row = dy + s * out_sample + oc * positions;
            for (std::size_t p = 0; p < positions; ++p) acc += row[p];
            db[oc] += static_cast<T>(acc);
          }
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// batch_norm2d

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                       StatsPtr<T> stats, BatchNormOptions options, TapePtr<T> tape) {
  require_rank(input, 4, "batch_norm2d input");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("batch_norm2d: input has " + std::to_string(c) + " channels but gamma has " +
                     std::to_string(gamma.numel()) + " and beta has " +
                     std::to_string(beta.numel()));
  }
  if (options.mode == Mode::infer && stats == nullptr) {
    throw Error("batch_norm2d: infer mode requires running statistics");
  }
  if (stats != nullptr && (stats->running_mean.numel() != c || stats->running_var.numel() != c)) {
    throw ShapeError("batch_norm2d: running statistics do not have " + std::to_string(c) +
                     " channels");
  }

  const std::size_t plane = h * w;
  const std::size_t count = n * plane;
  const T* x = input.data().data();
  std::vector<T> mean(c), inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (options.mode == Mode::train) {
      double acc = 0;
      for (std::size_t s = 0; s < n; ++s) {
        const T* p = x + (s * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      }
      const double mu = acc / static_cast<double>(count);
      double var = 0;
      for (std::size_t s = 0; s < n; ++s) {
        const T* p = x + (s * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = p[i] - mu;
          var += d * d;
        }
      }
      var /= static_cast<double>(count);
      mean[ch] = static_cast<T>(mu);
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + options.epsilon));
      if (stats != nullptr) {
        auto rm = stats->running_mean.mutable_data();
        auto rv = stats->running_var.mutable_data();
        rm[ch] = static_cast<T>(options.momentum * rm[ch] + (1.0 - options.momentum) * mu);
        rv[ch] = static_cast<T>(options.momentum * rv[ch] + (1.0 - options.momentum) * var);
      }
    } else {
      mean[ch] = stats->running_mean.data()[ch];
      inv_std[ch] = static_cast<T>(
          1.0 / std::sqrt(static_cast<double>(stats->running_var.data()[ch]) + options.epsilon));
    }
  }

  std::vector<T> xhat(input.numel());
  std::vector<T> out(input.numel());
  const auto gm = gamma.data();
  const auto bt = beta.data();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (s * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const T xh = (x[base + i] - mean[ch]) * inv_std[ch];
        xhat[base + i] = xh;
        out[base + i] = gm[ch] * xh + bt[ch];
      }
    }
  }

  Tensor<T> result = make_output<T>(input.shape(), std::move(out));
  if (should_record(tape, {&input, &gamma, &beta})) {
    auto in_h = input.handle();
    auto g_h = gamma.handle();
    auto b_h = beta.handle();
    auto out_h = result.handle();
    const bool train = options.mode == Mode::train;
    tape->record("batch_norm2d", {in_h, g_h, b_h}, out_h,
                 [=, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
                   const T* dy = out_h->grad.data();
                   std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
                   for (std::size_t s = 0; s < n; ++s) {
                     for (std::size_t ch = 0; ch < c; ++ch) {
                       const std::size_t base = (s * c + ch) * plane;
                       for (std::size_t i = 0; i < plane; ++i) {
                         sum_dy[ch] += dy[base + i];
                         sum_dy_xhat[ch] += static_cast<double>(dy[base + i]) * xhat[base + i];
                       }
                     }
                   }
                   if (g_h->requires_grad) {
                     auto dg = grad_buffer(*g_h);
                     for (std::size_t ch = 0; ch < c; ++ch) dg[ch] += static_cast<T>(sum_dy_xhat[ch]);
                   }
                   if (b_h->requires_grad) {
                     auto db = grad_buffer(*b_h);
                     for (std::size_t ch = 0; ch < c; ++ch) db[ch] += static_cast<T>(sum_dy[ch]);
                   }
                   if (!in_h->requires_grad) return;
                   auto dx = grad_buffer(*in_h);
                   const auto& gamma_values = g_h->data;
                   const double m = static_cast<double>(count);
                   for (std::size_t s = 0; s < n; ++s) {
                     for (std::size_t ch = 0; ch < c; ++ch) {
                       const std::size_t base = (s * c + ch) * plane;
                       const double scale = static_cast<double>(gamma_values[ch]) * inv_std[ch];
                       for (std::size_t i = 0; i < plane; ++i) {
                         if (train) {
                           const double v = dy[base + i] - sum_dy[ch] / m -
                                            xhat[base + i] * sum_dy_xhat[ch] / m;
                           dx[base + i] += static_cast<T>(scale * v);
                         } else {
                           dx[base + i] += static_cast<T>(scale * dy[base + i]);
                         }
                       }
                     }
                   }
                 });
  }
  return result;
}

// ---------------------------------------------------------------------------
// elementwise activations

template <typename T>
Tensor<T> activation(const Tensor<T>& input, Activation kind, TapePtr<T> tape) {
  const auto x = input.data();
  std::vector<T> out(x.size());
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
  } else {
    for (std::size_t i = 0; i < x.size(); ++i) {
      // Split by sign so exp never overflows.
      const double v = x[i];
      const double s = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      out[i] = static_cast<T>(s);
    }
  }
  Tensor<T> result = make_output<T>(input.shape(), std::move(out));
  if (should_record(tape, {&input})) {
    auto in_h = input.handle();
    auto out_h = result.handle();
    tape->record(kind == Activation::relu ? "relu" : "sigmoid", {in_h}, out_h, [=] {
      auto dx = grad_buffer(*in_h);
      const auto& dy = out_h->grad;
      if (kind == Activation::relu) {
        for (std::size_t i = 0; i < dx.size(); ++i) {
          if (in_h->data[i] > T{0}) dx[i] += dy[i];
        }
      } else {
        for (std::size_t i = 0; i < dx.size(); ++i) {
          const T y = out_h->data[i];
          dx[i] += dy[i] * y * (T{1} - y);
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& input, TapePtr<T> tape) {
  require_rank(input, 2, "softmax input");
  const std::size_t n = input.dim(0), k = input.dim(1);
  const auto x = input.data();
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = x.data() + r * k;
    const double mx = *std::max_element(row, row + k);
    double total = 0;
    for (std::size_t j = 0; j < k; ++j) total += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = static_cast<T>(std::exp(row[j] - mx) / total);
  }
  Tensor<T> result = make_output<T>(input.shape(), std::move(out));
  if (should_record(tape, {&input})) {
    auto in_h = input.handle();
    auto out_h = result.handle();
    tape->record("softmax", {in_h}, out_h, [=] {
      auto dx = grad_buffer(*in_h);
      const auto& y = out_h->data;
      const auto& dy = out_h->grad;
      for (std::size_t r = 0; r < n; ++r) {
        double dot = 0;
        for (std::size_t j = 0; j < k; ++j) dot += static_cast<double>(dy[r * k + j]) * y[r * k + j];
        for (std::size_t j = 0; j < k; ++j) {
          dx[r * k + j] += static_cast<T>(y[r * k + j] * (dy[r * k + j] - dot));
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// pooling

template <typename T>
Tensor<T> gem_pool(const Tensor<T>& input, std::span<const double> exponents, TapePtr<T> tape) {
  require_rank(input, 4, "gem_pool input");
  const std::size_t n = input.dim(0), c = input.dim(1);
  const std::size_t plane = input.dim(2) * input.dim(3);
  if (exponents.size() != 1 && exponents.size() != c) {
    throw ShapeError("gem_pool: expected 1 or " + std::to_string(c) + " exponents, got " +
                     std::to_string(exponents.size()));
  }
  for (double p : exponents) {
    if (!(p > 0) || !std::isfinite(p)) {
      throw ValueError("gem_pool: exponent must be positive and finite, got " + std::to_string(p));
    }
  }
  const auto exponent = [&](std::size_t ch) { return exponents.size() == 1 ? exponents[0] : exponents[ch]; };

  const auto x = input.data();
  std::vector<T> out(n * c);
  // Per (sample, channel) power mean M, kept for the backward rule.
  std::vector<double> power_mean(n * c);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double p = exponent(ch);
      const T* map = x.data() + (s * c + ch) * plane;
      double acc = 0;
      if (p == 1.0) {
        for (std::size_t i = 0; i < plane; ++i) acc += map[i];
        acc /= static_cast<double>(plane);
        power_mean[s * c + ch] = acc;
        out[s * c + ch] = static_cast<T>(acc);
        continue;
      }
      const bool integral = std::floor(p) == p;
      for (std::size_t i = 0; i < plane; ++i) {
        if (map[i] < T{0} && !integral) {
          throw ValueError("gem_pool: negative input " + std::to_string(map[i]) +
                           " with fractional exponent " + std::to_string(p));
        }
        acc += std::pow(static_cast<double>(map[i]) + kGemEpsilon, p);
      }
      acc /= static_cast<double>(plane);
      if (acc < 0) {
        throw ValueError("gem_pool: negative power mean with exponent " + std::to_string(p));
      }
      power_mean[s * c + ch] = acc;
      out[s * c + ch] = static_cast<T>(std::pow(acc, 1.0 / p));
    }
  }

  Tensor<T> result = make_output<T>({n, c}, std::move(out));
  if (should_record(tape, {&input})) {
    auto in_h = input.handle();
    auto out_h = result.handle();
    std::vector<double> ps(c);
    for (std::size_t ch = 0; ch < c; ++ch) ps[ch] = exponent(ch);
    tape->record("gem_pool", {in_h}, out_h,
                 [=, power_mean = std::move(power_mean), ps = std::move(ps)] {
                   auto dx = grad_buffer(*in_h);
                   const auto& dy = out_h->grad;
                   const double inv_n = 1.0 / static_cast<double>(plane);
                   for (std::size_t s = 0; s < n; ++s) {
                     for (std::size_t ch = 0; ch < c; ++ch) {
                       const double p = ps[ch];
                       const double g = dy[s * c + ch];
                       const std::size_t base = (s * c + ch) * plane;
                       if (p == 1.0) {
                         for (std::size_t i = 0; i < plane; ++i) dx[base + i] += static_cast<T>(g * inv_n);
                         continue;
                       }
                       const double outer = std::pow(power_mean[s * c + ch], 1.0 / p - 1.0) * inv_n;
                       for (std::size_t i = 0; i < plane; ++i) {
                         const double xi = static_cast<double>(in_h->data[base + i]) + kGemEpsilon;
                         dx[base + i] += static_cast<T>(g * outer * std::pow(xi, p - 1.0));
                       }
                     }
                   }
                 });
  }
  return result;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input, TapePtr<T> tape) {
  require_rank(input, 4, "global_avg_pool input");
  const std::size_t n = input.dim(0), c = input.dim(1);
  const std::size_t plane = input.dim(2) * input.dim(3);
  const auto x = input.data();
  std::vector<T> out(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0;
    for (std::size_t j = 0; j < plane; ++j) acc += x[i * plane + j];
    out[i] = static_cast<T>(acc / static_cast<double>(plane));
  }
  Tensor<T> result = make_output<T>({n, c}, std::move(out));
  if (should_record(tape, {&input})) {
    auto in_h = input.handle();
    auto out_h = result.handle();
    tape->record("global_avg_pool", {in_h}, out_h, [=] {
      auto dx = grad_buffer(*in_h);
      const auto& dy = out_h->grad;
      const T scale = static_cast<T>(1.0 / static_cast<double>(plane));
      for (std::size_t i = 0; i < n * c; ++i) {
        for (std::size_t j = 0; j < plane; ++j) dx[i * plane + j] += dy[i] * scale;
      }
    });
  }
  return result;
}

namespace {

struct PoolGeometry {
  std::size_t n, c, h, w, oh, ow, kernel, stride;
};

template <typename T>
PoolGeometry pool_geometry(const Tensor<T>& input, std::size_t kernel, std::size_t stride,
                           const char* what) {
  require_rank(input, 4, what);
  if (kernel == 0 || stride == 0) throw ShapeError(std::string(what) + ": kernel and stride must be positive");
  PoolGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), 0, 0, kernel, stride};
  for (auto [in, out] : {std::pair{g.h, &g.oh}, std::pair{g.w, &g.ow}}) {
    if (in < kernel || (in - kernel) % stride != 0) {
      throw ShapeError(std::string(what) + ": extent " + std::to_string(in) +
                       " incompatible with kernel " + std::to_string(kernel) + " stride " +
                       std::to_string(stride));
    }
    *out = (in - kernel) / stride + 1;
  }
  return g;
}

}  // namespace

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& input, std::size_t kernel, std::size_t stride,
                     TapePtr<T> tape) {
  const PoolGeometry g = pool_geometry(input, kernel, stride, "max_pool2d");
  const auto x = input.data();
  std::vector<T> out(g.n * g.c * g.oh * g.ow);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t map = 0; map < g.n * g.c; ++map) {
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
      for (std::size_t ox = 0; ox < g.ow; ++ox) {
        std::size_t best = map * g.h * g.w + (oy * stride) * g.w + ox * stride;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t idx = map * g.h * g.w + (oy * stride + ky) * g.w + ox * stride + kx;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = (map * g.oh + oy) * g.ow + ox;
        out[o] = x[best];
        argmax[o] = best;
      }
    }
  }
  Tensor<T> result = make_output<T>({g.n, g.c, g.oh, g.ow}, std::move(out));
  if (should_record(tape, {&input})) {
    auto in_h = input.handle();
    auto out_h = result.handle();
    tape->record("max_pool2d", {in_h}, out_h, [=, argmax = std::move(argmax)] {
      auto dx = grad_buffer(*in_h);
      const auto& dy = out_h->grad;
      for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += dy[o];
    });
  }
  return result;
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& input, std::size_t kernel, std::size_t stride,
                     TapePtr<T> tape) {
  const PoolGeometry g = pool_geometry(input, kernel, stride, "avg_pool2d");
  const auto x = input.data();
  const double scale = 1.0 / static_cast<double>(kernel * kernel);
  std::vector<T> out(g.n * g.c * g.oh * g.ow);
  for (std::size_t map = 0; map < g.n * g.c; ++map) {
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
      for (std::size_t ox = 0; ox < g.ow; ++ox) {
        double acc = 0;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            acc += x[map * g.h * g.w + (oy * stride + ky) * g.w + ox * stride + kx];
          }
        }
        out[(map * g.oh + oy) * g.ow + ox] = static_cast<T>(acc * scale);
      }
    }
  }
  Tensor<T> result = make_output<T>({g.n, g.c, g.oh, g.ow}, std::move(out));
  if (should_record(tape, {&input})) {
    auto in_h = input.handle();
    auto out_h = result.handle();
    tape->record("avg_pool2d", {in_h}, out_h, [=] {
      auto dx = grad_buffer(*in_h);
      const auto& dy = out_h->grad;
      for (std::size_t map = 0; map < g.n * g.c; ++map) {
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const T d = static_cast<T>(dy[(map * g.oh + oy) * g.ow + ox] * scale);
            for (std::size_t ky = 0; ky < g.kernel; ++ky) {
              for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                dx[map * g.h * g.w + (oy * g.stride + ky) * g.w + ox * g.stride + kx] += d;
              }
            }
          }
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// structural / linear

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, TapePtr<T> tape) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  const auto x = a.data();
  const auto y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  Tensor<T> result = make_output<T>(a.shape(), std::move(out));
  if (should_record(tape, {&a, &b})) {
    auto a_h = a.handle();
    auto b_h = b.handle();
    auto out_h = result.handle();
    tape->record("add", {a_h, b_h}, out_h, [=] {
      const auto& dy = out_h->grad;
      for (const auto& h : {a_h, b_h}) {
        if (!h->requires_grad) continue;
        auto d = grad_buffer(*h);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, TapePtr<T> tape) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  const auto x = a.data();
  const auto y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  Tensor<T> result = make_output<T>(a.shape(), std::move(out));
  if (should_record(tape, {&a, &b})) {
    auto a_h = a.handle();
    auto b_h = b.handle();
    auto out_h = result.handle();
    tape->record("mul", {a_h, b_h}, out_h, [=] {
      const auto& dy = out_h->grad;
      if (a_h->requires_grad) {
        auto d = grad_buffer(*a_h);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * b_h->data[i];
      }
      if (b_h->requires_grad) {
        auto d = grad_buffer(*b_h);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * a_h->data[i];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& input, TapePtr<T> tape) {
  double acc = 0;
  for (T v : input.data()) acc += v;
  Tensor<T> result = Tensor<T>::scalar(static_cast<T>(acc));
  if (should_record(tape, {&input})) {
    auto in_h = input.handle();
    auto out_h = result.handle();
    tape->record("sum", {in_h}, out_h, [=] {
      auto dx = grad_buffer(*in_h);
      const T g = out_h->grad[0];
      for (auto& v : dx) v += g;
    });
  }
  return result;
}

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> inputs, TapePtr<T> tape) {
  if (inputs.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& t : inputs) require_rank(t, 4, "concat_channels input");
  const std::size_t n = inputs[0].dim(0), h = inputs[0].dim(2), w = inputs[0].dim(3);
  std::size_t total = 0;
  for (const auto& t : inputs) {
    if (t.dim(0) != n || t.dim(2) != h || t.dim(3) != w) {
      throw ShapeError("concat_channels: " + shape_to_string(t.shape()) +
                       " does not match batch/spatial dims of " +
                       shape_to_string(inputs[0].shape()));
    }
    total += t.dim(1);
  }
  const std::size_t plane = h * w;
  std::vector<T> out(n * total * plane);
  for (std::size_t s = 0; s < n; ++s) {
    std::size_t offset = 0;
    for (const auto& t : inputs) {
      const std::size_t block = t.dim(1) * plane;
      std::copy_n(t.data().data() + s * block, block, out.data() + (s * total + offset) * plane);
      offset += t.dim(1);
    }
  }
  Tensor<T> result = make_output<T>({n, total, h, w}, std::move(out));

  bool record = false;
  for (const auto& t : inputs) record = record || should_record(tape, {&t});
  if (record) {
    std::vector<typename Tape<T>::ImplPtr> handles;
    for (const auto& t : inputs) handles.push_back(t.handle());
    auto out_h = result.handle();
    tape->record("concat_channels", handles, out_h, [=] {
      const auto& dy = out_h->grad;
      for (std::size_t s = 0; s < n; ++s) {
        std::size_t offset = 0;
        for (const auto& hnd : handles) {
          const std::size_t ch = hnd->shape[1];
          if (hnd->requires_grad) {
            auto d = grad_buffer(*hnd);
            const T* src = dy.data() + (s * total + offset) * plane;
            T* dst = d.data() + s * ch * plane;
            for (std::size_t i = 0; i < ch * plane; ++i) dst[i] += src[i];
          }
          offset += ch;
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> affine(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 TapePtr<T> tape) {
  require_rank(input, 2, "affine input");
  require_rank(weight, 2, "affine weight");
  const std::size_t n = input.dim(0), f = input.dim(1), k = weight.dim(1);
  if (weight.dim(0) != f) {
    throw ShapeError("affine: input has " + std::to_string(f) + " features but weight is " +
                     shape_to_string(weight.shape()));
  }
  if (bias.numel() != k) {
    throw ShapeError("affine: bias must have " + std::to_string(k) + " values, got shape " +
                     shape_to_string(bias.shape()));
  }
  std::vector<T> out(n * k);
  for (std::size_t r = 0; r < n; ++r) std::copy_n(bias.data().data(), k, out.data() + r * k);
  gemm_nn(n, k, f, input.data().data(), weight.data().data(), out.data());
  Tensor<T> result = make_output<T>({n, k}, std::move(out));
  if (should_record(tape, {&input, &weight, &bias})) {
    auto in_h = input.handle();
    auto w_h = weight.handle();
    auto b_h = bias.handle();
    auto out_h = result.handle();
    tape->record("affine", {in_h, w_h, b_h}, out_h, [=] {
      const T* dy = out_h->grad.data();
      if (in_h->requires_grad) {
        std::vector<T> scratch;
        gemm_nt(n, f, k, dy, w_h->data.data(), grad_buffer(*in_h).data(), scratch);
      }
      if (w_h->requires_grad) gemm_tn(f, k, n, in_h->data.data(), dy, grad_buffer(*w_h).data());
      if (b_h->requires_grad) {
        auto db = grad_buffer(*b_h);
        for (std::size_t j = 0; j < k; ++j) {
          double acc = 0;
          for (std::size_t r = 0; r < n; ++r) acc += dy[r * k + j];
          db[j] += static_cast<T>(acc);
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// losses

template <typename T>
Tensor<T> binary_cross_entropy(const Tensor<T>& probs, std::span<const int> labels,
                               TapePtr<T> tape) {
  const std::size_t n = probs.numel();
  if (probs.rank() > 2 || (probs.rank() == 2 && probs.dim(1) != 1)) {
    throw ShapeError("binary_cross_entropy: expected N or N x 1 probabilities, got " +
                     shape_to_string(probs.shape()));
  }
  if (labels.size() != n) {
    throw ShapeError("binary_cross_entropy: " + std::to_string(n) + " probabilities but " +
                     std::to_string(labels.size()) + " labels");
  }
  const double lo = kProbabilityClip, hi = 1.0 - kProbabilityClip;
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != 0 && labels[i] != 1) {
      throw ValueError("binary_cross_entropy: label must be 0 or 1, got " + std::to_string(labels[i]));
    }
    const double p = std::clamp(static_cast<double>(probs.data()[i]), lo, hi);
    total -= labels[i] == 1 ? std::log(p) : std::log(1.0 - p);
  }
  Tensor<T> result = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(n)));
  if (should_record(tape, {&probs})) {
    auto in_h = probs.handle();
    auto out_h = result.handle();
    std::vector<int> y(labels.begin(), labels.end());
    tape->record("binary_cross_entropy", {in_h}, out_h, [=, y = std::move(y)] {
      auto dx = grad_buffer(*in_h);
      const double g = static_cast<double>(out_h->grad[0]) / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double p = in_h->data[i];
        if (p < lo || p > hi) continue;
        dx[i] += static_cast<T>(g * (y[i] == 1 ? -1.0 / p : 1.0 / (1.0 - p)));
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> categorical_cross_entropy(const Tensor<T>& probs, std::span<const int> labels,
                                    TapePtr<T> tape) {
  require_rank(probs, 2, "categorical_cross_entropy probabilities");
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  if (labels.size() != n) {
    throw ShapeError("categorical_cross_entropy: " + std::to_string(n) + " rows but " +
                     std::to_string(labels.size()) + " labels");
  }
  const double lo = kProbabilityClip, hi = 1.0 - kProbabilityClip;
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw ValueError("categorical_cross_entropy: label index " + std::to_string(labels[i]) +
                       " out of range for " + std::to_string(k) + " classes");
    }
    double row = 0;
    for (std::size_t j = 0; j < k; ++j) row += static_cast<double>(probs.data()[i * k + j]);
    if (!(std::abs(row - 1.0) <= 1e-4)) {
      throw ValueError("categorical_cross_entropy: row " + std::to_string(i) + " sums to " + std::to_string(row) +
                       ", expected 1");
    }
    total -= std::log(std::clamp(static_cast<double>(probs.data()[i * k + labels[i]]), lo, hi));
  }
  Tensor<T> result = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(n)));
  if (should_record(tape, {&probs})) {
    auto in_h = probs.handle();
    auto out_h = result.handle();
    std::vector<int> y(labels.begin(), labels.end());
    tape->record("categorical_cross_entropy", {in_h}, out_h, [=, y = std::move(y)] {
      auto dx = grad_buffer(*in_h);
      const double g = static_cast<double>(out_h->grad[0]) / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t idx = i * k + static_cast<std::size_t>(y[i]);
        const double p = in_h->data[idx];
        if (p < lo || p > hi) continue;
        dx[idx] += static_cast<T>(-g / p);
      }
    });
  }
  return result;
}

#define RESDENSE_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const std::optional<Tensor<T>>&, \
                            Conv2dOptions, Tape<T>*);                                            \
  template Tensor<T> batch_norm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                  BatchNormStats<T>*, BatchNormOptions, Tape<T>*);               \
  template Tensor<T> activation(const Tensor<T>&, Activation, Tape<T>*);                         \
  template Tensor<T> softmax(const Tensor<T>&, Tape<T>*);                                        \
  template Tensor<T> gem_pool(const Tensor<T>&, std::span<const double>, Tape<T>*);              \
  template Tensor<T> global_avg_pool(const Tensor<T>&, Tape<T>*);                                \
  template Tensor<T> max_pool2d(const Tensor<T>&, std::size_t, std::size_t, Tape<T>*);           \
  template Tensor<T> avg_pool2d(const Tensor<T>&, std::size_t, std::size_t, Tape<T>*);           \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&, Tape<T>*);                          \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&, Tape<T>*);                          \
  template Tensor<T> sum(const Tensor<T>&, Tape<T>*);                                            \
  template Tensor<T> concat_channels(std::span<const Tensor<T>>, Tape<T>*);                      \
  template Tensor<T> affine(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tape<T>*);     \
  template Tensor<T> binary_cross_entropy(const Tensor<T>&, std::span<const int>, Tape<T>*);     \
  template Tensor<T> categorical_cross_entropy(const Tensor<T>&, std::span<const int>, Tape<T>*);

RESDENSE_INSTANTIATE_OPS(float)
RESDENSE_INSTANTIATE_OPS(double)

#undef RESDENSE_INSTANTIATE_OPS

}  // namespace resdense
