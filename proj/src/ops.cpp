#include "cpmlho/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cpmlho/errors.hpp"
#include "kernels.hpp"

namespace cpmlho::ad {

namespace {

const Tensor& val(Tape* t, NodeId id) { return t->node(id).value; }

Tape* tape_of(Var a, Var b) {
  if (!a.valid() || !b.valid()) throw ContractError("unbound Var passed to an op");
  if (a.tape() != b.tape()) throw ContractError("operands live on different tapes");
  return a.tape();
}

enum class Bcast { None, Left, Right };

Bcast broadcast_kind(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Bcast::None;
  // single elements of different rank keep the higher rank
  if (a.numel() == 1 && b.numel() == 1) return a.rank() >= b.rank() ? Bcast::Right : Bcast::Left;
  if (a.numel() == 1) return Bcast::Left;
  if (b.numel() == 1) return Bcast::Right;
  throw DimensionError(std::string(op) + ": shapes " + shape_to_string(a.shape()) + " and " +
                       shape_to_string(b.shape()) + " do not broadcast");
}

/// Shared driver for broadcasting binary ops. `f` computes the value;
/// `da`, `db` give the local partials at (x, y).
template <class F, class DA, class DB>
Var binary(const char* op, Var a, Var b, F f, DA da, DB db) {
  Tape* t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Bcast kind = broadcast_kind(op, av, bv);
  const Shape out_shape = kind == Bcast::Left ? bv.shape() : av.shape();
  const std::size_t n = shape_numel(out_shape);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = kind == Bcast::Left ? av[0] : av[i];
    const double y = kind == Bcast::Right ? bv[0] : bv[i];
    out[i] = f(x, y);
  }
  const NodeId ia = a.id(), ib = b.id();
  return t->record(op, {a, b}, Tensor(out_shape, std::move(out)),
                   [t, ia, ib, kind, da, db](const Tensor& g, std::span<Tensor* const> grads) {
                     const Tensor& av = val(t, ia);
                     const Tensor& bv = val(t, ib);
                     for (std::size_t i = 0; i < g.numel(); ++i) {
                       const double x = kind == Bcast::Left ? av[0] : av[i];
                       const double y = kind == Bcast::Right ? bv[0] : bv[i];
                       if (grads[0]) (*grads[0])[kind == Bcast::Left ? 0 : i] += g[i] * da(x, y);
                       if (grads[1]) (*grads[1])[kind == Bcast::Right ? 0 : i] += g[i] * db(x, y);
                     }
                   });
}

/// Elementwise unary op; `d` is the local derivative as a function of the input.
template <class F, class D>
Var unary(const char* op, Var x, F f, D d) {
  if (!x.valid()) throw ContractError("unbound Var passed to an op");
  Tape* t = x.tape();
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = f(xv[i]);
  const NodeId ix = x.id();
  return t->record(op, {x}, std::move(out), [t, ix, d](const Tensor& g, std::span<Tensor* const> grads) {
    const Tensor& xv = val(t, ix);
    for (std::size_t i = 0; i < g.numel(); ++i) (*grads[0])[i] += g[i] * d(xv[i]);
  });
}

double logistic(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

void check_labels(const char* op, std::span<const int> labels, std::size_t n, std::size_t k) {
  if (labels.size() != n) {
    throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw DataError(std::string(op) + ": label " + std::to_string(y) + " outside [0, " +
                      std::to_string(k) + ")");
    }
  }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_to_string(t.shape()));
  }
}

}  // namespace

Var add(Var a, Var b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var div(Var a, Var b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Var neg(Var x) {
  return unary("neg", x, [](double v) { return -v; }, [](double) { return -1.0; });
}

Var scale(Var x, double c) {
  return unary("scale", x, [c](double v) { return c * v; }, [c](double) { return c; });
}

Var add_scalar(Var x, double c) {
  return unary("add_scalar", x, [c](double v) { return v + c; }, [](double) { return 1.0; });
}

Var exp(Var x) {
  return unary("exp", x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

Var log(Var x) {
  for (double v : x.value().data()) {
    if (!(v > 0.0)) throw ContractError("log of a non-positive value");
  }
  return unary("log", x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

Var sigmoid(Var x) {
  return unary("sigmoid", x, logistic, [](double v) {
    const double y = logistic(v);
    return y * (1.0 - y);
  });
}

Var relu(Var x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Var square(Var x) {
  return unary("square", x, [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

Var sum(Var x) {
  Tape* t = x.tape();
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return t->record("sum", {x}, Tensor::scalar(s), [](const Tensor& g, std::span<Tensor* const> grads) {
    for (double& v : grads[0]->data()) v += g[0];
  });
}

Var mean(Var x) {
  Tape* t = x.tape();
  const double n = static_cast<double>(x.value().numel());
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return t->record("mean", {x}, Tensor::scalar(s / n), [n](const Tensor& g, std::span<Tensor* const> grads) {
    for (double& v : grads[0]->data()) v += g[0] / n;
  });
}

Var select(Var x, std::size_t index) {
  if (index >= x.value().numel()) {
    throw DimensionError("select: index " + std::to_string(index) + " outside " +
                         shape_to_string(x.shape()));
  }
  return x.tape()->record("select", {x}, Tensor::scalar(x.value()[index]),
                          [index](const Tensor& g, std::span<Tensor* const> grads) { (*grads[0])[index] += g[0]; });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape()->record("reshape", {x}, std::move(out), [](const Tensor& g, std::span<Tensor* const> grads) {
    auto dst = grads[0]->data();
    for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
  });
}

Var matmul(Var a, Var b) {
  Tape* t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_to_string(av.shape()) + " by " +
                         shape_to_string(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), p = bv.dim(1);
  Tensor out({m, p});
  kernels::gemm_nn(av.data().data(), bv.data().data(), out.data().data(), m, k, p);
  const NodeId ia = a.id(), ib = b.id();
  return t->record("matmul", {a, b}, std::move(out),
                   [t, ia, ib, m, k, p](const Tensor& g, std::span<Tensor* const> grads) {
                     const Tensor& av = val(t, ia);
                     const Tensor& bv = val(t, ib);
                     if (grads[0]) {
                       // dA = G * B^T
                       std::vector<double> bt(k * p);
                       kernels::transpose(bv.data().data(), bt.data(), k, p);
                       kernels::gemm_nn(g.data().data(), bt.data(), grads[0]->data().data(), m, p, k);
                     }
                     if (grads[1]) {
                       // dB = A^T * G
                       kernels::gemm_tn(av.data().data(), g.data().data(), grads[1]->data().data(), m, k, p);
                     }
                   });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  require_rank("transpose", av, 2);
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor out({c, r});
  kernels::transpose(av.data().data(), out.data().data(), r, c);
  return a.tape()->record("transpose", {a}, std::move(out), [r, c](const Tensor& g, std::span<Tensor* const> grads) {
    double* dst = grads[0]->data().data();
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) dst[i * c + j] += g[j * r + i];
    }
  });
}

Var scale_rows(Var x, Var gate) {
  Tape* t = tape_of(x, gate);
  const Tensor& xv = x.value();
  const Tensor& gv = gate.value();
  const std::size_t rows = xv.dim(0);
  if (gv.numel() != rows) {
    throw DimensionError("scale_rows: gate " + shape_to_string(gv.shape()) + " does not match rows of " +
                         shape_to_string(xv.shape()));
  }
  const std::size_t cols = xv.numel() / rows;
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] * gv[r];
  }
  const NodeId ix = x.id(), ig = gate.id();
  return t->record("scale_rows", {x, gate}, std::move(out),
                   [t, ix, ig, rows, cols](const Tensor& g, std::span<Tensor* const> grads) {
                     const Tensor& xv = val(t, ix);
                     const Tensor& gv = val(t, ig);
                     for (std::size_t r = 0; r < rows; ++r) {
                       double acc = 0.0;
                       for (std::size_t c = 0; c < cols; ++c) {
                         const std::size_t i = r * cols + c;
                         if (grads[0]) (*grads[0])[i] += g[i] * gv[r];
                         acc += g[i] * xv[i];
                       }
                       if (grads[1]) (*grads[1])[r] += acc;
                     }
                   });
}

Var add_bias(Var x, Var bias) {
  Tape* t = tape_of(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (xv.rank() < 2 || bv.numel() != xv.dim(1)) {
    throw DimensionError("add_bias: bias " + shape_to_string(bv.shape()) + " does not match axis 1 of " +
                         shape_to_string(xv.shape()));
  }
  const std::size_t n = xv.dim(0), c = xv.dim(1), inner = xv.numel() / (n * c);
  Tensor out(xv.shape());
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (a * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) out[base + i] = xv[base + i] + bv[ch];
    }
  }
  return t->record("add_bias", {x, bias}, std::move(out),
                   [n, c, inner](const Tensor& g, std::span<Tensor* const> grads) {
                     for (std::size_t a = 0; a < n; ++a) {
                       for (std::size_t ch = 0; ch < c; ++ch) {
                         const std::size_t base = (a * c + ch) * inner;
                         double acc = 0.0;
                         for (std::size_t i = 0; i < inner; ++i) {
                           if (grads[0]) (*grads[0])[base + i] += g[base + i];
                           acc += g[base + i];
                         }
                         if (grads[1]) (*grads[1])[ch] += acc;
                       }
                     }
                   });
}

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, stride, pad, ho, wo;
  std::size_t rows() const { return c * kh * kw; }
  std::size_t cols() const { return ho * wo; }
};

void im2col(const double* img, const ConvGeometry& g, double* cols) {
  const std::size_t p = g.cols();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = cols + ((ch * g.kh + i) * g.kw + j) * p;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t x =
                static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = y >= 0 && x >= 0 && y < static_cast<std::ptrdiff_t>(g.h) &&
                                x < static_cast<std::ptrdiff_t>(g.w);
            row[oy * g.wo + ox] = inside ? img[(ch * g.h + y) * g.w + x] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* img) {
  const std::size_t p = g.cols();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = cols + ((ch * g.kh + i) * g.kw + j) * p;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t x =
                static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
            if (x < 0 || x >= static_cast<std::ptrdiff_t>(g.w)) continue;
            img[(ch * g.h + y) * g.w + x] += row[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(Var input, Var kernel, std::size_t stride, std::size_t pad) {
  Tape* t = tape_of(input, kernel);
  const Tensor& xv = input.value();
  const Tensor& kv = kernel.value();
  require_rank("conv2d input", xv, 4);
  require_rank("conv2d kernel", kv, 4);
  if (stride == 0) throw ContractError("conv2d: stride must be at least 1");
  if (kv.dim(1) != xv.dim(1)) {
    throw DimensionError("conv2d: kernel " + shape_to_string(kv.shape()) + " expects " +
                         std::to_string(kv.dim(1)) + " channels, input " + shape_to_string(xv.shape()));
  }
  ConvGeometry g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), kv.dim(0), kv.dim(2), kv.dim(3), stride, pad, 0, 0};
  if (g.kh > g.h + 2 * pad || g.kw > g.w + 2 * pad) {
    throw DimensionError("conv2d: kernel " + shape_to_string(kv.shape()) + " larger than padded input " +
                         shape_to_string(xv.shape()) + " with pad " + std::to_string(pad));
  }
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;

  Tensor out({g.n, g.f, g.ho, g.wo});
  std::vector<double> cols(g.rows() * g.cols());
  const std::size_t in_stride = g.c * g.h * g.w;
  const std::size_t out_stride = g.f * g.cols();
  for (std::size_t a = 0; a < g.n; ++a) {
    im2col(xv.data().data() + a * in_stride, g, cols.data());
    kernels::gemm_nn(kv.data().data(), cols.data(), out.data().data() + a * out_stride, g.f, g.rows(), g.cols());
  }

  const NodeId ix = input.id(), ik = kernel.id();
  return t->record("conv2d", {input, kernel}, std::move(out),
                   [t, ix, ik, g](const Tensor& grad, std::span<Tensor* const> grads) {
                     const Tensor& xv = val(t, ix);
                     const Tensor& kv = val(t, ik);
                     const std::size_t r = g.rows(), p = g.cols();
                     const std::size_t in_stride = g.c * g.h * g.w;
                     const std::size_t out_stride = g.f * p;
                     std::vector<double> cols(r * p), cols_t(p * r), dcols(r * p);
                     for (std::size_t a = 0; a < g.n; ++a) {
                       const double* ga = grad.data().data() + a * out_stride;
                       if (grads[1]) {
                         im2col(xv.data().data() + a * in_stride, g, cols.data());
                         kernels::transpose(cols.data(), cols_t.data(), r, p);
                         kernels::gemm_nn(ga, cols_t.data(), grads[1]->data().data(), g.f, p, r);
                       }
                       if (grads[0]) {
                         std::fill(dcols.begin(), dcols.end(), 0.0);
                         kernels::gemm_tn(kv.data().data(), ga, dcols.data(), g.f, r, p);
                         col2im_add(dcols.data(), g, grads[0]->data().data() + a * in_stride);
                       }
                     }
                   });
}

Var max_pool2d(Var input, std::size_t size) {
  const Tensor& xv = input.value();
  require_rank("max_pool2d", xv, 4);
  if (size == 0) throw ContractError("max_pool2d: window must be at least 1");
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t ho = h / size, wo = w / size;
  if (ho == 0 || wo == 0) {
    throw DimensionError("max_pool2d: window " + std::to_string(size) + " larger than input " +
                         shape_to_string(xv.shape()));
  }
  Tensor out({n, c, ho, wo});
  std::vector<std::size_t> argmax(out.numel());
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const double* src = xv.data().data() + plane * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = (oy * size) * w + ox * size;
        for (std::size_t i = 0; i < size; ++i) {
          for (std::size_t j = 0; j < size; ++j) {
            const std::size_t idx = (oy * size + i) * w + ox * size + j;
            if (src[idx] > src[best]) best = idx;
          }
        }
        const std::size_t o = (plane * ho + oy) * wo + ox;
        out[o] = src[best];
        argmax[o] = plane * h * w + best;
      }
    }
  }
  return input.tape()->record("max_pool2d", {input}, std::move(out),
                              [argmax = std::move(argmax)](const Tensor& g, std::span<Tensor* const> grads) {
                                for (std::size_t o = 0; o < g.numel(); ++o) (*grads[0])[argmax[o]] += g[o];
                              });
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& zv = logits.value();
  require_rank("softmax_cross_entropy", zv, 2);
  const std::size_t n = zv.dim(0), k = zv.dim(1);
  check_labels("softmax_cross_entropy", labels, n, k);
  Tensor probs(zv.shape());
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double* z = zv.data().data() + r * k;
    const double zmax = *std::max_element(z, z + k);
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(z[j] - zmax);
    const double log_denom = std::log(denom);
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] = std::exp(z[j] - zmax - log_denom);
    loss -= z[labels[r]] - zmax - log_denom;
  }
  loss /= static_cast<double>(n);
  std::vector<int> y(labels.begin(), labels.end());
  return logits.tape()->record(
      "softmax_cross_entropy", {logits}, Tensor::scalar(loss),
      [probs = std::move(probs), y = std::move(y), n, k](const Tensor& g, std::span<Tensor* const> grads) {
        const double s = g[0] / static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t j = 0; j < k; ++j) {
            const double target = static_cast<std::size_t>(y[r]) == j ? 1.0 : 0.0;
            (*grads[0])[r * k + j] += s * (probs[r * k + j] - target);
          }
        }
      });
}

Var squared_error(Var outputs, std::span<const int> labels) {
  const Tensor& ov = outputs.value();
  require_rank("squared_error", ov, 2);
  const std::size_t n = ov.dim(0), k = ov.dim(1);
  check_labels("squared_error", labels, n, k);
  Tensor resid(ov.shape());
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < k; ++j) {
      const double d = ov[r * k + j] - (static_cast<std::size_t>(labels[r]) == j ? 1.0 : 0.0);
      resid[r * k + j] = d;
      loss += d * d;
    }
  }
  loss /= static_cast<double>(n);
  return outputs.tape()->record("squared_error", {outputs}, Tensor::scalar(loss),
                                [resid = std::move(resid), n](const Tensor& g, std::span<Tensor* const> grads) {
                                  const double s = 2.0 * g[0] / static_cast<double>(n);
                                  for (std::size_t i = 0; i < resid.numel(); ++i) (*grads[0])[i] += s * resid[i];
                                });
}

}  // namespace cpmlho::ad
