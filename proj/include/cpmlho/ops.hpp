#pragma once

#include <cstddef>
#include <span>

#include "cpmlho/tape.hpp"

namespace cpmlho::ad {

// Elementwise binary ops. Operands share a shape, or one of them has a
// single element and is broadcast.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);

Var neg(Var x);
Var scale(Var x, double c);
Var add_scalar(Var x, double c);
Var exp(Var x);
Var log(Var x);
Var sigmoid(Var x);
Var relu(Var x);
Var square(Var x);

/// Sum of all entries, shape [1].
Var sum(Var x);
/// Mean of all entries, shape [1].
Var mean(Var x);
/// Entry `index` of the flattened tensor, shape [1].
Var select(Var x, std::size_t index);
Var reshape(Var x, Shape shape);

/// [m x k] * [k x p] -> [m x p]
Var matmul(Var a, Var b);
Var transpose(Var a);

/// y[r, ...] = x[r, ...] * gate[r]; gate has one entry per leading index of x.
Var scale_rows(Var x, Var gate);
/// y[n, c, ...] = x[n, c, ...] + bias[c].
Var add_bias(Var x, Var bias);

/// Zero-padded cross-correlation. input [N x C x H x W], kernel [F x C x kh x kw].
Var conv2d(Var input, Var kernel, std::size_t stride, std::size_t pad);
/// Non-overlapping max pooling with a size x size window; trailing rows and
/// columns that do not fill a window are dropped.
Var max_pool2d(Var input, std::size_t size);

/// Mean softmax cross-entropy of logits [N x K] against integer labels.
Var softmax_cross_entropy(Var logits, std::span<const int> labels);
/// Mean over the batch of sum_k (output_k - onehot(label)_k)^2.
Var squared_error(Var outputs, std::span<const int> labels);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator+(Var a, double c) { return add_scalar(a, c); }
inline Var operator+(double c, Var a) { return add_scalar(a, c); }
inline Var operator-(double c, Var a) { return add_scalar(neg(a), c); }

}  // namespace cpmlho::ad
