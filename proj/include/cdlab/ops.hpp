#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cdlab/tensor.hpp"

// Differentiable primitives. Vectors ([n]) are treated as a batch of one row
// wherever an op reduces over a batch; matrices are [rows x cols] row-major.
namespace cdlab::ops {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

// x [m x n] (or [n]) plus / minus a row vector v [n] broadcast over rows.
Tensor add_row(const Tensor& x, const Tensor& v);
Tensor sub_row(const Tensor& x, const Tensor& v);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation
Tensor sigmoid(const Tensor& x);

// Row-wise over the last dim.
Tensor softmax(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Multi-head causal attention. q is [s x d] for absolute positions
// offset..offset+s-1; k and v are [offset+s x d]. Row i attends to keys
// 0..offset+i. Output [s x d] (heads concatenated).
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                        std::size_t offset);

// Mean over rows of -log softmax(row)[target]. One target per row.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);
Tensor softmax_cross_entropy(const Tensor& logits, std::size_t target);

// Sum of squares over the last dim, mean over rows.
Tensor mse(const Tensor& a, const Tensor& b);
// Sum of |f| over the last dim, mean over rows.
Tensor l1_norm(const Tensor& f);
// KL(softmax(p) || softmax(q)) per row, mean over rows.
Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits);

// Keeps the k largest entries of each row (lowest index wins ties).
Tensor topk_keep(const Tensor& f, std::size_t k);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor select_row(const Tensor& x, std::size_t row);  // -> [cols]
Tensor replace_row(const Tensor& x, std::size_t row, const Tensor& v);
Tensor reshape(const Tensor& x, Shape shape);

// X with A X = B (A square). dB = A^-T G, dA = -dB X^T.
Tensor solve(const Tensor& a, const Tensor& b);

// a + gate * (b - a), evaluated so that gate 0 gives a exactly, gate 1 gives
// b exactly and a == b gives a exactly. gate has the shape of a, or [cols]
// broadcast over rows.
Tensor lerp_gate(const Tensor& a, const Tensor& b, const Tensor& gate);

}  // namespace cdlab::ops
