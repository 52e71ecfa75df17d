#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "smelab/tape.hpp"

namespace smelab {

enum class Activation { kReLU, kGeLU };

// Exact GeLU, x * Phi(x) with the Gaussian CDF.
double gelu(double x);
double gelu_derivative(double x);
double activate(double x, Activation kind);

enum class Reduction { kMean, kSum };

// Rank-2 [m x k] . [k x n].
Var matmul(Var a, Var b);
// a . b^T for a [m x k], b [n x k].
Var matmul_nt(Var a, Var b);
Var transpose(Var a);

// Same-shape elementwise arithmetic.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
// Adds vector v[n] to every row of a[m x n]. This is the only broadcast.
Var add_row_vector(Var a, Var v);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
Var neg(Var a);

Var activation(Var x, Activation kind);
Var exp(Var x);

Var sum(Var x);
Var mean(Var x);
// [m x n] -> [m]
Var row_sum(Var x);
Var reshape(Var x, Shape shape);
Var flatten(Var x);

// Row-wise normalisation over the last dim of x[n x d] with gain/bias [d].
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

// Cross-entropy of logits[n x c] against class ids, stabilised by max
// subtraction.
Var softmax_cross_entropy(Var logits, std::span<const int> targets,
                          Reduction reduction = Reduction::kMean);

// Mean over rows of KL(ref || softmax(logits)); ref_probs is a constant
// [n x c] distribution.
Var kl_divergence(const Tensor& ref_probs, Var logits);

// S(v; k): mean of the k largest entries of exp(v), over all elements of v.
// k is clamped to numel(v); ties pick the lowest index.
Var topk_mean_exp(Var v, std::size_t k);

// Gathers rows of table[V x d].
Var embedding(Var table, std::span<const int> ids);
Var select_rows(Var x, std::span<const std::size_t> rows);
Var concat_cols(Var a, Var b);

struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t seq_len = 1;
  std::size_t heads = 1;
  // Valid (non-pad) length of each sequence; keys at or past it are masked.
  std::vector<std::size_t> lengths;
  bool causal = false;
};

// Multi-head scaled dot-product attention over already projected
// q, k, v of shape [batch*seq_len x d].
Var attention(Var q, Var k, Var v, const AttentionLayout& layout);

// Plain helpers.
Tensor softmax_rows(const Tensor& logits);
std::vector<std::size_t> topk_indices(std::span<const double> values, std::size_t k);

}  // namespace smelab
