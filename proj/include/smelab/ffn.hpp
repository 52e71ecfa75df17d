#pragma once

#include "smelab/ops.hpp"
#include "smelab/patch_set.hpp"

namespace smelab {

// Feed-forward block read as a key-value memory:
//   a = Act(q . K + b_k),  FFN(q) = a . V + b_v
struct FfnLayer {
  Tensor keys;        // [d x d_ffn]
  Tensor key_bias;    // [d_ffn]
  Tensor values;      // [d_ffn x d]
  Tensor value_bias;  // [d]

  std::size_t d_model() const { return keys.rows(); }
  std::size_t width() const { return keys.cols(); }
};

struct FfnOutput {
  Var out;          // [n x d]
  Var activations;  // a, [n x d_ffn]
};

// Patch parameters bound to a tape. `values` is the effective value matrix.
struct PatchVars {
  Var keys;    // [d x n]
  Var bias;    // [n]
  Var values;  // [n x d]
};

struct PatchedFfnOutput {
  Var out;
  Var activations;             // base memories, [rows x d_ffn]
  Var patch_preactivations;    // q . K_p + b_p, [rows x n]
  Var patch_activations;       // a_p, [rows x n]
};

enum class PatchedForm {
  // FFN(q) + a_p . V_p
  kAdditive,
  // Act(q . [K K_p] + [b_k b_p]) . [V; V_p] + b_v
  kConcatenated,
};

// Binds a tensor as a leaf when it asks for gradients, else as a constant.
Var bind(Tape& tape, const Tensor& t);

FfnOutput ffn_forward(Tape& tape, const FfnLayer& layer, Var q, Activation act);

PatchVars bind_patches(Tape& tape, const PatchSet& patches);
// Concatenates two bound patch sets along the patch axis.
PatchVars concat_patches(const PatchVars& first, const PatchVars& second);

PatchedFfnOutput patched_ffn_forward(Tape& tape, const FfnLayer& layer, Var q, Activation act,
                                     const PatchVars& patches,
                                     PatchedForm form = PatchedForm::kAdditive);

}  // namespace smelab
