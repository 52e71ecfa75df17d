#include "smelab/ffn.hpp"

#include "smelab/errors.hpp"

namespace smelab {

namespace {

Var concat_rows(Var a, Var b) { return transpose(concat_cols(transpose(a), transpose(b))); }

Var as_row(Var v) { return reshape(v, Shape{1, v.numel()}); }

}  // namespace

Var bind(Tape& tape, const Tensor& t) {
  // Gradients are accumulated into the tensor's own buffer, which is
  // mutable state even on a logically const model.
  if (t.requires_grad()) return tape.leaf(const_cast<Tensor&>(t));
  return tape.constant_ref(t);
}

FfnOutput ffn_forward(Tape& tape, const FfnLayer& layer, Var q, Activation act) {
  if (q.value().rank() != 2 || q.value().cols() != layer.d_model()) {
    throw ShapeError("ffn_forward: query width " + shape_string(q.shape()) + " vs d=" +
                     std::to_string(layer.d_model()));
  }
  Var a = activation(add_row_vector(matmul(q, bind(tape, layer.keys)), bind(tape, layer.key_bias)),
                     act);
  Var out = add_row_vector(matmul(a, bind(tape, layer.values)), bind(tape, layer.value_bias));
  return {out, a};
}

PatchVars bind_patches(Tape& tape, const PatchSet& patches) {
  Var values = mul(bind(tape, patches.raw_values), bind(tape, patches.value_scale));
  return {bind(tape, patches.keys), bind(tape, patches.bias), values};
}

PatchVars concat_patches(const PatchVars& first, const PatchVars& second) {
  if (first.bias.numel() == 0) return second;
  if (second.bias.numel() == 0) return first;
  Var bias = concat_cols(as_row(first.bias), as_row(second.bias));
  return {concat_cols(first.keys, second.keys), reshape(bias, Shape{bias.numel()}),
          concat_rows(first.values, second.values)};
}

PatchedFfnOutput patched_ffn_forward(Tape& tape, const FfnLayer& layer, Var q, Activation act,
                                     const PatchVars& patches, PatchedForm form) {
  const std::size_t d = layer.d_model();
  if (patches.keys.value().rank() != 2 || patches.keys.value().rows() != d ||
      patches.values.value().rank() != 2 || patches.values.value().cols() != d ||
      patches.values.value().rows() != patches.keys.value().cols() ||
      patches.bias.numel() != patches.keys.value().cols()) {
    throw ShapeError("patched_ffn_forward: patch shapes inconsistent with d=" + std::to_string(d));
  }
  if (form == PatchedForm::kAdditive) {
    FfnOutput base = ffn_forward(tape, layer, q, act);
    Var pre = add_row_vector(matmul(q, patches.keys), patches.bias);
    Var ap = activation(pre, act);
    Var out = add(base.out, matmul(ap, patches.values));
    return {out, base.activations, pre, ap};
  }
  if (q.value().rank() != 2 || q.value().cols() != d) throw ShapeError("patched_ffn_forward: query width");
  Var keys = concat_cols(bind(tape, layer.keys), patches.keys);
  Var bias = concat_cols(as_row(bind(tape, layer.key_bias)), as_row(patches.bias));
  Var values = concat_rows(bind(tape, layer.values), patches.values);
  Var pre_all = add_row_vector(matmul(q, keys), reshape(bias, Shape{bias.numel()}));
  Var a_all = activation(pre_all, act);
  Var out = add_row_vector(matmul(a_all, values), bind(tape, layer.value_bias));
  // Split views for inspection.
  const std::size_t m = layer.width(), n = patches.bias.numel();
  std::vector<std::size_t> base_cols(m), patch_cols(n);
  for (std::size_t i = 0; i < m; ++i) base_cols[i] = i;
  for (std::size_t i = 0; i < n; ++i) patch_cols[i] = m + i;
  auto cols_of = [&](Var x, const std::vector<std::size_t>& cols) {
    return transpose(select_rows(transpose(x), cols));
  };
  return {out, cols_of(a_all, base_cols), cols_of(pre_all, patch_cols), cols_of(a_all, patch_cols)};
}

}  // namespace smelab
