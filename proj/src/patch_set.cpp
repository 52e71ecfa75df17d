#include "smelab/patch_set.hpp"

#include <algorithm>

#include "smelab/errors.hpp"

namespace smelab {

PatchSet PatchSet::empty(std::size_t d_model) {
  PatchSet p;
  p.keys = Tensor::matrix(d_model, 0);
  p.bias = Tensor(Shape{0});
  p.raw_values = Tensor::matrix(0, d_model);
  p.value_scale = Tensor::matrix(0, d_model);
  return p;
}

Tensor PatchSet::effective_values() const {
  Tensor out = raw_values.detached();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= value_scale[i];
  return out;
}

void PatchSet::validate() const {
  const std::size_t n = size();
  const std::size_t d = d_model();
  if (keys.rank() != 2 || keys.cols() != n) throw ShapeError("patch keys must be d x n");
  if (raw_values.shape() != Shape{n, d} || value_scale.shape() != Shape{n, d}) {
    throw ShapeError("patch values must be n x d");
  }
  if (!owner_edit_ids.empty() && owner_edit_ids.size() != n) {
    throw ShapeError("one owner id per patch");
  }
}

void PatchSet::append(const PatchSet& other) {
  other.validate();
  validate();
  const std::size_t d = d_model() ? d_model() : other.d_model();
  const std::size_t n0 = size(), n1 = other.size();
  const std::size_t n = n0 + n1;
  if (n1 == 0) return;
  if (n0 > 0 && other.d_model() != d) throw ShapeError("patch width mismatch");

  Tensor k = Tensor::matrix(d, n);
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t c = 0; c < n0; ++c) k.at(r, c) = keys.at(r, c);
    for (std::size_t c = 0; c < n1; ++c) k.at(r, n0 + c) = other.keys.at(r, c);
  }
  auto cat = [](const Tensor& a, const Tensor& b, Shape shape) {
    std::vector<double> v(a.values().begin(), a.values().end());
    v.insert(v.end(), b.values().begin(), b.values().end());
    return Tensor(std::move(shape), std::move(v));
  };
  bias = cat(bias, other.bias, Shape{n});
  raw_values = cat(raw_values, other.raw_values, Shape{n, d});
  value_scale = cat(value_scale, other.value_scale, Shape{n, d});
  keys = std::move(k);
  if (owner_edit_ids.size() < n0) owner_edit_ids.resize(n0, -1);
  std::vector<std::int64_t> ids = other.owner_edit_ids;
  ids.resize(n1, -1);
  owner_edit_ids.insert(owner_edit_ids.end(), ids.begin(), ids.end());
}

std::vector<Tensor*> PatchSet::trainable() { return {&keys, &bias, &raw_values, &value_scale}; }

}  // namespace smelab
