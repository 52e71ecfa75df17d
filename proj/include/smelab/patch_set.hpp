#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "smelab/tensor.hpp"

namespace smelab {

// Extra key-value neurons appended to one FFN layer.
//
//   keys         [d x n]   patch keys, one column per patch
//   bias         [n]       patch biases
//   raw_values   [n x d]   value factor v'
//   value_scale  [n x d]   value factor n_p; the effective value is
//                          raw_values * value_scale elementwise
struct PatchSet {
  Tensor keys;
  Tensor bias;
  Tensor raw_values;
  Tensor value_scale;
  // Edit index that created each patch.
  std::vector<std::int64_t> owner_edit_ids;

  static PatchSet empty(std::size_t d_model);

  std::size_t size() const { return bias.numel(); }
  std::size_t d_model() const { return keys.rank() == 2 ? keys.rows() : 0; }
  bool empty() const { return size() == 0; }

  Tensor effective_values() const;
  // Appends the patches of `other` after the existing ones.
  void append(const PatchSet& other);
  // Checks internal shape consistency; throws ShapeError.
  void validate() const;
  std::vector<Tensor*> trainable();
};

}  // namespace smelab
