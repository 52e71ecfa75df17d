#pragma once

#include <string>
#include <vector>

namespace smelab {

// One labelled input. For classification `target` holds a single class id;
// for generation it is the answer token sequence without the end token.
struct EditExample {
  std::string id;
  std::vector<int> tokens;
  std::vector<int> target;
  std::vector<std::vector<int>> equivalents;
  std::string split;

  bool operator==(const EditExample&) const = default;
};

using Dataset = std::vector<EditExample>;

// An input paired with the output it should receive.
struct LabeledInput {
  std::vector<int> prompt;
  std::vector<int> target;
};

inline LabeledInput labeled(const EditExample& e) { return {e.tokens, e.target}; }

}  // namespace smelab
