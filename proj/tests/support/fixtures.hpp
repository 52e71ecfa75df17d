#pragma once

#include <string>

#include "smelab/example.hpp"
#include "smelab/model.hpp"
#include "smelab/training.hpp"

namespace smelab::testing {

// Label is whether the second token falls in the upper half of the range.
inline Dataset separable_task(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) {
    const int x = 4 + static_cast<int>(uniform_index(rng, 40));
    const int y = 4 + static_cast<int>(uniform_index(rng, 40));
    d.push_back({"s" + std::to_string(i), {1, x, y}, {x >= 24 ? 1 : 0}, {{1, x, y, 2}}, "train"});
  }
  return d;
}

// Answer repeats the three content tokens after a separator.
inline Dataset copy_task(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<int> body;
    for (int j = 0; j < 3; ++j) body.push_back(5 + static_cast<int>(uniform_index(rng, 10)));
    std::vector<int> prompt{1};
    prompt.insert(prompt.end(), body.begin(), body.end());
    prompt.push_back(4);
    d.push_back({"c" + std::to_string(i), prompt, body, {}, "train"});
  }
  return d;
}

inline ModelConfig small_config(TaskKind task, Activation act = Activation::kReLU) {
  ModelConfig c;
  c.task = task;
  c.activation = act;
  c.vocab_size = task == TaskKind::kClassification ? 48 : 16;
  c.d_model = 32;
  c.d_ffn = 64;
  return c;
}

inline TransformerModel trained_classifier(Activation act = Activation::kReLU) {
  TransformerModel m(small_config(TaskKind::kClassification, act), 1);
  TrainOptions opt;
  opt.epochs = 40;
  opt.lr = 3e-3;
  opt.seed = 3;
  opt.stop_accuracy = 0.995;
  train_initial(m, separable_task(600, 2), opt);
  return m;
}

inline TransformerModel trained_copier(Activation act = Activation::kReLU) {
  TransformerModel m(small_config(TaskKind::kGeneration, act), 3);
  TrainOptions opt;
  opt.epochs = 60;
  opt.lr = 3e-3;
  opt.seed = 5;
  opt.stop_accuracy = 0.99;
  train_initial(m, copy_task(800, 4), opt);
  return m;
}

}  // namespace smelab::testing
