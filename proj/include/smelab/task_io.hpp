#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "smelab/example.hpp"
#include "smelab/model.hpp"

namespace smelab {

// Tokens fed to the model. Generation uses teacher forcing: the prompt
// followed by the reference answer.
std::vector<int> model_input(const ModelConfig& config, const LabeledInput& item);

// Logit positions that carry a prediction for `item` and the labels they
// should produce. Classification: position 0 and the class id. Generation:
// position P-1+j predicts (answer + [eos])[j].
struct Supervision {
  std::vector<std::size_t> positions;
  std::vector<int> labels;
};
Supervision supervision(const ModelConfig& config, const LabeledInput& item);

// Teacher-forced verdict. For generation, `correct` holds iff every answer
// token and the end token are the argmax, which is exactly when greedy
// decoding reproduces the answer.
struct Judgement {
  bool correct = false;
  std::vector<bool> position_correct;
  std::vector<int> predicted;  // argmax at each supervised position
};

std::vector<Judgement> judge(const TransformerModel& model, std::span<const LabeledInput> items,
                             std::size_t chunk = 256);
Judgement judge(const TransformerModel& model, const LabeledInput& item);

// Packs a chunk of items and returns, for each item, the logit rows of its
// supervised positions within the forward output (b*seq_len + pos for
// generation, b for classification).
struct PackedItems {
  Batch batch;
  std::vector<std::vector<std::size_t>> logit_rows;
  std::vector<std::vector<std::size_t>> state_rows;  // rows of the trunk state
  std::vector<std::vector<int>> labels;
};
PackedItems pack_items(const ModelConfig& config, std::span<const LabeledInput> items);

}  // namespace smelab
