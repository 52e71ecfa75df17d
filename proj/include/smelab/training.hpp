#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "smelab/example.hpp"
#include "smelab/model.hpp"

namespace smelab {

struct TrainOptions {
  std::size_t epochs = 30;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  // Accuracy the trained model must reach on its train split. Classification
  // measures whole examples, generation measures teacher-forced tokens.
  double accuracy_floor = 0.9;
  // Stop as soon as an epoch ends above `stop_accuracy` (1.0 never stops).
  double stop_accuracy = 1.0;
  // Examples used for the per-epoch accuracy probe; 0 means all.
  std::size_t probe_size = 2000;
};

struct TrainReport {
  std::size_t epochs_run = 0;
  double final_loss = 0.0;
  double accuracy = 0.0;        // whole-example accuracy on the train split
  double token_accuracy = 0.0;  // supervised-position accuracy
  bool reached_floor = false;
  std::vector<double> epoch_losses;
};

// Fits every core parameter with Adam on minibatches drawn in a seeded order.
// Leaves all parameters frozen afterwards.
TrainReport train_initial(TransformerModel& model, std::span<const EditExample> data,
                          const TrainOptions& options);

struct Accuracy {
  double examples = 0.0;
  double tokens = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
};
Accuracy evaluate_accuracy(const TransformerModel& model, std::span<const LabeledInput> items);

}  // namespace smelab
