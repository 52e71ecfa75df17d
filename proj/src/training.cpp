#include "smelab/training.hpp"

#include <algorithm>
#include <numeric>

#include "smelab/adam.hpp"
#include "smelab/errors.hpp"
#include "smelab/task_io.hpp"

namespace smelab {

Accuracy evaluate_accuracy(const TransformerModel& model, std::span<const LabeledInput> items) {
  Accuracy acc;
  if (items.empty()) return acc;
  std::size_t tokens = 0, tokens_ok = 0;
  for (const Judgement& j : judge(model, items)) {
    acc.correct += j.correct ? 1 : 0;
    tokens += j.position_correct.size();
    tokens_ok += static_cast<std::size_t>(std::count(j.position_correct.begin(), j.position_correct.end(), true));
  }
  acc.total = items.size();
  acc.examples = static_cast<double>(acc.correct) / static_cast<double>(acc.total);
  acc.tokens = static_cast<double>(tokens_ok) / static_cast<double>(tokens);
  return acc;
}

TrainReport train_initial(TransformerModel& model, std::span<const EditExample> data,
                          const TrainOptions& options) {
  if (options.batch_size == 0) throw ParameterError("batch_size must be positive");
  if (data.empty()) throw ParameterError("empty training set");
  const auto& cfg = model.config();
  std::vector<LabeledInput> items;
  items.reserve(data.size());
  for (const auto& e : data) items.push_back(labeled(e));

  Rng rng(options.seed);
  std::vector<LabeledInput> probe = items;
  if (options.probe_size > 0 && probe.size() > options.probe_size) {
    shuffle(std::span<LabeledInput>(probe), rng);
    probe.resize(options.probe_size);
  }
  auto floor_metric = [&](const Accuracy& a) {
    return cfg.task == TaskKind::kClassification ? a.examples : a.tokens;
  };

  TrainReport report;
  model.set_trainable(ParamScope::kAll);
  Adam adam(model.parameters(ParamScope::kAll), {.lr = options.lr});
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    shuffle(std::span<std::size_t>(order), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t end = std::min(order.size(), start + options.batch_size);
      std::vector<LabeledInput> chunk;
      for (std::size_t i = start; i < end; ++i) chunk.push_back(items[order[i]]);
      PackedItems packed = pack_items(cfg, chunk);
      std::vector<std::size_t> rows;
      std::vector<int> labels;
      for (std::size_t b = 0; b < chunk.size(); ++b) {
        rows.insert(rows.end(), packed.logit_rows[b].begin(), packed.logit_rows[b].end());
        labels.insert(labels.end(), packed.labels[b].begin(), packed.labels[b].end());
      }
      Tape tape;
      Var logits = model.forward(tape, packed.batch).logits;
      Var loss = softmax_cross_entropy(select_rows(logits, rows), labels);
      tape.backward(loss);
      adam.step();
      loss_sum += loss.item();
      ++batches;
    }
    report.epoch_losses.push_back(loss_sum / static_cast<double>(batches));
    report.epochs_run = epoch + 1;
    if (options.stop_accuracy < 1.0 && floor_metric(evaluate_accuracy(model, probe)) >= options.stop_accuracy) {
      break;
    }
  }
  model.set_trainable(ParamScope::kNone);

  report.final_loss = report.epoch_losses.empty() ? 0.0 : report.epoch_losses.back();
  Accuracy acc = evaluate_accuracy(model, items);
  report.accuracy = acc.examples;
  report.token_accuracy = acc.tokens;
  report.reached_floor = floor_metric(acc) >= options.accuracy_floor;
  return report;
}

}  // namespace smelab
