#include "smelab/task_io.hpp"

#include <algorithm>

#include "smelab/errors.hpp"

namespace smelab {

std::vector<int> model_input(const ModelConfig& config, const LabeledInput& item) {
  if (config.task == TaskKind::kClassification) return item.prompt;
  std::vector<int> seq = item.prompt;
  seq.insert(seq.end(), item.target.begin(), item.target.end());
  return seq;
}

Supervision supervision(const ModelConfig& config, const LabeledInput& item) {
  if (item.prompt.empty()) throw ShapeError("empty prompt");
  Supervision s;
  if (config.task == TaskKind::kClassification) {
    if (item.target.size() != 1) throw ShapeError("classification target must hold one class id");
    s.positions = {0};
    s.labels = {item.target[0]};
    return s;
  }
  const std::size_t p = item.prompt.size();
  for (std::size_t j = 0; j <= item.target.size(); ++j) {
    s.positions.push_back(p - 1 + j);
    s.labels.push_back(j < item.target.size() ? item.target[j] : config.eos_token);
  }
  return s;
}

PackedItems pack_items(const ModelConfig& config, std::span<const LabeledInput> items) {
  PackedItems out;
  std::vector<std::vector<int>> seqs;
  seqs.reserve(items.size());
  for (const auto& it : items) seqs.push_back(model_input(config, it));
  out.batch = Batch::pack(seqs, config.pad_token);
  for (std::size_t b = 0; b < items.size(); ++b) {
    Supervision s = supervision(config, items[b]);
    std::vector<std::size_t> logit_rows, state_rows;
    for (std::size_t pos : s.positions) {
      state_rows.push_back(out.batch.row(b, pos));
      logit_rows.push_back(config.task == TaskKind::kClassification ? b : out.batch.row(b, pos));
    }
    out.logit_rows.push_back(std::move(logit_rows));
    out.state_rows.push_back(std::move(state_rows));
    out.labels.push_back(std::move(s.labels));
  }
  return out;
}

std::vector<Judgement> judge(const TransformerModel& model, std::span<const LabeledInput> items,
                             std::size_t chunk) {
  std::vector<Judgement> out;
  out.reserve(items.size());
  chunk = std::max<std::size_t>(chunk, 1);
  for (std::size_t start = 0; start < items.size(); start += chunk) {
    auto part = items.subspan(start, std::min(chunk, items.size() - start));
    PackedItems packed = pack_items(model.config(), part);
    Tape tape(GradMode::kDisabled);
    const Tensor& logits = model.forward(tape, packed.batch).logits.value();
    for (std::size_t b = 0; b < part.size(); ++b) {
      Judgement j;
      j.correct = true;
      for (std::size_t i = 0; i < packed.logit_rows[b].size(); ++i) {
        const int pred = static_cast<int>(argmax(logits.row(packed.logit_rows[b][i])));
        const bool ok = pred == packed.labels[b][i];
        j.predicted.push_back(pred);
        j.position_correct.push_back(ok);
        j.correct = j.correct && ok;
      }
      out.push_back(std::move(j));
    }
  }
  return out;
}

Judgement judge(const TransformerModel& model, const LabeledInput& item) {
  return judge(model, std::span<const LabeledInput>(&item, 1)).front();
}

}  // namespace smelab
