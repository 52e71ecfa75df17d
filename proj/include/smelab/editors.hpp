#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>

#include "smelab/example.hpp"
#include "smelab/model.hpp"
#include "smelab/patcher.hpp"

namespace smelab {

enum class EditorKind { kTPatcher, kFineTune };

struct FineTuneConfig {
  ParamScope scope = ParamScope::kLastLayer;
  double lr = 1e-5;
  std::size_t max_steps = 500;
  // Adds kl_weight * KL(pre-edit || current) on a batch drawn from the pool
  // at every step.
  bool kl = false;
  double kl_weight = 1.0;
  std::size_t kl_batch = 64;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EditorConfig {
  EditorKind kind = EditorKind::kTPatcher;
  PatcherConfig patcher;
  FineTuneConfig ft;

  // "t-patcher", "t-patcher/no-lm", "ft-last", "ft-all-kl", ...
  std::string name() const;
  bool uses_patches() const { return kind == EditorKind::kTPatcher; }
  bool uses_memory() const;
  bool uses_kl_pool() const;
};

// editor: t-patcher | ft-last | ft-all | ft-last-kl | ft-all-kl
// ablation (t-patcher only): none | no-lm | no-lm2 | kl-patch
EditorConfig editor_config(const std::string& editor, const std::string& ablation = "none");

struct EditContext {
  const Tensor* memory = nullptr;
  std::span<const LabeledInput> kl_pool;
  std::int64_t edit_id = 0;
};

struct EditOutcome {
  bool success = false;
  std::size_t steps = 0;
  std::size_t patches_added = 0;
  LossTerms losses;
};

class Editor {
 public:
  explicit Editor(EditorConfig config) : config_(std::move(config)) {}
  virtual ~Editor() = default;

  // Requires the model to get the example wrong.
  virtual EditOutcome edit(TransformerModel& model, const LabeledInput& example, const EditContext& ctx) const = 0;
  const EditorConfig& config() const { return config_; }

 protected:
  EditorConfig config_;
};

std::unique_ptr<Editor> make_editor(const EditorConfig& config);

// Mean over supervised rows of KL(reference || model) on `batch`.
Var kl_regularizer(Tape& tape, const TransformerModel& reference, const TransformerModel& model,
                   std::span<const LabeledInput> batch);

// Fine-tunes the chosen parameter group until the example is predicted
// correctly or the step budget runs out. Leaves every parameter frozen.
EditOutcome ft_edit(TransformerModel& model, const LabeledInput& example, const FineTuneConfig& cfg,
                    std::span<const LabeledInput> kl_pool = {}, std::int64_t edit_id = 0);

}  // namespace smelab
