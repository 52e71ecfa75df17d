#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "smelab/editors.hpp"
#include "smelab/example.hpp"
#include "smelab/memory_bank.hpp"
#include "smelab/model.hpp"

namespace smelab {

// A prediction is the argmax at each supervised position (the class for
// classification; answer tokens then the end token for generation). It
// equals `labels` exactly when greedy decoding reproduces the target.
using RawPrediction = std::vector<int>;

struct StepRecord {
  std::size_t t = 0;  // position in the stream
  std::string example_id;
  bool edited = false;
  std::vector<int> labels;
  RawPrediction pre;
  // Edited steps only.
  RawPrediction post;
  std::vector<RawPrediction> equivalents;  // post-edit, one per equivalent input
  bool editor_success = false;
  std::size_t steps = 0;
  std::size_t patches_added = 0;
  LossTerms losses;
  double wall_ms = 0.0;
  // Query rows the new patches were built from (patch editors).
  Tensor patch_queries;
  // Retention right after this edit: past edits (including this one) still
  // predicted correctly, and correct counts on the retention sets.
  std::size_t past_correct = 0;
  std::size_t train_correct = 0;
  std::size_t test_correct = 0;
};

struct SmeRun {
  std::string editor;
  std::size_t fold = 0;
  std::vector<StepRecord> records;
  // Labels and raw predictions of f_0 and f_T on D_tr and D_test.
  std::vector<std::vector<int>> train_labels, test_labels;
  std::vector<RawPrediction> f0_train, fT_train, f0_test, fT_test;
  // f_T on every edited example, in edit order.
  std::vector<RawPrediction> final_edit_predictions;
  std::size_t f0_mistakes = 0;  // N: f_0 mistakes on the stream
  bool traced = false;          // per-step retention counts were recorded
  std::size_t initial_params = 0, final_params = 0;
  // Queries of random test inputs for activation statistics.
  Tensor random_queries;
  TransformerModel final_model;
  std::optional<MemoryBank> memory;
};

bool prediction_correct(const RawPrediction& p, const std::vector<int>& labels);

// Model identity for caching: core parameters, patches and the patched layer.
std::uint64_t model_fingerprint(const TransformerModel& model);

// Predictions memoised per (model fingerprint, item-set name). Thread safe.
class PredictionCache {
 public:
  std::vector<RawPrediction> get(const TransformerModel& model, const std::string& set_name,
                              std::span<const LabeledInput> items);
  std::size_t hits() const { return hits_; }

 private:
  std::mutex mu_;
  std::map<std::pair<std::uint64_t, std::string>, std::vector<RawPrediction>> entries_;
  std::size_t hits_ = 0;
};

std::vector<RawPrediction> predict_all(const TransformerModel& model, std::span<const LabeledInput> items);

struct EvalSets {
  std::vector<LabeledInput> train;  // D_tr
  std::vector<LabeledInput> test;   // D_test
  std::vector<LabeledInput> random;  // inputs whose queries feed activation statistics
};

struct SmeOptions {
  // Evaluate D_tr / D_test after every edit for the per-step traces.
  bool traces = true;
};

// Sequential editing: skip what the current model gets right, edit the
// rest, record predictions right after each edit, then feed the edit's
// queries to the memory.
SmeRun run_sme(const TransformerModel& f0, const Editor& editor, std::span<const EditExample> stream,
               std::optional<MemoryBank> memory, std::span<const LabeledInput> kl_pool, const EvalSets& eval,
               const SmeOptions& options = {}, PredictionCache* cache = nullptr);

struct SplitRatios {
  double train = 0.8, val = 0.1, edit = 0.1;
  static SplitRatios fact_check() { return {0.8, 0.1, 0.1}; }
  static SplitRatios kv_qa() { return {0.9, 0.075, 0.025}; }
};

struct DataSplits {
  Dataset train;  // D'_train = d_tr + pool
  Dataset val, edit, test;
  Dataset d_tr;   // retention set drawn from train
  Dataset pool;   // train minus d_tr, source of memories
};

// Examples tagged "test" form D_test; the rest are shuffled and cut by the
// ratios. d_tr_size examples of train form D_tr.
DataSplits split_dataset(const Dataset& raw, const SplitRatios& ratios, std::size_t d_tr_size, std::uint64_t seed);

// Deterministic shuffle of the edit set cut into n contiguous folds.
std::vector<Dataset> make_folds(const Dataset& edit, std::size_t n_folds, std::uint64_t seed);

struct FoldOptions {
  std::size_t n_folds = 5;
  std::uint64_t seed = 0;
  std::size_t memory_capacity = 2000;
  MemoryPolicy memory_policy = MemoryPolicy::kReservoir;
  std::size_t random_inputs = 200;
  std::size_t workers = 1;
  SmeOptions sme;
};

// Every fold starts from f0 with its own memory sampled from the pool.
std::vector<SmeRun> run_folds(const TransformerModel& f0, const DataSplits& splits, const EditorConfig& editor,
                              const FoldOptions& options);

// Re-derives every skip/edit decision from the recorded pre-edit
// predictions. Given the final model of a patch editor, also rebuilds each
// f_t as the core plus the patches owned by edits up to t and re-predicts
// the recorded pre- and post-edit outputs.
struct ReplayResult {
  std::size_t decisions = 0;
  std::size_t decision_mismatches = 0;
  std::size_t predictions_checked = 0;
  std::size_t prediction_mismatches = 0;
  std::size_t mismatches() const { return decision_mismatches + prediction_mismatches; }
};
ReplayResult replay(std::span<const StepRecord> records, std::span<const EditExample> stream,
                    const TransformerModel* patched_final = nullptr);

// The first n patches of a set.
PatchSet patch_prefix(const PatchSet& patches, std::size_t n);

}  // namespace smelab
