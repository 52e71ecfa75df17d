#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "smelab/editors.hpp"
#include "smelab/metrics.hpp"
#include "smelab/sme_harness.hpp"
#include "smelab/synth_data.hpp"

namespace smelab {

// Everything a run depends on. Serialises to JSON with a stable key order;
// each stage stores the hash of the fields that shaped its artifacts.
struct RunConfig {
  std::string task = "fact-check";  // fact-check | kv-qa
  std::uint64_t seed = 1;
  std::size_t examples = 0;         // 0: 10000 for fact-check, 12000 for kv-qa
  double test_fraction = 0.1;
  std::size_t d_tr_size = 1000;
  std::string activation = "relu";
  std::size_t epochs = 15;
  double train_lr = 1e-3;
  std::size_t batch_size = 32;
  std::string editor = "t-patcher";
  std::string ablation = "none";
  // Fine-tuning baselines; 1e-5 rarely corrects a desk-scale mistake within
  // the step budget.
  double ft_lr = 1e-3;
  std::optional<std::size_t> patched_layer;  // default: the last block
  std::size_t folds = 5;
  std::vector<std::size_t> memory_sizes{2000};
  std::string memory_policy = "reservoir";
  std::size_t random_inputs = 200;
  std::size_t workers = 1;
  bool traces = true;

  void validate() const;
  SynthKind synth_kind() const;
  std::size_t example_count() const;
  SplitRatios ratios() const;
  EditorConfig editor_config() const;

  nlohmann::ordered_json to_json() const;
  // Keys missing from `j` keep their current value; unknown keys throw.
  void merge_json(const nlohmann::ordered_json& j);
  static RunConfig from_json(const nlohmann::ordered_json& j);

  std::string data_hash() const;   // task, seed, examples, test split
  std::string model_hash() const;  // data_hash plus split and training
  std::string hash() const;        // every field
};

RunConfig load_run_config(const std::filesystem::path& path);

std::string fnv_hex(const std::string& bytes);
std::string file_hash(const std::filesystem::path& path);

// Stage outputs.
//   gen:   data.jsonl, manifest.json
//   train: f0.ckpt, manifest.json (split sizes, accuracies)
//   edit:  summary.csv, manifest.json and per fold fold_<k>/ with
//          records.jsonl, stream.jsonl, steps.csv, activations.csv,
//          activation_stats.csv, final.ckpt; a memory sweep nests one such
//          tree per size under mem_<size>/ and adds memory_sweep.csv
//   report: report.csv, activation_report.csv
// Missing inputs throw MissingInput, foreign artifacts ConfigMismatch and
// unknown checkpoint versions VersionMismatch.
nlohmann::ordered_json cmd_gen(const RunConfig& cfg, const std::filesystem::path& out);
nlohmann::ordered_json cmd_train(const RunConfig& cfg, const std::filesystem::path& data_dir,
                                 const std::filesystem::path& out);
nlohmann::ordered_json cmd_edit(const RunConfig& cfg, const std::filesystem::path& model_dir,
                                const std::filesystem::path& out);
// Aggregates one or more edit directories into mean and std per editor.
std::string cmd_report(const std::vector<std::filesystem::path>& edit_dirs, const std::filesystem::path& out);
ReplayResult cmd_replay(const std::filesystem::path& edit_dir, std::size_t fold);

// Split and data handling shared by the stages.
struct PreparedData {
  Dataset raw;
  DataSplits splits;
};
PreparedData prepare_data(const RunConfig& cfg, const std::filesystem::path& data_file);

nlohmann::ordered_json record_json(const StepRecord& r);
StepRecord record_from_json(const nlohmann::ordered_json& j);

// Writes to a temporary sibling and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

}  // namespace smelab
