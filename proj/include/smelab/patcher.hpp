#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "smelab/example.hpp"
#include "smelab/model.hpp"

namespace smelab {

enum class PatchVariant {
  kFull,       // l_e + a*l_a + m*(l_m1 + l_m2)
  kNoMemory,   // l_e + a*l_a
  kNoMargin,   // l_e + a*l_a + m*l_m1
  kKlPatch,    // l_e + a*l_a + kl_weight * KL on a memory batch
};

std::string to_string(PatchVariant v);
PatchVariant patch_variant_from_string(const std::string& name);

struct PatcherConfig {
  double a = 1.0;
  double m = 10.0;
  std::size_t k = 1000;
  std::size_t k_a = 5;
  // ReLU thresholds, matching the default model; set_thresholds switches.
  double beta = 0.0;
  double gamma = 0.0;
  double lr = 0.01;
  std::size_t batch_repeat = 8;
  std::size_t max_patches_per_edit = 5;
  std::size_t max_steps = 500;
  // Training stops once the example is predicted correctly and both losses
  // are below these values. exp(-3) keeps the retained memories about 3
  // below beta on average over the top k.
  double stop_activation_loss = 0.5;
  double stop_memory_loss = 0.05;
  double value_scale_init = 5.0;
  // Generation: cross-entropy over every answer position instead of only
  // the mistaken ones.
  bool edit_loss_all_positions = false;
  PatchVariant variant = PatchVariant::kFull;
  double kl_weight = 1.0;
  std::size_t kl_batch = 64;
  std::uint64_t seed = 0;

  // Threshold pair suited to the activation: (-3, 3) for GeLU, (0, 0) for
  // ReLU.
  void set_thresholds(Activation act);
  static PatcherConfig for_activation(Activation act);
  void validate() const;
};

// What one edit targets. `queries` holds one row per patch (the first
// max_patches_per_edit mistakes); the position lists cover every mistake.
struct EditTargets {
  Tensor queries;                        // q_e, [n x d]
  std::vector<std::size_t> positions;    // sequence positions of all mistakes
  std::vector<int> labels;               // desired output at each mistake
  std::size_t patch_count() const { return queries.rows(); }
};

// Throws ContractViolation when the model already predicts `example`.
EditTargets count_mistakes(const TransformerModel& model, const LabeledInput& example,
                           const PatcherConfig& cfg);

// K_p[:, i] = q_i / |q_i|^2, b_p = 0, V_raw ~ U(0, 1), N_scale = value_scale_init.
// Throws DegenerateInputError on a zero query.
PatchSet init_patches(const EditTargets& targets, const PatcherConfig& cfg, Rng& rng);

// A_i = q_e^i . K_p[:, i] + b_p[i], shape [n].
Var edit_preactivations(Var queries, const PatchVars& patches);

// S(-A; min(k_a, n)); exp(-A) for a single patch.
Var activation_loss(Var preactivations, const PatcherConfig& cfg);

struct MemoryLoss {
  Var l_m1;
  Var l_m2;
  Var preactivations;  // M . K_p + b_p, [d_m x n]
};
// l_m1 = S(flatten(P - beta); k), l_m2 = S(flatten(P - A - gamma); k).
// Throws ParameterError for an empty memory.
MemoryLoss memory_loss(Var memory, const PatchVars& patches, Var preactivations,
                       const PatcherConfig& cfg);

// The one-patch formulas written out directly:
//   l_a = exp(-q_e.k_p - b_p)
//   l_m1 = S(M.k_p + b_p - beta; k)
//   l_m2 = S((M - q_e).k_p - gamma; k)
struct SinglePatchLoss {
  Var l_a;
  Var l_m1;
  Var l_m2;
};
SinglePatchLoss single_patch_losses(Var query, Var memory, Var key, Var bias, const PatcherConfig& cfg);

struct LossTerms {
  double l_e = 0.0;
  double l_a = 0.0;
  double l_m1 = 0.0;
  double l_m2 = 0.0;
  double l_kl = 0.0;
  double total = 0.0;
};

// Weighted sum for the configured variant.
double total_loss(const LossTerms& t, const PatcherConfig& cfg);
Var total_loss(Var l_e, Var l_a, Var l_m1, Var l_m2, Var l_kl, const PatcherConfig& cfg);

// Cross-entropy of the edit example's logits. `logits` rows correspond to
// `labels`; classification averages, generation sums over positions. With
// replicated rows the result is averaged over `repeats`.
Var edit_loss(Var logits, std::span<const int> labels, TaskKind task, std::size_t repeats = 1);

struct PatchEditResult {
  bool success = false;  // stopping rule met within max_steps
  std::size_t steps = 0;
  std::size_t patches_added = 0;
  LossTerms losses;
  // Largest pre-activation of the new patches on any memory row, and the
  // bound the stopping rule guarantees for it.
  double memory_preactivation_max = 0.0;
  double locality_bound = 0.0;
  std::uint64_t core_hash = 0;
};

// Everything apply_edit needs besides the model and the example.
struct EditResources {
  const Tensor* memory = nullptr;           // M, [d_m x d]
  std::span<const LabeledInput> kl_pool;    // inputs for KL terms
  std::int64_t edit_id = 0;
};

// Freezes the core, appends fresh patches for the example's mistakes and
// trains only those with Adam. Patches are kept even when the stopping rule
// is not met. Throws ContractViolation if the example is already correct.
PatchEditResult apply_edit(TransformerModel& model, const LabeledInput& example,
                           const EditResources& resources, const PatcherConfig& cfg);

}  // namespace smelab
