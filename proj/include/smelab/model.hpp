#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "smelab/ffn.hpp"
#include "smelab/patch_set.hpp"
#include "smelab/random.hpp"

namespace smelab {

enum class TaskKind { kClassification, kGeneration };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& name);
std::string to_string(Activation kind);
Activation activation_from_string(const std::string& name);

struct ModelConfig {
  std::size_t vocab_size = 200;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t d_ffn = 128;
  Activation activation = Activation::kReLU;
  TaskKind task = TaskKind::kClassification;
  std::size_t n_classes = 2;
  std::size_t max_seq_len = 16;
  int pad_token = 0;
  int eos_token = 3;

  // Throws ParameterError.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct TransformerBlock {
  LayerNormParams ln_attn;
  AttentionParams attn;
  LayerNormParams ln_ffn;
  FfnLayer ffn;
};

// Right-padded token matrix.
struct Batch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<int> ids;  // batch * seq_len
  std::vector<std::size_t> lengths;

  static Batch pack(std::span<const std::vector<int>> sequences, int pad_token);
  std::size_t row(std::size_t b, std::size_t t) const { return b * seq_len + t; }
};

struct ForwardOutput {
  // Classification: [batch x n_classes] from the first position.
  // Generation: [batch*seq_len x vocab], one row per position.
  Var logits;
  // Inputs to the patched FFN at every position, [batch*seq_len x d].
  Var ffn_queries;
  // Patch activations at every position when patches are present.
  std::optional<Var> patch_activations;
};

// Residual stream and FFN query entering the patched layer's FFN sublayer.
struct PatchedLayerState {
  Tensor residual;  // [rows x d]
  Tensor query;     // [rows x d]
};

enum class ParamScope { kNone, kLastLayer, kAll };

// Pre-norm transformer for classification (first-position pooling,
// bidirectional attention) or decoder-only generation (causal attention,
// output projection tied to the token embedding). One FFN layer, by default
// the last, carries a PatchSet.
class TransformerModel {
 public:
  TransformerModel() = default;
  TransformerModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::size_t patched_layer() const { return patched_layer_; }
  void set_patched_layer(std::size_t layer);
  bool patched_layer_is_last() const { return patched_layer_ + 1 == config_.n_layers; }

  const PatchSet& patches() const { return patches_; }
  PatchSet& mutable_patches() { return patches_; }
  void add_patches(const PatchSet& extra) { patches_.append(extra); }

  // Full forward. `extra` patches are appended after the stored ones and
  // take part in the patched FFN.
  ForwardOutput forward(Tape& tape, const Batch& batch, const PatchVars* extra = nullptr) const;

  // Runs everything before the patched FFN sublayer and returns the state
  // for the requested rows (row = b*seq_len + t).
  PatchedLayerState capture_state(const Batch& batch, std::span<const std::size_t> rows) const;

  // Patched FFN, final norm and output head applied to cached states. Only
  // valid when the patched layer is the last one, since everything after it
  // is position-wise. For classification the rows must be pooled rows.
  Var logits_from_state(Tape& tape, Var residual, Var query, const PatchVars* extra = nullptr,
                        PatchedFfnOutput* detail = nullptr) const;

  std::vector<Tensor*> parameters(ParamScope scope);
  std::vector<const Tensor*> parameters() const;
  void set_trainable(ParamScope scope);

  // Core parameters plus (2d+1) per patch.
  std::size_t parameter_count() const;
  std::size_t core_parameter_count() const;
  // Hash over every non-patch parameter.
  std::uint64_t core_hash() const;

  const TransformerBlock& block(std::size_t i) const { return blocks_[i]; }
  TransformerBlock& mutable_block(std::size_t i) { return blocks_[i]; }
  const Tensor& token_embedding() const { return token_embedding_; }
  const Tensor& position_embedding() const { return position_embedding_; }
  const LayerNormParams& final_norm() const { return final_norm_; }
  const Tensor& head_weight() const { return head_weight_; }
  const Tensor& head_bias() const { return head_bias_; }

 private:
  struct Trunk {
    Var residual;
    Var query;
  };
  Trunk run_trunk(Tape& tape, const Batch& batch) const;
  Var run_block_attention(Tape& tape, const TransformerBlock& block, Var x,
                          const AttentionLayout& layout) const;
  Var head(Tape& tape, Var hidden) const;
  std::vector<const Tensor*> parameters_in_order() const;

  ModelConfig config_;
  Tensor token_embedding_;
  Tensor position_embedding_;
  std::vector<TransformerBlock> blocks_;
  LayerNormParams final_norm_;
  Tensor head_weight_;  // classification only, [d x n_classes]
  Tensor head_bias_;    // [n_classes] or [vocab]
  std::size_t patched_layer_ = 0;
  PatchSet patches_;
};

// Classification: a label. Generation: the greedily decoded answer without
// the end token.
struct Prediction {
  std::vector<int> tokens;
  bool operator==(const Prediction&) const = default;
};

Prediction predict(const TransformerModel& model, const std::vector<int>& tokens,
                   std::size_t max_new_tokens = 8);
std::vector<Prediction> predict_batch(const TransformerModel& model,
                                      std::span<const std::vector<int>> inputs,
                                      std::size_t max_new_tokens = 8);

// Index of the largest entry, lowest index on ties.
std::size_t argmax(std::span<const double> values);

}  // namespace smelab
