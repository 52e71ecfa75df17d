#include "smelab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "smelab/errors.hpp"

namespace smelab {

std::string to_string(TaskKind kind) {
  return kind == TaskKind::kClassification ? "classification" : "generation";
}

TaskKind task_kind_from_string(const std::string& name) {
  if (name == "classification" || name == "fact_check" || name == "fc") return TaskKind::kClassification;
  if (name == "generation" || name == "kv_qa" || name == "qa") return TaskKind::kGeneration;
  throw ParameterError("unknown task kind '" + name + "'");
}

std::string to_string(Activation kind) { return kind == Activation::kReLU ? "relu" : "gelu"; }

Activation activation_from_string(const std::string& name) {
  if (name == "relu") return Activation::kReLU;
  if (name == "gelu") return Activation::kGeLU;
  throw ParameterError("unknown activation '" + name + "'");
}

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw ParameterError("d_model must be a positive multiple of n_heads");
  }
  if (d_ffn < 1) throw ParameterError("d_ffn must be at least 1");
  if (n_layers < 1) throw ParameterError("n_layers must be at least 1");
  if (vocab_size < 2) throw ParameterError("vocab_size must be at least 2");
  if (max_seq_len < 1) throw ParameterError("max_seq_len must be at least 1");
  if (task == TaskKind::kClassification && n_classes < 2) {
    throw ParameterError("classification needs at least two classes");
  }
  auto in_vocab = [&](int t) { return t >= 0 && static_cast<std::size_t>(t) < vocab_size; };
  if (!in_vocab(pad_token) || !in_vocab(eos_token)) throw ParameterError("special tokens outside vocabulary");
}

Batch Batch::pack(std::span<const std::vector<int>> sequences, int pad_token) {
  Batch b;
  b.batch = sequences.size();
  for (const auto& s : sequences) {
    if (s.empty()) throw ShapeError("empty token sequence");
    b.seq_len = std::max(b.seq_len, s.size());
  }
  b.ids.assign(b.batch * b.seq_len, pad_token);
  for (std::size_t i = 0; i < b.batch; ++i) {
    std::copy(sequences[i].begin(), sequences[i].end(), b.ids.begin() + static_cast<long>(i * b.seq_len));
    b.lengths.push_back(sequences[i].size());
  }
  return b;
}

namespace {

Tensor gaussian(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = normal(rng, 0.0, stddev);
  return t;
}

LayerNormParams unit_norm(std::size_t d) { return {Tensor(Shape{d}, 1.0), Tensor(Shape{d}, 0.0)}; }

void hash_bytes(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
}

}  // namespace

TransformerModel::TransformerModel(ModelConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const std::size_t d = config_.d_model;
  const double proj = 1.0 / std::sqrt(static_cast<double>(d));
  token_embedding_ = gaussian({config_.vocab_size, d}, rng, 0.1);
  position_embedding_ = gaussian({config_.max_seq_len, d}, rng, 0.1);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    TransformerBlock b;
    b.ln_attn = unit_norm(d);
    b.attn.wq = gaussian({d, d}, rng, proj);
    b.attn.bq = Tensor(Shape{d});
    b.attn.wk = gaussian({d, d}, rng, proj);
    b.attn.bk = Tensor(Shape{d});
    b.attn.wv = gaussian({d, d}, rng, proj);
    b.attn.bv = Tensor(Shape{d});
    b.attn.wo = gaussian({d, d}, rng, proj);
    b.attn.bo = Tensor(Shape{d});
    b.ln_ffn = unit_norm(d);
    b.ffn.keys = gaussian({d, config_.d_ffn}, rng, proj);
    b.ffn.key_bias = Tensor(Shape{config_.d_ffn});
    b.ffn.values = gaussian({config_.d_ffn, d}, rng, 1.0 / std::sqrt(static_cast<double>(config_.d_ffn)));
    b.ffn.value_bias = Tensor(Shape{d});
    blocks_.push_back(std::move(b));
  }
  final_norm_ = unit_norm(d);
  if (config_.task == TaskKind::kClassification) {
    head_weight_ = gaussian({d, config_.n_classes}, rng, proj);
    head_bias_ = Tensor(Shape{config_.n_classes});
  } else {
    head_bias_ = Tensor(Shape{config_.vocab_size});
  }
  patched_layer_ = config_.n_layers - 1;
  patches_ = PatchSet::empty(d);
}

void TransformerModel::set_patched_layer(std::size_t layer) {
  if (layer >= config_.n_layers) throw ParameterError("patched layer out of range");
  if (!patches_.empty() && layer != patched_layer_) {
    throw ContractViolation("cannot move the patched layer once patches exist");
  }
  patched_layer_ = layer;
}

Var TransformerModel::run_block_attention(Tape& tape, const TransformerBlock& block, Var x,
                                          const AttentionLayout& layout) const {
  Var h = layer_norm(x, bind(tape, block.ln_attn.gain), bind(tape, block.ln_attn.bias));
  const auto& a = block.attn;
  Var q = add_row_vector(matmul(h, bind(tape, a.wq)), bind(tape, a.bq));
  Var k = add_row_vector(matmul(h, bind(tape, a.wk)), bind(tape, a.bk));
  Var v = add_row_vector(matmul(h, bind(tape, a.wv)), bind(tape, a.bv));
  Var ctx = attention(q, k, v, layout);
  return add(x, add_row_vector(matmul(ctx, bind(tape, a.wo)), bind(tape, a.bo)));
}

TransformerModel::Trunk TransformerModel::run_trunk(Tape& tape, const Batch& batch) const {
  if (batch.batch == 0) throw ShapeError("empty batch");
  if (batch.seq_len > config_.max_seq_len) {
    throw ShapeError("sequence length " + std::to_string(batch.seq_len) + " exceeds max_seq_len " +
                     std::to_string(config_.max_seq_len));
  }
  std::vector<int> positions(batch.ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % batch.seq_len);
  Var x = add(embedding(bind(tape, token_embedding_), batch.ids),
              embedding(bind(tape, position_embedding_), positions));
  AttentionLayout layout{batch.batch, batch.seq_len, config_.n_heads, batch.lengths,
                         config_.task == TaskKind::kGeneration};
  for (std::size_t l = 0; l < patched_layer_; ++l) {
    const auto& b = blocks_[l];
    x = run_block_attention(tape, b, x, layout);
    Var q = layer_norm(x, bind(tape, b.ln_ffn.gain), bind(tape, b.ln_ffn.bias));
    x = add(x, ffn_forward(tape, b.ffn, q, config_.activation).out);
  }
  const auto& b = blocks_[patched_layer_];
  x = run_block_attention(tape, b, x, layout);
  Var q = layer_norm(x, bind(tape, b.ln_ffn.gain), bind(tape, b.ln_ffn.bias));
  return {x, q};
}

Var TransformerModel::head(Tape& tape, Var hidden) const {
  if (config_.task == TaskKind::kClassification) {
    return add_row_vector(matmul(hidden, bind(tape, head_weight_)), bind(tape, head_bias_));
  }
  return add_row_vector(matmul_nt(hidden, bind(tape, token_embedding_)), bind(tape, head_bias_));
}

ForwardOutput TransformerModel::forward(Tape& tape, const Batch& batch, const PatchVars* extra) const {
  Trunk trunk = run_trunk(tape, batch);
  ForwardOutput result;
  result.ffn_queries = trunk.query;

  std::optional<PatchVars> patch_vars;
  if (!patches_.empty()) patch_vars = bind_patches(tape, patches_);
  if (extra) patch_vars = patch_vars ? concat_patches(*patch_vars, *extra) : *extra;

  const auto& pb = blocks_[patched_layer_];
  Var x = trunk.residual;
  if (patch_vars) {
    auto out = patched_ffn_forward(tape, pb.ffn, trunk.query, config_.activation, *patch_vars);
    x = add(x, out.out);
    result.patch_activations = out.patch_activations;
  } else {
    x = add(x, ffn_forward(tape, pb.ffn, trunk.query, config_.activation).out);
  }

  AttentionLayout layout{batch.batch, batch.seq_len, config_.n_heads, batch.lengths,
                         config_.task == TaskKind::kGeneration};
  for (std::size_t l = patched_layer_ + 1; l < config_.n_layers; ++l) {
    const auto& b = blocks_[l];
    x = run_block_attention(tape, b, x, layout);
    Var q = layer_norm(x, bind(tape, b.ln_ffn.gain), bind(tape, b.ln_ffn.bias));
    x = add(x, ffn_forward(tape, b.ffn, q, config_.activation).out);
  }
  Var hidden = layer_norm(x, bind(tape, final_norm_.gain), bind(tape, final_norm_.bias));
  if (config_.task == TaskKind::kClassification) {
    std::vector<std::size_t> pooled(batch.batch);
    for (std::size_t i = 0; i < batch.batch; ++i) pooled[i] = batch.row(i, 0);
    hidden = select_rows(hidden, pooled);
  }
  result.logits = head(tape, hidden);
  return result;
}

PatchedLayerState TransformerModel::capture_state(const Batch& batch,
                                                  std::span<const std::size_t> rows) const {
  Tape tape(GradMode::kDisabled);
  Trunk trunk = run_trunk(tape, batch);
  return {select_rows(trunk.residual, rows).value(), select_rows(trunk.query, rows).value()};
}

Var TransformerModel::logits_from_state(Tape& tape, Var residual, Var query, const PatchVars* extra,
                                        PatchedFfnOutput* detail) const {
  if (!patched_layer_is_last()) {
    throw ContractViolation("cached-state evaluation needs the patched layer to be the last layer");
  }
  std::optional<PatchVars> patch_vars;
  if (!patches_.empty()) patch_vars = bind_patches(tape, patches_);
  if (extra) patch_vars = patch_vars ? concat_patches(*patch_vars, *extra) : *extra;
  const auto& pb = blocks_[patched_layer_];
  Var x = residual;
  if (patch_vars) {
    auto out = patched_ffn_forward(tape, pb.ffn, query, config_.activation, *patch_vars);
    x = add(x, out.out);
    if (detail) *detail = out;
  } else {
    auto out = ffn_forward(tape, pb.ffn, query, config_.activation);
    x = add(x, out.out);
    if (detail) *detail = PatchedFfnOutput{out.out, out.activations, {}, {}};
  }
  Var hidden = layer_norm(x, bind(tape, final_norm_.gain), bind(tape, final_norm_.bias));
  return head(tape, hidden);
}

std::vector<const Tensor*> TransformerModel::parameters_in_order() const {
  std::vector<const Tensor*> out{&token_embedding_, &position_embedding_};
  for (const auto& b : blocks_) {
    for (const Tensor* t : {&b.ln_attn.gain, &b.ln_attn.bias, &b.attn.wq, &b.attn.bq, &b.attn.wk,
                            &b.attn.bk, &b.attn.wv, &b.attn.bv, &b.attn.wo, &b.attn.bo,
                            &b.ln_ffn.gain, &b.ln_ffn.bias, &b.ffn.keys, &b.ffn.key_bias,
                            &b.ffn.values, &b.ffn.value_bias})
      out.push_back(t);
  }
  out.push_back(&final_norm_.gain);
  out.push_back(&final_norm_.bias);
  if (config_.task == TaskKind::kClassification) out.push_back(&head_weight_);
  out.push_back(&head_bias_);
  return out;
}

std::vector<const Tensor*> TransformerModel::parameters() const { return parameters_in_order(); }

std::vector<Tensor*> TransformerModel::parameters(ParamScope scope) {
  std::vector<Tensor*> out;
  if (scope == ParamScope::kNone) return out;
  if (scope == ParamScope::kAll) {
    for (const Tensor* t : parameters_in_order()) out.push_back(const_cast<Tensor*>(t));
    return out;
  }
  auto& b = blocks_.back();
  return {&b.ln_attn.gain, &b.ln_attn.bias, &b.attn.wq, &b.attn.bq, &b.attn.wk, &b.attn.bk,
          &b.attn.wv, &b.attn.bv, &b.attn.wo, &b.attn.bo, &b.ln_ffn.gain, &b.ln_ffn.bias,
          &b.ffn.keys, &b.ffn.key_bias, &b.ffn.values, &b.ffn.value_bias};
}

void TransformerModel::set_trainable(ParamScope scope) {
  for (Tensor* t : parameters(ParamScope::kAll)) {
    t->set_requires_grad(false);
    t->clear_grad();
  }
  for (Tensor* t : parameters(scope)) t->set_requires_grad(true);
}

std::size_t TransformerModel::core_parameter_count() const {
  std::size_t n = 0;
  for (const Tensor* t : parameters_in_order()) n += t->numel();
  return n;
}

std::size_t TransformerModel::parameter_count() const {
  return core_parameter_count() + patches_.size() * (2 * config_.d_model + 1);
}

std::uint64_t TransformerModel::core_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Tensor* t : parameters_in_order()) {
    for (std::size_t d : t->shape()) hash_bytes(h, &d, sizeof d);
    hash_bytes(h, t->data(), t->numel() * sizeof(double));
  }
  return h;
}

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

std::vector<Prediction> predict_batch(const TransformerModel& model,
                                      std::span<const std::vector<int>> inputs,
                                      std::size_t max_new_tokens) {
  const auto& cfg = model.config();
  std::vector<Prediction> out;
  if (inputs.empty()) return out;
  if (cfg.task == TaskKind::kClassification) {
    Tape tape(GradMode::kDisabled);
    Batch batch = Batch::pack(inputs, cfg.pad_token);
    Var logits = model.forward(tape, batch).logits;
    for (std::size_t i = 0; i < batch.batch; ++i) {
      out.push_back({{static_cast<int>(argmax(logits.value().row(i)))}});
    }
    return out;
  }
  for (const auto& prompt : inputs) {
    std::vector<int> seq = prompt;
    Prediction p;
    for (std::size_t step = 0; step < max_new_tokens && seq.size() < cfg.max_seq_len; ++step) {
      Tape tape(GradMode::kDisabled);
      std::vector<std::vector<int>> one{seq};
      Batch batch = Batch::pack(one, cfg.pad_token);
      Var logits = model.forward(tape, batch).logits;
      const int next = static_cast<int>(argmax(logits.value().row(seq.size() - 1)));
      if (next == cfg.eos_token) break;
      p.tokens.push_back(next);
      seq.push_back(next);
    }
    out.push_back(std::move(p));
  }
  return out;
}

Prediction predict(const TransformerModel& model, const std::vector<int>& tokens,
                   std::size_t max_new_tokens) {
  std::vector<std::vector<int>> one{tokens};
  return predict_batch(model, one, max_new_tokens).front();
}

}  // namespace smelab
