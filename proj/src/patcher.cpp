#include "smelab/patcher.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "smelab/adam.hpp"
#include "smelab/errors.hpp"
#include "smelab/task_io.hpp"

namespace smelab {

std::string to_string(PatchVariant v) {
  switch (v) {
    case PatchVariant::kFull: return "full";
    case PatchVariant::kNoMemory: return "no-lm";
    case PatchVariant::kNoMargin: return "no-lm2";
    case PatchVariant::kKlPatch: return "kl-patch";
  }
  return "full";
}

PatchVariant patch_variant_from_string(const std::string& name) {
  if (name == "full" || name == "none" || name.empty()) return PatchVariant::kFull;
  if (name == "no-lm" || name == "no_lm") return PatchVariant::kNoMemory;
  if (name == "no-lm2" || name == "no_lm2") return PatchVariant::kNoMargin;
  if (name == "kl-patch" || name == "kl_patch") return PatchVariant::kKlPatch;
  throw ParameterError("unknown patch variant '" + name + "'");
}

void PatcherConfig::set_thresholds(Activation act) {
  if (act == Activation::kGeLU) {
    beta = -3.0;
    gamma = 3.0;
  } else {
    beta = 0.0;
    gamma = 0.0;
  }
}

PatcherConfig PatcherConfig::for_activation(Activation act) {
  PatcherConfig c;
  c.set_thresholds(act);
  return c;
}

void PatcherConfig::validate() const {
  if (!(a > 0.0) || !(m > 0.0)) throw ParameterError("loss weights a and m must be positive");
  if (k < 1 || k_a < 1) throw ParameterError("k and k_a must be at least 1");
  if (!(lr > 0.0)) throw ParameterError("learning rate must be positive");
  if (batch_repeat < 1) throw ParameterError("batch_repeat must be at least 1");
  if (max_patches_per_edit < 1) throw ParameterError("max_patches_per_edit must be at least 1");
  if (variant == PatchVariant::kKlPatch && kl_batch < 1) throw ParameterError("kl_batch must be at least 1");
}

namespace {

bool uses_memory(PatchVariant v) { return v == PatchVariant::kFull || v == PatchVariant::kNoMargin; }

Batch single_batch(const TransformerModel& model, const LabeledInput& example) {
  std::vector<std::vector<int>> one{model_input(model.config(), example)};
  return Batch::pack(one, model.config().pad_token);
}

}  // namespace

EditTargets count_mistakes(const TransformerModel& model, const LabeledInput& example,
                           const PatcherConfig& cfg) {
  Judgement j = judge(model, example);
  if (j.correct) throw ContractViolation("count_mistakes: the model already predicts this example");
  Supervision sup = supervision(model.config(), example);
  EditTargets t;
  for (std::size_t i = 0; i < sup.positions.size(); ++i) {
    if (!j.position_correct[i]) {
      t.positions.push_back(sup.positions[i]);
      t.labels.push_back(sup.labels[i]);
    }
  }
  const std::size_t n = model.config().task == TaskKind::kClassification
                            ? 1
                            : std::min(t.positions.size(), cfg.max_patches_per_edit);
  Batch batch = single_batch(model, example);
  std::vector<std::size_t> rows(t.positions.begin(), t.positions.begin() + static_cast<long>(n));
  t.queries = model.capture_state(batch, rows).query;
  return t;
}

PatchSet init_patches(const EditTargets& targets, const PatcherConfig& cfg, Rng& rng) {
  const std::size_t n = targets.queries.rows(), d = targets.queries.cols();
  if (n == 0) throw ParameterError("init_patches: no targets");
  PatchSet p;
  p.keys = Tensor({d, n});
  p.bias = Tensor(Shape{n});
  p.raw_values = Tensor({n, d});
  p.value_scale = Tensor({n, d}, cfg.value_scale_init);
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (double v : targets.queries.row(i)) sq += v * v;
    if (!(sq > 0.0)) throw DegenerateInputError("init_patches: zero query vector");
    for (std::size_t j = 0; j < d; ++j) p.keys[j * n + i] = targets.queries.at(i, j) / sq;
  }
  for (auto& v : p.raw_values.values()) v = uniform01(rng);
  return p;
}

Var edit_preactivations(Var queries, const PatchVars& patches) {
  if (queries.value().rows() != patches.keys.value().cols()) {
    throw ShapeError("edit_preactivations: one query per patch required");
  }
  return add(row_sum(mul(queries, transpose(patches.keys))), patches.bias);
}

Var activation_loss(Var preactivations, const PatcherConfig& cfg) {
  const std::size_t n = preactivations.numel();
  return topk_mean_exp(neg(preactivations), std::min(cfg.k_a, n));
}

MemoryLoss memory_loss(Var memory, const PatchVars& patches, Var preactivations,
                       const PatcherConfig& cfg) {
  const Tensor& mv = memory.value();
  if (mv.rank() != 2 || mv.rows() == 0) throw ParameterError("memory_loss: empty memory");
  const std::size_t n = patches.keys.value().cols();
  Var p = add_row_vector(matmul(memory, patches.keys), patches.bias);
  Tape& tape = memory.tape();
  Var ones = tape.constant(Tensor({mv.rows(), 1}, 1.0));
  Var a_rows = matmul(ones, reshape(preactivations, Shape{1, n}));
  Var l1 = topk_mean_exp(add_scalar(p, -cfg.beta), cfg.k);
  Var l2 = topk_mean_exp(add_scalar(sub(p, a_rows), -cfg.gamma), cfg.k);
  return {l1, l2, p};
}

SinglePatchLoss single_patch_losses(Var query, Var memory, Var key, Var bias, const PatcherConfig& cfg) {
  // query [1 x d], memory [d_m x d], key [d x 1], bias [1]
  Tape& tape = query.tape();
  const std::size_t dm = memory.value().rows();
  Var qk = reshape(matmul(query, key), Shape{1});
  Var l_a = exp(neg(add(qk, bias)));
  Var ones = tape.constant(Tensor({dm, 1}, 1.0));
  Var b_col = matmul(ones, reshape(bias, Shape{1, 1}));
  Var l_m1 = topk_mean_exp(add_scalar(add(matmul(memory, key), b_col), -cfg.beta), cfg.k);
  Var diff = sub(memory, matmul(ones, query));
  Var l_m2 = topk_mean_exp(add_scalar(matmul(diff, key), -cfg.gamma), cfg.k);
  return {l_a, l_m1, l_m2};
}

double total_loss(const LossTerms& t, const PatcherConfig& cfg) {
  switch (cfg.variant) {
    case PatchVariant::kFull: return t.l_e + cfg.a * t.l_a + cfg.m * (t.l_m1 + t.l_m2);
    case PatchVariant::kNoMemory: return t.l_e + cfg.a * t.l_a;
    case PatchVariant::kNoMargin: return t.l_e + cfg.a * t.l_a + cfg.m * t.l_m1;
    case PatchVariant::kKlPatch: return t.l_e + cfg.a * t.l_a + cfg.kl_weight * t.l_kl;
  }
  return 0.0;
}

Var total_loss(Var l_e, Var l_a, Var l_m1, Var l_m2, Var l_kl, const PatcherConfig& cfg) {
  Var out = add(l_e, scale(l_a, cfg.a));
  switch (cfg.variant) {
    case PatchVariant::kFull: return add(out, scale(add(l_m1, l_m2), cfg.m));
    case PatchVariant::kNoMemory: return out;
    case PatchVariant::kNoMargin: return add(out, scale(l_m1, cfg.m));
    case PatchVariant::kKlPatch: return add(out, scale(l_kl, cfg.kl_weight));
  }
  return out;
}

Var edit_loss(Var logits, std::span<const int> labels, TaskKind task, std::size_t repeats) {
  if (task == TaskKind::kClassification) return softmax_cross_entropy(logits, labels, Reduction::kMean);
  Var s = softmax_cross_entropy(logits, labels, Reduction::kSum);
  return repeats > 1 ? scale(s, 1.0 / static_cast<double>(repeats)) : s;
}

PatchEditResult apply_edit(TransformerModel& model, const LabeledInput& example,
                           const EditResources& resources, const PatcherConfig& cfg) {
  cfg.validate();
  const ModelConfig& mc = model.config();
  const bool need_memory = uses_memory(cfg.variant);
  if (need_memory && (resources.memory == nullptr || resources.memory->rows() == 0)) {
    throw ParameterError("apply_edit: this variant needs a non-empty memory");
  }
  if (cfg.variant == PatchVariant::kKlPatch && resources.kl_pool.empty()) {
    throw ParameterError("apply_edit: the KL variant needs a memory pool");
  }
  const std::uint64_t hash_before = model.core_hash();
  const std::size_t params_before = model.parameter_count();

  EditTargets targets = count_mistakes(model, example, cfg);
  PatchEditResult result;
  // No budget: nothing is trained, so nothing is added.
  if (cfg.max_steps == 0) {
    result.core_hash = hash_before;
    return result;
  }
  Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(resources.edit_id)));
  PatchSet fresh = init_patches(targets, cfg, rng);
  std::vector<Tensor*> trainable = fresh.trainable();
  for (Tensor* t : trainable) t->set_requires_grad(true);

  const Supervision sup = supervision(mc, example);
  const bool generation = mc.task == TaskKind::kGeneration;
  // Indices into sup.positions used by the edit loss.
  std::vector<std::size_t> le_index;
  for (std::size_t i = 0; i < sup.positions.size(); ++i) {
    const bool mistaken =
        std::find(targets.positions.begin(), targets.positions.end(), sup.positions[i]) != targets.positions.end();
    if (mistaken || (generation && cfg.edit_loss_all_positions)) le_index.push_back(i);
  }
  const std::size_t R = cfg.batch_repeat;
  std::vector<int> le_labels;
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t i : le_index) le_labels.push_back(sup.labels[i]);

  const bool fast = model.patched_layer_is_last();
  Batch edit_batch = single_batch(model, example);
  // Fast path: states of the supervised rows followed by R copies of the
  // edit-loss rows.
  Tensor res_rows, query_rows;
  std::vector<std::size_t> logit_rows_all;  // generic path: rows in the replicated batch
  if (fast) {
    std::vector<std::size_t> rows(sup.positions.begin(), sup.positions.end());
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t i : le_index) rows.push_back(sup.positions[i]);
    PatchedLayerState st = model.capture_state(edit_batch, rows);
    res_rows = std::move(st.residual);
    query_rows = std::move(st.query);
  } else {
    std::vector<std::vector<int>> copies(R, model_input(mc, example));
    edit_batch = Batch::pack(copies, mc.pad_token);
    for (std::size_t p : sup.positions) logit_rows_all.push_back(generation ? edit_batch.row(0, p) : 0);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t i : le_index)
        logit_rows_all.push_back(generation ? edit_batch.row(r, sup.positions[i]) : r);
  }

  // KL batch, sampled once per edit, with reference distributions from the
  // pre-edit model.
  Tensor kl_ref, kl_res, kl_query;
  PackedItems kl_packed;
  std::vector<std::size_t> kl_logit_rows;
  if (cfg.variant == PatchVariant::kKlPatch) {
    std::vector<std::size_t> idx(resources.kl_pool.size());
    std::iota(idx.begin(), idx.end(), 0);
    shuffle(std::span<std::size_t>(idx), rng);
    idx.resize(std::min(idx.size(), cfg.kl_batch));
    std::vector<LabeledInput> items;
    for (std::size_t i : idx) items.push_back(resources.kl_pool[i]);
    kl_packed = pack_items(mc, items);
    std::vector<std::size_t> state_rows;
    for (std::size_t b = 0; b < items.size(); ++b) {
      state_rows.insert(state_rows.end(), kl_packed.state_rows[b].begin(), kl_packed.state_rows[b].end());
      kl_logit_rows.insert(kl_logit_rows.end(), kl_packed.logit_rows[b].begin(), kl_packed.logit_rows[b].end());
    }
    Tape tape(GradMode::kDisabled);
    if (fast) {
      PatchedLayerState st = model.capture_state(kl_packed.batch, state_rows);
      kl_res = std::move(st.residual);
      kl_query = std::move(st.query);
      kl_ref = softmax_rows(model.logits_from_state(tape, tape.constant_ref(kl_res), tape.constant_ref(kl_query)).value());
    } else {
      kl_ref = softmax_rows(select_rows(model.forward(tape, kl_packed.batch).logits, kl_logit_rows).value());
    }
  }

  Adam adam(trainable, {.lr = cfg.lr});
  const std::size_t n_sup = sup.positions.size();
  std::vector<std::size_t> head_rows(n_sup), le_rows(le_labels.size());
  std::iota(head_rows.begin(), head_rows.end(), 0);
  std::iota(le_rows.begin(), le_rows.end(), n_sup);

  for (std::size_t step = 0;; ++step) {
    Tape tape;
    PatchVars pv = bind_patches(tape, fresh);
    Var A = edit_preactivations(tape.constant_ref(targets.queries), pv);
    Var l_a = activation_loss(A, cfg);
    Var l_m1, l_m2;
    if (resources.memory != nullptr && resources.memory->rows() > 0) {
      MemoryLoss ml = memory_loss(tape.constant_ref(*resources.memory), pv, A, cfg);
      l_m1 = ml.l_m1;
      l_m2 = ml.l_m2;
    }
    Var logits;
    if (fast) {
      logits = model.logits_from_state(tape, tape.constant_ref(res_rows), tape.constant_ref(query_rows), &pv);
    } else {
      logits = select_rows(model.forward(tape, edit_batch, &pv).logits, logit_rows_all);
    }
    Var l_e = edit_loss(select_rows(logits, le_rows), le_labels, mc.task, R);
    Var l_kl;
    if (cfg.variant == PatchVariant::kKlPatch) {
      Var cur = fast ? model.logits_from_state(tape, tape.constant_ref(kl_res), tape.constant_ref(kl_query), &pv)
                     : select_rows(model.forward(tape, kl_packed.batch, &pv).logits, kl_logit_rows);
      l_kl = kl_divergence(kl_ref, cur);
    }
    Var total = total_loss(l_e, l_a, l_m1, l_m2, l_kl, cfg);

    const Tensor& lv = logits.value();
    bool correct = true;
    for (std::size_t i = 0; i < n_sup; ++i)
      correct = correct && static_cast<int>(argmax(lv.row(head_rows[i]))) == sup.labels[i];
    LossTerms terms;
    terms.l_e = l_e.item();
    terms.l_a = l_a.item();
    terms.l_m1 = l_m1.valid() ? l_m1.item() : 0.0;
    terms.l_m2 = l_m2.valid() ? l_m2.item() : 0.0;
    terms.l_kl = l_kl.valid() ? l_kl.item() : 0.0;
    terms.total = total.item();
    result.losses = terms;

    const bool memory_ok = !need_memory || terms.l_m1 < cfg.stop_memory_loss;
    if (correct && terms.l_a < cfg.stop_activation_loss && memory_ok) {
      result.success = true;
      result.steps = step;
      break;
    }
    if (step >= cfg.max_steps) {
      result.steps = step;
      break;
    }
    tape.backward(total);
    adam.step();
  }

  for (Tensor* t : trainable) {
    t->set_requires_grad(false);
    t->clear_grad();
  }
  if (resources.memory != nullptr && resources.memory->rows() > 0) {
    Tape tape(GradMode::kDisabled);
    Var p = add_row_vector(matmul(tape.constant_ref(*resources.memory), tape.constant_ref(fresh.keys)),
                           tape.constant_ref(fresh.bias));
    const auto& vals = p.value().values();
    result.memory_preactivation_max = *std::max_element(vals.begin(), vals.end());
    const double k_eff = static_cast<double>(std::min(cfg.k, p.numel()));
    result.locality_bound = cfg.beta + std::log(cfg.stop_memory_loss * k_eff);
  }
  result.patches_added = fresh.size();
  fresh.owner_edit_ids.assign(fresh.size(), resources.edit_id);
  model.add_patches(fresh);

  result.core_hash = model.core_hash();
  if (result.core_hash != hash_before) throw ContractViolation("apply_edit modified frozen parameters");
  if (model.parameter_count() != params_before + result.patches_added * (2 * mc.d_model + 1)) {
    throw ContractViolation("apply_edit: unexpected parameter growth");
  }
  return result;
}

}  // namespace smelab
