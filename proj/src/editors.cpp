#include "smelab/editors.hpp"

#include <algorithm>
#include <numeric>

#include "smelab/adam.hpp"
#include "smelab/errors.hpp"
#include "smelab/task_io.hpp"

namespace smelab {

void FineTuneConfig::validate() const {
  if (scope == ParamScope::kNone) throw ParameterError("fine-tuning needs a parameter scope");
  if (!(lr > 0.0)) throw ParameterError("learning rate must be positive");
  if (kl && (kl_batch < 1 || !(kl_weight >= 0.0))) throw ParameterError("bad KL batch or weight");
}

std::string EditorConfig::name() const {
  if (kind == EditorKind::kTPatcher) {
    return patcher.variant == PatchVariant::kFull ? "t-patcher" : "t-patcher/" + to_string(patcher.variant);
  }
  std::string n = ft.scope == ParamScope::kAll ? "ft-all" : "ft-last";
  return ft.kl ? n + "-kl" : n;
}

bool EditorConfig::uses_memory() const {
  return kind == EditorKind::kTPatcher &&
         (patcher.variant == PatchVariant::kFull || patcher.variant == PatchVariant::kNoMargin);
}

bool EditorConfig::uses_kl_pool() const {
  return kind == EditorKind::kTPatcher ? patcher.variant == PatchVariant::kKlPatch : ft.kl;
}

EditorConfig editor_config(const std::string& editor, const std::string& ablation) {
  EditorConfig c;
  if (editor == "t-patcher" || editor == "tpatcher" || editor == "patcher") {
    c.kind = EditorKind::kTPatcher;
    c.patcher.variant = patch_variant_from_string(ablation);
    return c;
  }
  if (!(ablation.empty() || ablation == "none")) {
    throw ParameterError("ablations apply to the t-patcher editor only");
  }
  c.kind = EditorKind::kFineTune;
  if (editor == "ft-last" || editor == "ft-last-kl") {
    c.ft.scope = ParamScope::kLastLayer;
  } else if (editor == "ft-all" || editor == "ft-all-kl") {
    c.ft.scope = ParamScope::kAll;
  } else {
    throw ParameterError("unknown editor '" + editor + "'");
  }
  c.ft.kl = editor.ends_with("-kl");
  return c;
}

namespace {

struct Rows {
  std::vector<std::size_t> rows;
  std::vector<int> labels;
};

Rows flatten_rows(const PackedItems& p) {
  Rows r;
  for (std::size_t b = 0; b < p.logit_rows.size(); ++b) {
    r.rows.insert(r.rows.end(), p.logit_rows[b].begin(), p.logit_rows[b].end());
    r.labels.insert(r.labels.end(), p.labels[b].begin(), p.labels[b].end());
  }
  return r;
}

class PatchEditor : public Editor {
 public:
  using Editor::Editor;
  EditOutcome edit(TransformerModel& model, const LabeledInput& example, const EditContext& ctx) const override {
    PatchEditResult r = apply_edit(model, example, {ctx.memory, ctx.kl_pool, ctx.edit_id}, config_.patcher);
    return {r.success, r.steps, r.patches_added, r.losses};
  }
};

class FineTuneEditor : public Editor {
 public:
  using Editor::Editor;
  EditOutcome edit(TransformerModel& model, const LabeledInput& example, const EditContext& ctx) const override {
    return ft_edit(model, example, config_.ft, ctx.kl_pool, ctx.edit_id);
  }
};

}  // namespace

std::unique_ptr<Editor> make_editor(const EditorConfig& config) {
  if (config.kind == EditorKind::kTPatcher) {
    config.patcher.validate();
    return std::make_unique<PatchEditor>(config);
  }
  config.ft.validate();
  return std::make_unique<FineTuneEditor>(config);
}

Var kl_regularizer(Tape& tape, const TransformerModel& reference, const TransformerModel& model,
                   std::span<const LabeledInput> batch) {
  if (batch.empty()) throw ParameterError("kl_regularizer: empty batch");
  PackedItems p = pack_items(model.config(), batch);
  Rows r = flatten_rows(p);
  Tensor ref_probs;
  {
    Tape ref_tape(GradMode::kDisabled);
    ref_probs = softmax_rows(select_rows(reference.forward(ref_tape, p.batch).logits, r.rows).value());
  }
  return kl_divergence(ref_probs, select_rows(model.forward(tape, p.batch).logits, r.rows));
}

EditOutcome ft_edit(TransformerModel& model, const LabeledInput& example, const FineTuneConfig& cfg,
                    std::span<const LabeledInput> kl_pool, std::int64_t edit_id) {
  cfg.validate();
  if (cfg.kl && kl_pool.empty()) throw ParameterError("ft_edit: KL regularisation needs a pool");
  if (judge(model, example).correct) throw ContractViolation("ft_edit: the model already predicts this example");
  const ModelConfig& mc = model.config();
  const LabeledInput one[] = {example};
  PackedItems packed = pack_items(mc, one);
  Rows target = flatten_rows(packed);

  std::optional<TransformerModel> reference;
  if (cfg.kl) reference.emplace(model);
  Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(edit_id)));
  std::vector<std::size_t> order(kl_pool.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t kl_n = std::min(cfg.kl_batch, kl_pool.size());

  model.set_trainable(cfg.scope);
  Adam adam(model.parameters(cfg.scope), {.lr = cfg.lr});
  EditOutcome out;
  for (std::size_t step = 0;; ++step) {
    Tape tape;
    Var logits = select_rows(model.forward(tape, packed.batch).logits, target.rows);
    bool correct = true;
    for (std::size_t i = 0; i < target.rows.size(); ++i)
      correct = correct && static_cast<int>(argmax(logits.value().row(i))) == target.labels[i];
    Var l_e = softmax_cross_entropy(logits, target.labels);
    out.losses.l_e = l_e.item();
    out.losses.total = out.losses.l_e;
    out.steps = step;
    if (correct) {
      out.success = true;
      break;
    }
    if (step >= cfg.max_steps) break;
    Var total = l_e;
    if (cfg.kl) {
      // Partial shuffle: a fresh batch without replacement each step.
      std::vector<LabeledInput> batch;
      for (std::size_t i = 0; i < kl_n; ++i) {
        std::swap(order[i], order[i + uniform_index(rng, order.size() - i)]);
        batch.push_back(kl_pool[order[i]]);
      }
      Var kl = kl_regularizer(tape, *reference, model, batch);
      out.losses.l_kl = kl.item();
      total = add(total, scale(kl, cfg.kl_weight));
    }
    out.losses.total = total.item();
    tape.backward(total);
    adam.step();
  }
  model.set_trainable(ParamScope::kNone);
  for (Tensor* t : model.parameters(ParamScope::kAll)) t->clear_grad();
  return out;
}

}  // namespace smelab
