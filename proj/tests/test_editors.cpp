#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "fixtures.hpp"
#include "smelab/editors.hpp"
#include "smelab/errors.hpp"
#include "smelab/memory_bank.hpp"
#include "smelab/task_io.hpp"

using namespace smelab;

namespace {

std::vector<LabeledInput> items_of(const Dataset& d) {
  std::vector<LabeledInput> out;
  for (const auto& e : d) out.push_back(labeled(e));
  return out;
}

LabeledInput flipped(const EditExample& e) { return {e.tokens, {1 - e.target[0]}}; }

// Straight softmax / KL over plain doubles, row by row.
double kl_oracle(const Tensor& ref_logits, const Tensor& cur_logits) {
  double total = 0.0;
  const std::size_t n = ref_logits.rows(), c = ref_logits.cols();
  auto probs = [c](std::span<const double> row) {
    std::vector<double> p(c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j]);
    for (std::size_t j = 0; j < c; ++j) p[j] = std::exp(row[j]) / z;
    return p;
  };
  for (std::size_t i = 0; i < n; ++i) {
    auto p = probs(ref_logits.row(i)), q = probs(cur_logits.row(i));
    for (std::size_t j = 0; j < c; ++j) total += p[j] * std::log(p[j] / q[j]);
  }
  return total / static_cast<double>(n);
}

Tensor supervised_logits(const TransformerModel& m, std::span<const LabeledInput> items) {
  PackedItems p = pack_items(m.config(), items);
  std::vector<std::size_t> rows;
  for (const auto& r : p.logit_rows) rows.insert(rows.end(), r.begin(), r.end());
  Tape tape(GradMode::kDisabled);
  return select_rows(m.forward(tape, p.batch).logits, rows).value();
}

void perturb(TransformerModel& m, std::uint64_t seed) {
  Rng rng(seed);
  for (Tensor* t : m.parameters(ParamScope::kLastLayer))
    for (auto& v : t->values()) v += normal(rng, 0.0, 0.3);
}

std::vector<std::vector<double>> snapshot(const TransformerModel& m) {
  std::vector<std::vector<double>> out;
  for (const Tensor* t : m.parameters()) out.emplace_back(t->values().begin(), t->values().end());
  return out;
}

}  // namespace

TEST_CASE("editor names") {
  CHECK(editor_config("t-patcher").name() == "t-patcher");
  CHECK(editor_config("t-patcher", "no-lm").name() == "t-patcher/no-lm");
  CHECK(editor_config("t-patcher", "kl-patch").uses_kl_pool());
  CHECK_FALSE(editor_config("t-patcher", "no-lm").uses_memory());
  CHECK(editor_config("t-patcher", "no-lm2").uses_memory());
  EditorConfig ft = editor_config("ft-all-kl");
  CHECK(ft.kind == EditorKind::kFineTune);
  CHECK(ft.ft.scope == ParamScope::kAll);
  CHECK(ft.ft.kl);
  CHECK(ft.ft.lr == 1e-5);
  CHECK(ft.ft.kl_weight == 1.0);
  CHECK(ft.ft.kl_batch == 64);
  CHECK(ft.name() == "ft-all-kl");
  CHECK(editor_config("ft-last").name() == "ft-last");
  CHECK_FALSE(editor_config("ft-last").uses_patches());
  CHECK_THROWS_AS(editor_config("rome"), ParameterError);
  CHECK_THROWS_AS(editor_config("ft-last", "no-lm"), ParameterError);
}

TEST_CASE("KL regulariser matches a direct computation") {
  for (TransformerModel base : {testing::trained_classifier(), testing::trained_copier()}) {
    TransformerModel moved = base;
    perturb(moved, 17);
    std::vector<LabeledInput> batch =
        base.config().task == TaskKind::kClassification ? items_of(testing::separable_task(12, 3))
                                                        : items_of(testing::copy_task(12, 3));
    Tape tape;
    Var kl = kl_regularizer(tape, base, moved, batch);
    const double want = kl_oracle(supervised_logits(base, batch), supervised_logits(moved, batch));
    CHECK(want > 1e-4);
    CHECK(std::abs(kl.item() - want) < 1e-10);
    Tape t2;
    CHECK(std::abs(kl_regularizer(t2, base, base, batch).item()) < 1e-12);
  }
}

TEST_CASE("fine-tuning the last layer fixes a mistake and touches only that layer") {
  TransformerModel m = testing::trained_classifier();
  LabeledInput item = flipped(testing::separable_task(30, 22)[0]);
  const auto before = snapshot(m);
  const std::size_t n_all = m.parameters().size();
  const std::size_t n_last = m.parameters(ParamScope::kLastLayer).size();
  FineTuneConfig cfg;
  cfg.lr = 1e-3;
  EditOutcome r = ft_edit(m, item, cfg);
  CHECK(r.success);
  CHECK(r.patches_added == 0);
  CHECK(judge(m, item).correct);

  // parameters() lists embeddings, blocks in order, then the head; the last
  // block's tensors are the ones the last-layer scope exposes.
  std::vector<const Tensor*> last;
  for (Tensor* t : m.parameters(ParamScope::kLastLayer)) last.push_back(t);
  const auto after = m.parameters();
  std::size_t changed = 0;
  for (std::size_t i = 0; i < n_all; ++i) {
    const bool in_last = std::find(last.begin(), last.end(), after[i]) != last.end();
    const bool same = std::equal(before[i].begin(), before[i].end(), after[i]->values().begin());
    if (!in_last) CHECK(same);
    changed += !same;
  }
  CHECK(changed > 0);
  CHECK(changed <= n_last);
  for (const Tensor* t : after) CHECK_FALSE(t->requires_grad());
}

TEST_CASE("fine-tuning everything may move every group") {
  TransformerModel m = testing::trained_classifier();
  LabeledInput item = flipped(testing::separable_task(30, 22)[0]);
  const auto hash = m.core_hash();
  FineTuneConfig cfg;
  cfg.scope = ParamScope::kAll;
  cfg.lr = 1e-3;
  EditOutcome r = ft_edit(m, item, cfg);
  CHECK(r.success);
  CHECK(m.core_hash() != hash);
}

TEST_CASE("zero step budget leaves every editor's model unchanged") {
  TransformerModel base = testing::trained_classifier();
  Tensor memory = harvest_queries(base, items_of(testing::separable_task(50, 9)));
  auto pool = items_of(testing::separable_task(40, 10));
  LabeledInput item = flipped(testing::separable_task(30, 22)[0]);
  auto probe = items_of(testing::separable_task(50, 11));
  const Tensor want = supervised_logits(base, probe);
  for (std::string name : {"t-patcher", "ft-last", "ft-all", "ft-last-kl", "ft-all-kl"}) {
    EditorConfig cfg = editor_config(name);
    cfg.patcher.max_steps = 0;
    cfg.ft.max_steps = 0;
    TransformerModel m = base;
    EditOutcome r = make_editor(cfg)->edit(m, item, {&memory, pool, 0});
    CAPTURE(name);
    CHECK_FALSE(r.success);
    CHECK(m.core_hash() == base.core_hash());
    CHECK(m.parameter_count() == base.parameter_count());
    CHECK(supervised_logits(m, probe).same_values(want));
  }
}

TEST_CASE("KL fine-tuning reports its regulariser and needs a pool") {
  TransformerModel m = testing::trained_classifier();
  auto pool = items_of(testing::separable_task(100, 12));
  LabeledInput item = flipped(testing::separable_task(30, 22)[0]);
  FineTuneConfig cfg;
  cfg.lr = 1e-3;
  cfg.kl = true;
  cfg.kl_batch = 16;
  TransformerModel a = m, b = m;
  EditOutcome r = ft_edit(a, item, cfg, pool, 4);
  CHECK(r.success);
  CHECK(r.losses.l_kl >= 0.0);
  ft_edit(b, item, cfg, pool, 4);
  CHECK(a.core_hash() == b.core_hash());
  CHECK_THROWS_AS(ft_edit(m, item, cfg), ParameterError);
  CHECK_THROWS_AS(ft_edit(a, item, cfg, pool), ContractViolation);
}

TEST_CASE("the patch editor forwards to apply_edit") {
  TransformerModel base = testing::trained_classifier();
  Tensor memory = harvest_queries(base, items_of(testing::separable_task(300, 21)));
  LabeledInput item = flipped(testing::separable_task(30, 22)[0]);
  TransformerModel a = base, b = base;
  EditorConfig cfg = editor_config("t-patcher");
  EditOutcome r = make_editor(cfg)->edit(a, item, {&memory, {}, 3});
  PatchEditResult direct = apply_edit(b, item, {&memory, {}, 3}, cfg.patcher);
  CHECK(r.success == direct.success);
  CHECK(r.steps == direct.steps);
  CHECK(r.patches_added == direct.patches_added);
  CHECK(r.losses.total == direct.losses.total);
  CHECK(a.patches().keys.same_values(b.patches().keys));
  CHECK(a.patches().owner_edit_ids == std::vector<std::int64_t>{3});
}
