#include "smelab/sme_harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <future>
#include <numeric>

#include "smelab/errors.hpp"
#include "smelab/task_io.hpp"

namespace smelab {

bool prediction_correct(const RawPrediction& p, const std::vector<int>& labels) { return p == labels; }

std::uint64_t model_fingerprint(const TransformerModel& model) {
  std::uint64_t h = model.core_hash();
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  const std::uint64_t layer = model.patched_layer();
  mix(&layer, sizeof layer);
  const PatchSet& p = model.patches();
  const std::uint64_t n = p.size();
  mix(&n, sizeof n);
  for (const Tensor* t : {&p.keys, &p.bias, &p.raw_values, &p.value_scale})
    mix(t->values().data(), t->values().size() * sizeof(double));
  return h;
}

std::vector<RawPrediction> predict_all(const TransformerModel& model, std::span<const LabeledInput> items) {
  std::vector<RawPrediction> out;
  out.reserve(items.size());
  for (Judgement& j : judge(model, items)) out.push_back(std::move(j.predicted));
  return out;
}

std::vector<RawPrediction> PredictionCache::get(const TransformerModel& model, const std::string& set_name,
                                                std::span<const LabeledInput> items) {
  const auto key = std::make_pair(model_fingerprint(model), set_name);
  {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = entries_.find(key);
    if (it != entries_.end()) {
      ++hits_;
      return it->second;
    }
  }
  auto preds = predict_all(model, items);
  std::lock_guard<std::mutex> lock(mu_);
  entries_.emplace(key, preds);
  return preds;
}

namespace {

std::vector<std::vector<int>> labels_of(const ModelConfig& mc, std::span<const LabeledInput> items) {
  std::vector<std::vector<int>> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(supervision(mc, it).labels);
  return out;
}

std::size_t count_correct(const std::vector<RawPrediction>& preds, const std::vector<std::vector<int>>& labels) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) n += prediction_correct(preds[i], labels[i]);
  return n;
}

RawPrediction predict_one(const TransformerModel& model, const LabeledInput& item) {
  return judge(model, item).predicted;
}

}  // namespace

SmeRun run_sme(const TransformerModel& f0, const Editor& editor, std::span<const EditExample> stream,
               std::optional<MemoryBank> memory, std::span<const LabeledInput> kl_pool, const EvalSets& eval,
               const SmeOptions& options, PredictionCache* cache) {
  const EditorConfig& ec = editor.config();
  if (ec.uses_memory() && (!memory || memory->size() == 0)) throw ParameterError("run_sme: editor needs a memory");
  const ModelConfig& mc = f0.config();
  SmeRun run;
  run.editor = ec.name();
  run.train_labels = labels_of(mc, eval.train);
  run.test_labels = labels_of(mc, eval.test);
  auto predictions = [&](const TransformerModel& m, const std::string& name, std::span<const LabeledInput> items) {
    return cache ? cache->get(m, name, items) : predict_all(m, items);
  };
  run.f0_train = predictions(f0, "d_tr", eval.train);
  run.f0_test = predictions(f0, "d_test", eval.test);
  run.initial_params = f0.parameter_count();
  run.traced = options.traces;

  std::vector<LabeledInput> items;
  items.reserve(stream.size());
  for (const auto& e : stream) items.push_back(labeled(e));
  {
    const auto f0_stream = predict_all(f0, items);
    for (std::size_t i = 0; i < items.size(); ++i)
      run.f0_mistakes += !prediction_correct(f0_stream[i], supervision(mc, items[i]).labels);
  }

  TransformerModel model = f0;
  std::vector<std::size_t> edited_index;  // stream positions of edits
  for (std::size_t t = 0; t < stream.size(); ++t) {
    const LabeledInput& item = items[t];
    StepRecord rec;
    rec.t = t;
    rec.example_id = stream[t].id;
    rec.labels = supervision(mc, item).labels;
    rec.pre = predict_one(model, item);
    // The branch is taken from the recorded prediction itself.
    rec.edited = !prediction_correct(rec.pre, rec.labels);
    if (!rec.edited) {
      run.records.push_back(std::move(rec));
      continue;
    }
    if (ec.uses_patches()) rec.patch_queries = count_mistakes(model, item, ec.patcher).queries;
    const auto start = std::chrono::steady_clock::now();
    EditOutcome out =
        editor.edit(model, item, {memory ? &memory->rows : nullptr, kl_pool, static_cast<std::int64_t>(t)});
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    rec.editor_success = out.success;
    rec.steps = out.steps;
    rec.patches_added = out.patches_added;
    rec.losses = out.losses;
    rec.post = predict_one(model, item);
    if (!stream[t].equivalents.empty()) {
      std::vector<LabeledInput> eq;
      for (const auto& tokens : stream[t].equivalents) eq.push_back({tokens, item.target});
      rec.equivalents = predict_all(model, eq);
    }
    edited_index.push_back(t);

    if (memory) {
      const LabeledInput one[] = {item};
      Tensor q = harvest_queries(model, one);
      std::vector<std::string> ids(q.rows(), stream[t].id);
      update_memory(*memory, q, ids);
    }
    if (options.traces) {
      std::vector<LabeledInput> past;
      for (std::size_t i : edited_index) past.push_back(items[i]);
      const auto past_preds = predict_all(model, past);
      for (std::size_t i = 0; i < past.size(); ++i)
        rec.past_correct += prediction_correct(past_preds[i], supervision(mc, past[i]).labels);
      rec.train_correct = count_correct(predictions(model, "d_tr", eval.train), run.train_labels);
      rec.test_correct = count_correct(predictions(model, "d_test", eval.test), run.test_labels);
    }
    run.records.push_back(std::move(rec));
  }

  run.fT_train = predictions(model, "d_tr", eval.train);
  run.fT_test = predictions(model, "d_test", eval.test);
  std::vector<LabeledInput> edited;
  for (std::size_t i : edited_index) edited.push_back(items[i]);
  run.final_edit_predictions = predict_all(model, edited);
  if (!eval.random.empty()) run.random_queries = harvest_queries(model, eval.random);
  run.final_params = model.parameter_count();
  run.final_model = std::move(model);
  run.memory = std::move(memory);
  return run;
}

DataSplits split_dataset(const Dataset& raw, const SplitRatios& ratios, std::size_t d_tr_size, std::uint64_t seed) {
  const double sum = ratios.train + ratios.val + ratios.edit;
  if (std::abs(sum - 1.0) > 1e-9 || ratios.train < 0 || ratios.val < 0 || ratios.edit < 0) {
    throw ParameterError("split ratios must be non-negative and sum to 1");
  }
  DataSplits s;
  Dataset rest;
  for (const auto& e : raw) (e.split == "test" ? s.test : rest).push_back(e);
  Rng rng(derive_seed(seed, 0x73706c));
  shuffle(std::span<EditExample>(rest), rng);
  const std::size_t n = rest.size();
  const auto n_train = static_cast<std::size_t>(std::llround(ratios.train * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(ratios.val * static_cast<double>(n)));
  if (n_train + n_val > n) throw ParameterError("split ratios leave no room for the edit set");
  s.train.assign(rest.begin(), rest.begin() + static_cast<long>(n_train));
  s.val.assign(rest.begin() + static_cast<long>(n_train), rest.begin() + static_cast<long>(n_train + n_val));
  s.edit.assign(rest.begin() + static_cast<long>(n_train + n_val), rest.end());
  if (s.train.empty() || s.edit.empty() || (ratios.val > 0 && s.val.empty())) {
    throw ParameterError("a split came out empty");
  }
  if (d_tr_size >= s.train.size()) throw ParameterError("D_tr must leave a memory pool");
  // train is already in shuffled order, so its head is a uniform sample.
  s.d_tr.assign(s.train.begin(), s.train.begin() + static_cast<long>(d_tr_size));
  s.pool.assign(s.train.begin() + static_cast<long>(d_tr_size), s.train.end());
  return s;
}

std::vector<Dataset> make_folds(const Dataset& edit, std::size_t n_folds, std::uint64_t seed) {
  if (n_folds == 0) throw ParameterError("need at least one fold");
  if (edit.size() < n_folds) throw ParameterError("fewer edit examples than folds");
  Dataset order = edit;
  Rng rng(derive_seed(seed, 0x666f6c64));
  shuffle(std::span<EditExample>(order), rng);
  std::vector<Dataset> folds(n_folds);
  for (std::size_t f = 0; f < n_folds; ++f) {
    const std::size_t lo = f * order.size() / n_folds, hi = (f + 1) * order.size() / n_folds;
    folds[f].assign(order.begin() + static_cast<long>(lo), order.begin() + static_cast<long>(hi));
  }
  return folds;
}

std::vector<SmeRun> run_folds(const TransformerModel& f0, const DataSplits& splits, const EditorConfig& editor_cfg,
                              const FoldOptions& options) {
  if (options.workers == 0) throw ParameterError("workers must be positive");
  const auto folds = make_folds(splits.edit, options.n_folds, options.seed);
  auto editor = make_editor(editor_cfg);

  EvalSets eval;
  for (const auto& e : splits.d_tr) eval.train.push_back(labeled(e));
  for (const auto& e : splits.test) eval.test.push_back(labeled(e));
  {
    std::vector<std::size_t> idx(splits.test.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(options.seed, 0x726e64));
    shuffle(std::span<std::size_t>(idx), rng);
    idx.resize(std::min(idx.size(), options.random_inputs));
    std::sort(idx.begin(), idx.end());
    for (std::size_t i : idx) eval.random.push_back(labeled(splits.test[i]));
  }
  std::vector<LabeledInput> pool;
  std::vector<std::string> pool_ids;
  for (const auto& e : splits.pool) {
    pool.push_back(labeled(e));
    pool_ids.push_back(e.id);
  }

  PredictionCache cache;
  auto run_one = [&](std::size_t f) {
    std::optional<MemoryBank> memory;
    if (editor_cfg.uses_memory()) {
      memory = build_memory(f0, pool, pool_ids, options.memory_capacity, derive_seed(options.seed, 0x10000 + f),
                            options.memory_policy);
    }
    SmeRun run = run_sme(f0, *editor, folds[f], std::move(memory), pool, eval, options.sme, &cache);
    run.fold = f;
    return run;
  };

  std::vector<SmeRun> runs(folds.size());
  for (std::size_t start = 0; start < folds.size(); start += options.workers) {
    const std::size_t end = std::min(folds.size(), start + options.workers);
    if (end - start == 1) {
      runs[start] = run_one(start);
      continue;
    }
    std::vector<std::future<SmeRun>> jobs;
    for (std::size_t f = start; f < end; ++f) jobs.push_back(std::async(std::launch::async, run_one, f));
    for (std::size_t f = start; f < end; ++f) runs[f] = jobs[f - start].get();
  }
  return runs;
}

PatchSet patch_prefix(const PatchSet& patches, std::size_t n) {
  if (n > patches.size()) throw ParameterError("patch_prefix: not that many patches");
  const std::size_t d = patches.d_model();
  PatchSet p = PatchSet::empty(d);
  if (n == 0) return p;
  p.keys = Tensor::matrix(d, n);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < n; ++c) p.keys.at(r, c) = patches.keys.at(r, c);
  auto head = [](const Tensor& t, std::size_t count, Shape shape) {
    return Tensor(std::move(shape), std::vector<double>(t.values().begin(), t.values().begin() + static_cast<long>(count)));
  };
  p.bias = head(patches.bias, n, Shape{n});
  p.raw_values = head(patches.raw_values, n * d, Shape{n, d});
  p.value_scale = head(patches.value_scale, n * d, Shape{n, d});
  if (!patches.owner_edit_ids.empty())
    p.owner_edit_ids.assign(patches.owner_edit_ids.begin(), patches.owner_edit_ids.begin() + static_cast<long>(n));
  return p;
}

ReplayResult replay(std::span<const StepRecord> records, std::span<const EditExample> stream,
                    const TransformerModel* patched_final) {
  ReplayResult r;
  if (records.size() != stream.size()) throw ParameterError("replay: one record per stream example required");
  for (std::size_t i = 0; i < records.size(); ++i) {
    const StepRecord& rec = records[i];
    if (rec.example_id != stream[i].id || rec.t != i) throw ParameterError("replay: records do not follow the stream");
    ++r.decisions;
    const bool edit = !prediction_correct(rec.pre, rec.labels);
    r.decision_mismatches += edit != rec.edited;
  }
  if (patched_final == nullptr) return r;

  const PatchSet& all = patched_final->patches();
  TransformerModel model = *patched_final;
  // Patches of edits before t form a prefix since edits append in order.
  auto patches_before = [&](std::int64_t t) {
    std::size_t n = 0;
    while (n < all.size() && all.owner_edit_ids[n] < t) ++n;
    return n;
  };
  for (std::size_t i = 0; i < records.size(); ++i) {
    const StepRecord& rec = records[i];
    const LabeledInput item = labeled(stream[i]);
    model.mutable_patches() = patch_prefix(all, patches_before(static_cast<std::int64_t>(i)));
    ++r.predictions_checked;
    r.prediction_mismatches += judge(model, item).predicted != rec.pre;
    if (rec.edited) {
      model.mutable_patches() = patch_prefix(all, patches_before(static_cast<std::int64_t>(i) + 1));
      ++r.predictions_checked;
      r.prediction_mismatches += judge(model, item).predicted != rec.post;
    }
  }
  return r;
}

}  // namespace smelab
