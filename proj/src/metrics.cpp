#include "smelab/metrics.hpp"

#include <cmath>
#include <cstdio>

#include "smelab/errors.hpp"

namespace smelab {

namespace {

Rate ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

std::size_t correct_count(const std::vector<RawPrediction>& preds, const std::vector<std::vector<int>>& labels) {
  if (preds.size() != labels.size()) throw ShapeError("prediction and label counts differ");
  std::size_t n = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) n += prediction_correct(preds[i], labels[i]);
  return n;
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

Rate success_rate(const SmeRun& run) {
  std::size_t edits = 0, ok = 0;
  for (const auto& r : run.records) {
    if (!r.edited) continue;
    ++edits;
    ok += prediction_correct(r.post, r.labels);
  }
  return ratio(ok, edits);
}

Generalization generalization_rate(const SmeRun& run) {
  Generalization g;
  std::size_t ok = 0;
  for (const auto& r : run.records) {
    if (!r.edited) continue;
    if (r.equivalents.empty()) {
      ++g.excluded_edits;
      continue;
    }
    for (const auto& p : r.equivalents) {
      ++g.pairs;
      ok += prediction_correct(p, r.labels);
    }
  }
  g.rate = ratio(ok, g.pairs);
  return g;
}

Rate edit_retain_rate(const SmeRun& run) {
  std::size_t k = 0, ok = 0;
  for (const auto& r : run.records) {
    if (!r.edited) continue;
    if (k >= run.final_edit_predictions.size()) throw ShapeError("missing final prediction for an edit");
    ok += prediction_correct(run.final_edit_predictions[k++], r.labels);
  }
  return ratio(ok, k);
}

Retention retain_rates(const SmeRun& run) {
  return {ratio(correct_count(run.fT_train, run.train_labels), correct_count(run.f0_train, run.train_labels)),
          ratio(correct_count(run.fT_test, run.test_labels), correct_count(run.f0_test, run.test_labels))};
}

Traces traces(const SmeRun& run) {
  Traces tr;
  const std::size_t train0 = correct_count(run.f0_train, run.train_labels);
  const std::size_t test0 = correct_count(run.f0_test, run.test_labels);
  std::size_t edits = 0, ok = 0;
  for (const auto& r : run.records) {
    if (!r.edited) continue;
    ++edits;
    ok += prediction_correct(r.post, r.labels);
    tr.t.push_back(r.t);
    tr.sr.push_back(static_cast<double>(ok) / static_cast<double>(edits));
    tr.patches.push_back(r.patches_added);
    tr.steps.push_back(r.steps);
    if (run.traced) {
      tr.er.push_back(static_cast<double>(r.past_correct) / static_cast<double>(edits));
      tr.train_r.push_back(train0 ? static_cast<double>(r.train_correct) / static_cast<double>(train0) : NAN);
      tr.test_r.push_back(test0 ? static_cast<double>(r.test_correct) / static_cast<double>(test0) : NAN);
    }
  }
  return tr;
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd m;
  m.n = values.size();
  if (m.n == 0) return m;
  double s = 0.0;
  for (double v : values) s += v;
  m.mean = s / static_cast<double>(m.n);
  if (m.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - m.mean) * (v - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(m.n - 1));
  }
  return m;
}

std::optional<ActivationStats> activation_stats(const SmeRun& run) {
  const PatchSet& p = run.final_model.patches();
  if (p.empty()) return std::nullopt;
  const std::size_t n = p.size(), d = p.d_model();
  // Own query and owning edit of every patch, in creation order.
  std::vector<std::vector<double>> own;
  std::vector<std::size_t> owner;
  for (const auto& r : run.records) {
    if (!r.edited || r.patches_added == 0) continue;
    if (r.patch_queries.rank() != 2 || r.patch_queries.rows() != r.patches_added) {
      throw ShapeError("activation_stats: patch queries do not match the patches added");
    }
    for (std::size_t i = 0; i < r.patches_added; ++i) {
      auto row = r.patch_queries.row(i);
      own.emplace_back(row.begin(), row.end());
      owner.push_back(r.t);
    }
  }
  if (own.size() != n) throw ShapeError("activation_stats: record patch count differs from the model");
  const Activation act = run.final_model.config().activation;
  auto activation_of = [&](std::size_t patch, std::span<const double> q) {
    double z = p.bias[patch];
    for (std::size_t j = 0; j < d; ++j) z += q[j] * p.keys.at(j, patch);
    return std::abs(activate(z, act));
  };

  ActivationStats s;
  s.matrix = Tensor::matrix(n, n);
  std::vector<double> edit, past, random;
  double off_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double a = activation_of(i, own[j]);
      s.matrix.at(i, j) = a;
      if (i == j) {
        edit.push_back(a);
      } else {
        off_sum += a;
        if (owner[i] != owner[j]) past.push_back(a);
      }
    }
    if (run.random_queries.rank() == 2)
      for (std::size_t r = 0; r < run.random_queries.rows(); ++r) random.push_back(activation_of(i, run.random_queries.row(r)));
  }
  s.edit = mean_std(edit);
  s.past_edit = mean_std(past);
  s.random = mean_std(random);
  s.diagonal_mean = s.edit.mean;
  s.off_diagonal_mean = n > 1 ? off_sum / static_cast<double>(n * (n - 1)) : 0.0;
  return s;
}

SmeReport summarize(const SmeRun& run) {
  SmeReport r;
  r.editor = run.editor;
  r.fold = run.fold;
  for (const auto& rec : run.records) {
    r.edits += rec.edited;
    r.patches += rec.patches_added;
  }
  r.mistakes = run.f0_mistakes;
  r.sr = success_rate(run);
  Generalization g = generalization_rate(run);
  r.gr = g.rate;
  r.gr_pairs = g.pairs;
  r.gr_excluded = g.excluded_edits;
  r.er = edit_retain_rate(run);
  Retention ret = retain_rates(run);
  r.train_r = ret.train;
  r.test_r = ret.test;
  r.initial_params = run.initial_params;
  r.final_params = run.final_params;
  r.trace = traces(run);
  r.activations = activation_stats(run);
  return r;
}

FoldSummary aggregate(std::span<const SmeReport> reports) {
  FoldSummary s;
  s.folds = reports.size();
  if (!reports.empty()) s.editor = reports.front().editor;
  auto collect = [&](auto get) {
    std::vector<double> v;
    for (const auto& r : reports) {
      const Rate x = get(r);
      if (x) v.push_back(*x);
    }
    return mean_std(v);
  };
  s.sr = collect([](const SmeReport& r) { return r.sr; });
  s.gr = collect([](const SmeReport& r) { return r.gr; });
  s.er = collect([](const SmeReport& r) { return r.er; });
  s.train_r = collect([](const SmeReport& r) { return r.train_r; });
  s.test_r = collect([](const SmeReport& r) { return r.test_r; });
  s.edits = collect([](const SmeReport& r) -> Rate { return static_cast<double>(r.edits); });
  s.mistakes = collect([](const SmeReport& r) -> Rate { return static_cast<double>(r.mistakes); });
  s.patches = collect([](const SmeReport& r) -> Rate { return static_cast<double>(r.patches); });
  return s;
}

std::string format_rate(const Rate& r) { return r ? num(*r) : "NA"; }

std::string steps_csv(const SmeReport& report) {
  const Traces& tr = report.trace;
  std::string out = "t,edit,sr,er,train_r,test_r,patches,steps\n";
  for (std::size_t k = 0; k < tr.t.size(); ++k) {
    auto at = [&](const std::vector<double>& v) { return k < v.size() && !std::isnan(v[k]) ? num(v[k]) : "NA"; };
    out += std::to_string(tr.t[k]) + "," + std::to_string(k) + "," + num(tr.sr[k]) + "," + at(tr.er) + "," +
           at(tr.train_r) + "," + at(tr.test_r) + "," + std::to_string(tr.patches[k]) + "," +
           std::to_string(tr.steps[k]) + "\n";
  }
  return out;
}

std::string summary_csv(std::span<const SmeReport> reports) {
  std::string out =
      "fold,editor,edits,mistakes,sr,gr,er,train_r,test_r,patches,initial_params,final_params,edit_act,past_act,"
      "random_act\n";
  for (const auto& r : reports) {
    auto act = [&](auto get) { return r.activations ? num(get(*r.activations)) : std::string("NA"); };
    out += std::to_string(r.fold) + "," + r.editor + "," + std::to_string(r.edits) + "," +
           std::to_string(r.mistakes) + "," + format_rate(r.sr) + "," + format_rate(r.gr) + "," +
           format_rate(r.er) + "," + format_rate(r.train_r) + "," + format_rate(r.test_r) + "," +
           std::to_string(r.patches) + "," + std::to_string(r.initial_params) + "," +
           std::to_string(r.final_params) + "," +
           act([](const ActivationStats& a) { return a.edit.mean; }) + "," +
           act([](const ActivationStats& a) { return a.past_edit.mean; }) + "," +
           act([](const ActivationStats& a) { return a.random.mean; }) + "\n";
  }
  return out;
}

std::string aggregate_csv(std::span<const FoldSummary> rows) {
  std::string out =
      "editor,folds,sr_mean,sr_std,gr_mean,gr_std,er_mean,er_std,train_r_mean,train_r_std,test_r_mean,test_r_std,"
      "edits_mean,mistakes_mean,patches_mean\n";
  for (const auto& s : rows) {
    auto ms = [](const MeanStd& m) { return m.n ? num(m.mean) + "," + num(m.std) : std::string("NA,NA"); };
    out += s.editor + "," + std::to_string(s.folds) + "," + ms(s.sr) + "," + ms(s.gr) + "," + ms(s.er) + "," +
           ms(s.train_r) + "," + ms(s.test_r) + "," + num(s.edits.mean) + "," + num(s.mistakes.mean) + "," +
           num(s.patches.mean) + "\n";
  }
  return out;
}

std::string activation_matrix_csv(const ActivationStats& stats) {
  std::string out;
  const std::size_t n = stats.matrix.rank() == 2 ? stats.matrix.rows() : 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j) out += ",";
      out += num(stats.matrix.at(i, j));
    }
    out += "\n";
  }
  return out;
}

}  // namespace smelab
