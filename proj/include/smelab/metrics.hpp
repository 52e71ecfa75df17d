#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "smelab/sme_harness.hpp"

namespace smelab {

using Rate = std::optional<double>;  // empty when the denominator is zero

// Fraction of edits whose immediate post-edit prediction is the target.
Rate success_rate(const SmeRun& run);

struct Generalization {
  Rate rate;
  std::size_t pairs = 0;
  std::size_t excluded_edits = 0;  // edits without equivalents
};
// Over all (edit, equivalent) pairs, evaluated right after each edit.
Generalization generalization_rate(const SmeRun& run);

// Fraction of edited examples the final model still gets right.
Rate edit_retain_rate(const SmeRun& run);

struct Retention {
  Rate train;  // TrainR on D_tr
  Rate test;   // TestR on D_test
};
// Final-model correct count over f_0 correct count; may exceed 1.
Retention retain_rates(const SmeRun& run);

struct Traces {
  std::vector<std::size_t> t;  // stream position of each edit
  std::vector<double> sr, er, train_r, test_r;
  std::vector<std::size_t> patches, steps;
};
// One entry per edit: SR so far, ER over past edits, TrainR, TestR.
Traces traces(const SmeRun& run);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;
};
MeanStd mean_std(std::span<const double> values);

struct ActivationStats {
  MeanStd edit, past_edit, random;
  // |a_p| of patch i on the query of patch j's mistake (square; patches in
  // creation order).
  Tensor matrix;
  double diagonal_mean = 0.0;
  double off_diagonal_mean = 0.0;
};
// |a_p| of every final patch on its own edit query, on queries of other
// edits and on random test queries.
std::optional<ActivationStats> activation_stats(const SmeRun& run);

struct SmeReport {
  std::string editor;
  std::size_t fold = 0;
  std::size_t edits = 0;     // E
  std::size_t mistakes = 0;  // N
  Rate sr, gr, er, train_r, test_r;
  std::size_t gr_pairs = 0, gr_excluded = 0;
  std::size_t patches = 0;
  std::size_t initial_params = 0, final_params = 0;
  Traces trace;
  std::optional<ActivationStats> activations;
};
SmeReport summarize(const SmeRun& run);

struct FoldSummary {
  std::string editor;
  std::size_t folds = 0;
  MeanStd sr, gr, er, train_r, test_r, edits, mistakes, patches;
};
// Absent rates are left out of the mean.
FoldSummary aggregate(std::span<const SmeReport> reports);

// CSV writers. Numbers use fixed six-decimal formatting so identical runs
// give identical bytes.
std::string steps_csv(const SmeReport& report);
std::string summary_csv(std::span<const SmeReport> reports);
std::string aggregate_csv(std::span<const FoldSummary> rows);
std::string activation_matrix_csv(const ActivationStats& stats);
std::string format_rate(const Rate& r);

}  // namespace smelab
