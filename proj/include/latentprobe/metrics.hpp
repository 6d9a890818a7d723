#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "latentprobe/corpus.hpp"
#include "latentprobe/truncation.hpp"

namespace latentprobe {

// Outcome of one (problem, ratio) elicitation.
struct EvalRecord {
  std::string problem_id;
  LanguageCode language;
  Ratio ratio;
  std::vector<bool> correct;  // one flag per sample, generation order
  bool gold_in_prefix = false;
};

struct MetricCurve {
  int k = 1;
  std::vector<double> ratios;
  std::vector<double> values;
  // Denominator per ratio: N for accuracy, |C_k(r)| for gold-in-trace. A
  // gold-in-trace point with support 0 is undefined and carries value 0.
  std::vector<std::size_t> support;
};

struct MetricSummary {
  int k = 1;
  double autc = 0.0;
  double augc = 0.0;
  double lrs = 0.0;
  std::vector<double> undefined_g_points;
};

struct CausalBreakdown {
  int k = 1;
  double ratio_prev = 0.0;
  double ratio_cur = 0.0;
  int newly_correct = 0;
  int case_new_in_added = 0;
  int case_earlier_in_trace = 0;
  int case_not_in_trace = 0;
};

// True iff one of the first k flags is set.
bool solved_at_k(const EvalRecord& record, int k);

// a_k(r) over records that share one ratio, one record per problem.
double pass_at_k(std::span<const EvalRecord> records_at_r, int k);

// g_k(r): share of pass@k-solved records whose visible prefix holds the gold
// answer; nullopt when nothing is solved.
std::optional<double> gold_in_trace_rate(std::span<const EvalRecord> records_at_r, int k);

double trapezoid(std::span<const double> ratios, std::span<const double> values);

// Records for one language; every problem must cover every grid ratio.
MetricCurve accuracy_curve(std::span<const EvalRecord> records, const RatioGrid& grid, int k);
MetricCurve gold_in_trace_curve(std::span<const EvalRecord> records, const RatioGrid& grid, int k);

// AUTC, AUGC (undefined g points imputed as 0) and LRS = ∫ a(1 - g) dr with
// the product formed at grid points before integrating.
MetricSummary summarize(const MetricCurve& a_curve, const MetricCurve& g_curve);

// Splits the problems that become solved between adjacent grid ratios by
// where the gold answer is first visible: inside the newly added steps,
// earlier in the trace, or not yet at all.
std::vector<CausalBreakdown> causal_decomposition(std::span<const EvalRecord> records, const RatioGrid& grid,
                                                  int k = 1);

}  // namespace latentprobe
