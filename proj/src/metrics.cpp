#include "latentprobe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <boost/multiprecision/cpp_int.hpp>
#include <map>
#include <set>

#include "latentprobe/error.hpp"

namespace latentprobe {
namespace {

using boost::multiprecision::cpp_int;
using boost::multiprecision::cpp_rational;

// Doubles as integers on a shared power-of-two scale: v[i] == out[i] * 2^exponent.
std::vector<cpp_int> common_scale(std::span<const double> v, int& exponent) {
  exponent = std::numeric_limits<int>::max();
  for (double x : v) {
    if (!std::isfinite(x)) throw ValidationError("trapezoid: non-finite input");
    if (x == 0.0) continue;
    int e = 0;
    std::frexp(x, &e);
    exponent = std::min(exponent, e - 53);
  }
  if (exponent == std::numeric_limits<int>::max()) exponent = 0;
  std::vector<cpp_int> out;
  out.reserve(v.size());
  for (double x : v) {
    if (x == 0.0) {
      out.emplace_back(0);
      continue;
    }
    int e = 0;
    const double m = std::frexp(x, &e);
    out.push_back(cpp_int(static_cast<long long>(std::ldexp(m, 53))) << (e - 53 - exponent));
  }
  return out;
}

// Round-to-nearest-even conversion.
double to_double(const cpp_rational& x) {
  cpp_int n = boost::multiprecision::numerator(x);
  const cpp_int d = boost::multiprecision::denominator(x);
  if (n == 0) return 0.0;
  const bool negative = n < 0;
  if (negative) n = -n;
  const long shift = 64 + static_cast<long>(msb(d)) - static_cast<long>(msb(n));
  cpp_int q, r;
  if (shift >= 0) {
    divide_qr(cpp_int(n << shift), d, q, r);
  } else {
    divide_qr(n, cpp_int(d << -shift), q, r);
  }
  const unsigned drop = static_cast<unsigned>(msb(q)) + 1 - 53;
  cpp_int kept = q >> drop;
  const cpp_int rest = q - (kept << drop);
  const cpp_int half = cpp_int(1) << (drop - 1);
  if (rest > half || (rest == half && (r != 0 || (kept & 1) != 0))) kept += 1;
  const double out = std::ldexp(kept.convert_to<double>(), static_cast<int>(drop) - static_cast<int>(shift));
  return negative ? -out : out;
}


void check_k(const EvalRecord& record, int k) {
  if (k < 1 || static_cast<std::size_t>(k) > record.correct.size()) {
    throw ValidationError("k=" + std::to_string(k) + " outside [1, " + std::to_string(record.correct.size()) +
                          "] for problem '" + record.problem_id + "'");
  }
}

void check_single_ratio(std::span<const EvalRecord> records) {
  std::set<std::string> ids;
  for (const EvalRecord& r : records) {
    if (r.ratio != records.front().ratio) throw ValidationError("records span several ratios");
    if (!ids.insert(r.problem_id).second) {
      throw ValidationError("duplicate record for problem '" + r.problem_id + "'");
    }
  }
}

// problem id -> records indexed by grid position.
std::map<std::string, std::vector<const EvalRecord*>> by_problem(std::span<const EvalRecord> records,
                                                                 const RatioGrid& grid) {
  std::map<std::string, std::vector<const EvalRecord*>> table;
  const auto& ratios = grid.ratios();
  for (const EvalRecord& r : records) {
    auto it = std::lower_bound(ratios.begin(), ratios.end(), r.ratio);
    if (it == ratios.end() || *it != r.ratio) {
      throw ValidationError("record for '" + r.problem_id + "' at " + std::to_string(r.ratio.percent()) +
                            "% is not on the grid");
    }
    auto& row = table[r.problem_id];
    row.resize(ratios.size(), nullptr);
    auto& slot = row[static_cast<std::size_t>(it - ratios.begin())];
    if (slot) throw ValidationError("duplicate record for '" + r.problem_id + "' at " +
                                    std::to_string(r.ratio.percent()) + "%");
    slot = &r;
  }
  for (const auto& [id, row] : table) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (!row[i]) {
        throw ValidationError("problem '" + id + "' lacks a record at " +
                              std::to_string(ratios[i].percent()) + "%");
      }
    }
  }
  return table;
}

std::vector<std::vector<EvalRecord>> columns(std::span<const EvalRecord> records, const RatioGrid& grid) {
  const auto table = by_problem(records, grid);
  std::vector<std::vector<EvalRecord>> cols(grid.size());
  for (const auto& [id, row] : table) {
    for (std::size_t i = 0; i < row.size(); ++i) cols[i].push_back(*row[i]);
  }
  return cols;
}

}  // namespace

bool solved_at_k(const EvalRecord& record, int k) {
  check_k(record, k);
  for (int j = 0; j < k; ++j) {
    if (record.correct[static_cast<std::size_t>(j)]) return true;
  }
  return false;
}

double pass_at_k(std::span<const EvalRecord> records_at_r, int k) {
  if (records_at_r.empty()) throw ValidationError("pass_at_k: no records");
  check_single_ratio(records_at_r);
  std::size_t solved = 0;
  for (const EvalRecord& r : records_at_r) solved += solved_at_k(r, k) ? 1 : 0;
  return static_cast<double>(solved) / static_cast<double>(records_at_r.size());
}

std::optional<double> gold_in_trace_rate(std::span<const EvalRecord> records_at_r, int k) {
  if (records_at_r.empty()) throw ValidationError("gold_in_trace_rate: no records");
  check_single_ratio(records_at_r);
  std::size_t solved = 0;
  std::size_t visible = 0;
  for (const EvalRecord& r : records_at_r) {
    if (!solved_at_k(r, k)) continue;
    ++solved;
    visible += r.gold_in_prefix ? 1 : 0;
  }
  if (solved == 0) return std::nullopt;
  return static_cast<double>(visible) / static_cast<double>(solved);
}

double trapezoid(std::span<const double> ratios, std::span<const double> values) {
  if (ratios.size() != values.size()) throw ValidationError("trapezoid: length mismatch");
  for (std::size_t i = 1; i < ratios.size(); ++i) {
    if (!(ratios[i] > ratios[i - 1])) throw ValidationError("trapezoid: ratios not strictly ascending");
  }
  // Summed exactly and rounded once, so a constant 1 over [0, 1] is exactly
  // 1.0 and telescoping sums do not drift with the grid spacing.
  int er = 0, ev = 0;
  const auto r = common_scale(ratios, er);
  const auto v = common_scale(values, ev);
  cpp_int sum = 0;
  for (std::size_t i = 1; i < r.size(); ++i) sum += (r[i] - r[i - 1]) * (v[i - 1] + v[i]);
  const int exponent = er + ev - 1;  // the trapezoid's halving
  cpp_rational area = sum;
  if (exponent >= 0) {
    area *= cpp_rational(cpp_int(1) << exponent);
  } else {
    area /= cpp_rational(cpp_int(1) << -exponent);
  }
  return to_double(area);
}

MetricCurve accuracy_curve(std::span<const EvalRecord> records, const RatioGrid& grid, int k) {
  const auto cols = columns(records, grid);
  MetricCurve curve{k, grid.values(), {}, {}};
  for (const auto& col : cols) {
    curve.values.push_back(pass_at_k(col, k));
    curve.support.push_back(col.size());
  }
  return curve;
}

MetricCurve gold_in_trace_curve(std::span<const EvalRecord> records, const RatioGrid& grid, int k) {
  const auto cols = columns(records, grid);
  MetricCurve curve{k, grid.values(), {}, {}};
  for (const auto& col : cols) {
    std::size_t solved = 0;
    for (const EvalRecord& r : col) solved += solved_at_k(r, k) ? 1 : 0;
    curve.values.push_back(gold_in_trace_rate(col, k).value_or(0.0));
    curve.support.push_back(solved);
  }
  return curve;
}

MetricSummary summarize(const MetricCurve& a_curve, const MetricCurve& g_curve) {
  if (a_curve.k != g_curve.k || a_curve.ratios != g_curve.ratios || a_curve.values.size() != a_curve.ratios.size() ||
      g_curve.values.size() != g_curve.ratios.size()) {
    throw ValidationError("summarize: curves do not share k and grid");
  }
  MetricSummary summary;
  summary.k = a_curve.k;
  std::vector<double> g(g_curve.values);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (i < g_curve.support.size() && g_curve.support[i] == 0) {
      g[i] = 0.0;
      summary.undefined_g_points.push_back(g_curve.ratios[i]);
    }
  }
  std::vector<double> latent(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) latent[i] = a_curve.values[i] * (1.0 - g[i]);
  summary.autc = trapezoid(a_curve.ratios, a_curve.values);
  summary.augc = trapezoid(g_curve.ratios, g);
  summary.lrs = trapezoid(a_curve.ratios, latent);
  return summary;
}

std::vector<CausalBreakdown> causal_decomposition(std::span<const EvalRecord> records, const RatioGrid& grid,
                                                  int k) {
  const auto table = by_problem(records, grid);
  const auto ratios = grid.values();
  std::vector<CausalBreakdown> out;
  for (std::size_t i = 1; i < ratios.size(); ++i) {
    out.push_back({k, ratios[i - 1], ratios[i], 0, 0, 0, 0});
  }
  for (const auto& [id, row] : table) {
    std::size_t first_visible = row.size();
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (row[i]->gold_in_prefix) {
        first_visible = i;
        break;
      }
    }
    for (std::size_t i = 1; i < row.size(); ++i) {
      if (!solved_at_k(*row[i], k) || solved_at_k(*row[i - 1], k)) continue;
      CausalBreakdown& bucket = out[i - 1];
      ++bucket.newly_correct;
      if (!row[i]->gold_in_prefix) {
        ++bucket.case_not_in_trace;
      } else if (first_visible == i) {
        ++bucket.case_new_in_added;
      } else {
        ++bucket.case_earlier_in_trace;
      }
    }
  }
  return out;
}

}  // namespace latentprobe
