#include <cmath>
#include <vector>

#include "doctest.h"
#include "latentprobe/error.hpp"
#include "latentprobe/metrics.hpp"

using namespace latentprobe;

namespace {

EvalRecord rec(const std::string& id, int pct, std::vector<bool> correct, bool gold = false) {
  return EvalRecord{id, "en", Ratio::from_percent(pct), std::move(correct), gold};
}

// Two problems on a three-point grid:
//   p: wrong, then right with gold first visible at 50%, right at 100%
//   q: wrong, wrong, right with gold first visible at 100%
std::vector<EvalRecord> small() {
  return {
      rec("p", 0, {false, false}), rec("p", 50, {true, false}, true), rec("p", 100, {true, true}, true),
      rec("q", 0, {false, false}), rec("q", 50, {false, true}),       rec("q", 100, {true, false}, true),
  };
}

const RatioGrid kGrid({0, 50, 100});

}  // namespace

TEST_CASE("pass@k uses the first k samples") {
  const EvalRecord r = rec("p", 0, {false, false, true});
  CHECK_FALSE(solved_at_k(r, 1));
  CHECK_FALSE(solved_at_k(r, 2));
  CHECK(solved_at_k(r, 3));
  CHECK_THROWS_AS(solved_at_k(r, 4), Error);
  CHECK_THROWS_AS(solved_at_k(r, 0), Error);

  const std::vector<EvalRecord> at = {rec("a", 0, {true}), rec("b", 0, {false}), rec("c", 0, {false}),
                                      rec("d", 0, {true})};
  CHECK(pass_at_k(at, 1) == 0.5);
  CHECK_THROWS_AS(pass_at_k(std::vector<EvalRecord>{}, 1), Error);
  const std::vector<EvalRecord> dup = {rec("a", 0, {true}), rec("a", 0, {false})};
  CHECK_THROWS_AS(pass_at_k(dup, 1), Error);
  const std::vector<EvalRecord> mixed = {rec("a", 0, {true}), rec("b", 10, {false})};
  CHECK_THROWS_AS(pass_at_k(mixed, 1), Error);
}

TEST_CASE("gold-in-trace rate conditions on solved problems") {
  const std::vector<EvalRecord> at = {rec("a", 50, {true}, true), rec("b", 50, {true}, false),
                                      rec("c", 50, {false}, true), rec("d", 50, {true}, true)};
  REQUIRE(gold_in_trace_rate(at, 1));
  CHECK(*gold_in_trace_rate(at, 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  const std::vector<EvalRecord> none = {rec("a", 50, {false}, true)};
  CHECK_FALSE(gold_in_trace_rate(none, 1));
}

TEST_CASE("trapezoid") {
  const std::vector<double> r = {0.0, 0.5, 1.0};
  CHECK(trapezoid(r, std::vector<double>{1, 1, 1}) == 1.0);
  CHECK(trapezoid(r, std::vector<double>{0, 0.5, 1}) == 0.5);
  CHECK(trapezoid(r, std::vector<double>{0, 1, 0}) == 0.5);
  CHECK(trapezoid(std::vector<double>{0.3}, std::vector<double>{0.7}) == 0.0);
  CHECK(trapezoid(std::vector<double>{}, std::vector<double>{}) == 0.0);
  // A constant on the 5% grid integrates to exactly 1, which a running
  // floating-point sum does not guarantee.
  const RatioGrid aime = grid_for(Dataset::kAime);
  CHECK(trapezoid(aime.values(), std::vector<double>(aime.size(), 1.0)) == 1.0);
  CHECK(trapezoid(aime.values(), aime.values()) == 0.5);

  CHECK_THROWS_AS(trapezoid(r, std::vector<double>{1, 1}), Error);
  CHECK_THROWS_AS(trapezoid(std::vector<double>{0, 0.5, 0.5}, std::vector<double>{1, 1, 1}), Error);
  CHECK_THROWS_AS(trapezoid(std::vector<double>{0, 1}, std::vector<double>{1, std::nan("")}), Error);
}

TEST_CASE("curves and summary on a hand-worked example") {
  const auto records = small();
  const MetricCurve a1 = accuracy_curve(records, kGrid, 1);
  CHECK(a1.values == std::vector<double>{0.0, 0.5, 1.0});
  CHECK(a1.support == std::vector<std::size_t>{2, 2, 2});
  const MetricCurve a2 = accuracy_curve(records, kGrid, 2);
  CHECK(a2.values == std::vector<double>{0.0, 1.0, 1.0});

  const MetricCurve g1 = gold_in_trace_curve(records, kGrid, 1);
  CHECK(g1.values == std::vector<double>{0.0, 1.0, 1.0});
  CHECK(g1.support == std::vector<std::size_t>{0, 1, 2});
  const MetricCurve g2 = gold_in_trace_curve(records, kGrid, 2);
  CHECK(g2.values == std::vector<double>{0.0, 0.5, 1.0});

  // k=1: AUTC = 0.25*(0+0.5) + 0.25*(0.5+1) = 0.5
  //      AUGC = 0.25*(0+1) + 0.25*(1+1) = 0.75 with g(0) undefined -> 0
  //      a(1-g) = {0, 0, 0} -> LRS 0
  const MetricSummary s1 = summarize(a1, g1);
  CHECK(s1.autc == 0.5);
  CHECK(s1.augc == 0.75);
  CHECK(s1.lrs == 0.0);
  CHECK(s1.undefined_g_points == std::vector<double>{0.0});

  // k=2: a = {0,1,1}, g = {0,0.5,1}, a(1-g) = {0,0.5,0} -> LRS 0.25
  const MetricSummary s2 = summarize(a2, g2);
  CHECK(s2.autc == 0.75);
  CHECK(s2.augc == 0.5);
  CHECK(s2.lrs == 0.25);
  CHECK(s2.autc - s2.lrs <= s2.augc + 1e-15);

  CHECK_THROWS_AS(summarize(a1, g2), Error);
}

TEST_CASE("curve inputs must cover the grid") {
  auto records = small();
  records.pop_back();
  CHECK_THROWS_AS(accuracy_curve(records, kGrid, 1), Error);
  auto off_grid = small();
  off_grid.push_back(rec("p", 30, {true, true}));
  CHECK_THROWS_AS(accuracy_curve(off_grid, kGrid, 1), Error);
  auto dup = small();
  dup.push_back(rec("q", 50, {true, true}));
  CHECK_THROWS_AS(gold_in_trace_curve(dup, kGrid, 1), Error);
}

TEST_CASE("causal decomposition by where the gold first appears") {
  const auto breakdown = causal_decomposition(small(), kGrid, 1);
  REQUIRE(breakdown.size() == 2);
  // 0 -> 50: p becomes correct; gold first visible at 50 -> inside the added steps.
  CHECK(breakdown[0].ratio_prev == 0.0);
  CHECK(breakdown[0].ratio_cur == 0.5);
  CHECK(breakdown[0].newly_correct == 1);
  CHECK(breakdown[0].case_new_in_added == 1);
  // 50 -> 100: q becomes correct; gold first visible at 100.
  CHECK(breakdown[1].newly_correct == 1);
  CHECK(breakdown[1].case_new_in_added == 1);
  CHECK(breakdown[1].case_earlier_in_trace == 0);

  // With gold visible from the start p lands in earlier_in_trace; a problem
  // solved without the gold in its prefix lands in not_in_trace.
  std::vector<EvalRecord> other = {
      rec("p", 0, {false}, true), rec("p", 50, {true}, true), rec("p", 100, {true}, true),
      rec("q", 0, {false}),       rec("q", 50, {true}),       rec("q", 100, {true}),
  };
  const auto b = causal_decomposition(other, kGrid, 1);
  CHECK(b[0].newly_correct == 2);
  CHECK(b[0].case_earlier_in_trace == 1);
  CHECK(b[0].case_not_in_trace == 1);
  CHECK(b[1].newly_correct == 0);
}
