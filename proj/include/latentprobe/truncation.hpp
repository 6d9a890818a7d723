#pragma once

#include <compare>
#include <string>
#include <vector>

#include "latentprobe/corpus.hpp"

namespace latentprobe {

// A truncation ratio held as an exact integer percentage.
class Ratio {
 public:
  constexpr Ratio() = default;
  static Ratio from_percent(int percent);
  // Accepts reals within 1e-9 of a whole percent in [0, 1]; throws otherwise.
  static Ratio from_real(double r);

  constexpr int percent() const { return percent_; }
  double value() const { return percent_ / 100.0; }

  auto operator<=>(const Ratio&) const = default;

 private:
  constexpr explicit Ratio(int percent) : percent_(percent) {}
  int percent_ = 0;
};

class RatioGrid {
 public:
  // Percentages must be strictly ascending, start at 0 and end at 100.
  explicit RatioGrid(std::vector<int> percents);

  const std::vector<Ratio>& ratios() const { return ratios_; }
  std::vector<int> percents() const;
  std::vector<double> values() const;
  std::size_t size() const { return ratios_.size(); }
  bool contains(Ratio r) const;

 private:
  std::vector<Ratio> ratios_;
};

// MGSM: every 10%; AIME: every 5%.
RatioGrid grid_for(Dataset dataset);

// floor(r * T) in exact integer arithmetic.
int truncation_index(Ratio r, int total_steps);
// Real-valued entry point; the ratio is snapped to an exact rational first
// (see Ratio::from_real) and throws for r outside [0, 1].
int truncation_index(double r, int total_steps);

struct TruncatedTrace {
  std::string problem_id;
  LanguageCode language;
  Ratio ratio;
  int kept_steps = 0;
  std::vector<Step> steps;

  // Visible prefix: every kept step followed by its separator.
  std::string text() const;
};

TruncatedTrace truncate(const ReasoningTrace& trace, Ratio r);

}  // namespace latentprobe
