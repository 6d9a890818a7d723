#include "latentprobe/truncation.hpp"

#include <algorithm>
#include <cmath>

#include "latentprobe/error.hpp"

namespace latentprobe {

Ratio Ratio::from_percent(int percent) {
  if (percent < 0 || percent > 100) {
    throw ValidationError("ratio percent " + std::to_string(percent) + " outside [0, 100]");
  }
  return Ratio(percent);
}

Ratio Ratio::from_real(double r) {
  if (!(r >= 0.0 && r <= 1.0)) {
    throw ValidationError("ratio " + std::to_string(r) + " outside [0, 1]");
  }
  const double scaled = r * 100.0;
  const double rounded = std::round(scaled);
  if (std::fabs(scaled - rounded) > 1e-9) {
    throw ValidationError("ratio " + std::to_string(r) + " is not a whole percentage");
  }
  return Ratio(static_cast<int>(rounded));
}

RatioGrid::RatioGrid(std::vector<int> percents) {
  if (percents.empty() || percents.front() != 0 || percents.back() != 100) {
    throw ConfigError("ratio grid must start at 0% and end at 100%");
  }
  for (std::size_t i = 1; i < percents.size(); ++i) {
    if (percents[i] <= percents[i - 1]) {
      throw ConfigError("ratio grid must be strictly ascending");
    }
  }
  ratios_.reserve(percents.size());
  for (int p : percents) ratios_.push_back(Ratio::from_percent(p));
}

std::vector<int> RatioGrid::percents() const {
  std::vector<int> out;
  out.reserve(ratios_.size());
  for (Ratio r : ratios_) out.push_back(r.percent());
  return out;
}

std::vector<double> RatioGrid::values() const {
  std::vector<double> out;
  out.reserve(ratios_.size());
  for (Ratio r : ratios_) out.push_back(r.value());
  return out;
}

bool RatioGrid::contains(Ratio r) const { return std::binary_search(ratios_.begin(), ratios_.end(), r); }

RatioGrid grid_for(Dataset dataset) {
  const int step = dataset == Dataset::kMgsm ? 10 : 5;
  std::vector<int> percents;
  for (int p = 0; p <= 100; p += step) percents.push_back(p);
  return RatioGrid(std::move(percents));
}

int truncation_index(Ratio r, int total_steps) {
  if (total_steps < 0) throw ValidationError("negative step count");
  return static_cast<int>((static_cast<long long>(r.percent()) * total_steps) / 100);
}

int truncation_index(double r, int total_steps) { return truncation_index(Ratio::from_real(r), total_steps); }

std::string TruncatedTrace::text() const {
  std::string out;
  for (const Step& step : steps) {
    out += step.text;
    out += step.trailing_separator;
  }
  return out;
}

TruncatedTrace truncate(const ReasoningTrace& trace, Ratio r) {
  TruncatedTrace out;
  out.problem_id = trace.problem_id;
  out.language = trace.language;
  out.ratio = r;
  out.kept_steps = truncation_index(r, static_cast<int>(trace.steps.size()));
  out.steps.assign(trace.steps.begin(), trace.steps.begin() + out.kept_steps);
  return out;
}

}  // namespace latentprobe
