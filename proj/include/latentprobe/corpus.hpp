#pragma once

#include <filesystem>
#include <istream>
#include <string>
#include <string_view>
#include <vector>

namespace latentprobe {

enum class Dataset { kMgsm, kAime };

std::string_view to_string(Dataset dataset);
Dataset parse_dataset(std::string_view name);

// Two-letter lowercase ISO 639-1 code, e.g. "en", "bn".
using LanguageCode = std::string;

struct Problem {
  std::string id;
  Dataset dataset = Dataset::kMgsm;
  LanguageCode language;
  std::string text;
  std::string gold_answer;
};

struct Step {
  int index = 0;  // 1-based
  std::string text;
  std::string trailing_separator;
};

struct ReasoningTrace {
  std::string problem_id;
  LanguageCode language;
  std::string raw_text;
  // Whitespace before the first step; kept so the trace reassembles exactly.
  std::string leading_whitespace;
  std::vector<Step> steps;
  bool close_marker_missing = false;

  std::size_t size() const { return steps.size(); }
  // leading_whitespace + every step with its separator; equals raw_text.
  std::string reassemble() const;
};

struct ThinkMarkers {
  std::string open = "<think>";
  std::string close = "</think>";
};

struct SegmentationOptions {
  // Words whose trailing period never ends a sentence ("Dr", "e.g").
  std::vector<std::string> abbreviations;
};

struct StepStats {
  Dataset dataset = Dataset::kMgsm;
  LanguageCode language;
  double mean_steps = 0.0;
  double median_steps = 0.0;
  std::size_t count = 0;
};

// One line of a traces file.
struct TraceRecord {
  std::string id;
  LanguageCode language;
  std::string model;
  std::string output;
};

// Parses a problems JSONL stream. Every row must belong to `dataset`.
// Throws ValidationError with the 1-based line number on malformed rows,
// duplicate ids within a language, missing or non-numeric gold answers, and
// id sets that differ between languages.
std::vector<Problem> parse_problems(std::istream& in, Dataset dataset);
std::vector<Problem> load_problems(const std::filesystem::path& path, Dataset dataset);

// Throws unless every language present carries the same id set.
void check_parallel_corpus(const std::vector<Problem>& problems);

std::vector<TraceRecord> parse_trace_records(std::istream& in);
std::vector<TraceRecord> load_trace_records(const std::filesystem::path& path);
void write_trace_records(std::ostream& out, const std::vector<TraceRecord>& records);

// Sentence-level segmentation used as the reasoning-step unit.
//
// Boundaries fall after ".", "!", "?", "।", "॥" when followed by whitespace
// or end of text, after "。", "！", "？" unconditionally, and at blank lines.
// Closing quotes and brackets directly after a terminator stay with the
// sentence. A period between two digits or ending a configured abbreviation
// is not a boundary. Thai additionally breaks at every newline.
std::vector<Step> segment_steps(std::string_view raw_text, std::string_view language,
                                const SegmentationOptions& options = {});

// Content strictly between the first open marker and the first close marker
// after it. A missing close marker keeps the rest of the output and sets
// close_marker_missing. Throws ValidationError when the open marker is absent.
ReasoningTrace extract_trace(std::string_view model_output, std::string_view language,
                             const ThinkMarkers& markers = {},
                             const SegmentationOptions& options = {});

StepStats trace_statistics(const std::vector<ReasoningTrace>& traces, Dataset dataset);

}  // namespace latentprobe
