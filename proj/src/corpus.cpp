#include "latentprobe/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include "json.hpp"
#include "latentprobe/answer_judge.hpp"
#include "latentprobe/error.hpp"
#include "latentprobe/unicode.hpp"

namespace latentprobe {

using json = nlohmann::json;

std::string_view to_string(Dataset dataset) {
  switch (dataset) {
    case Dataset::kMgsm:
      return "mgsm";
    case Dataset::kAime:
      return "aime";
  }
  return "unknown";
}

Dataset parse_dataset(std::string_view name) {
  if (name == "mgsm" || name == "MGSM") return Dataset::kMgsm;
  if (name == "aime" || name == "AIME") return Dataset::kAime;
  throw ConfigError("unknown dataset '" + std::string(name) + "'");
}

std::string ReasoningTrace::reassemble() const {
  std::string out = leading_whitespace;
  for (const Step& step : steps) {
    out += step.text;
    out += step.trailing_separator;
  }
  return out;
}

namespace {

std::string require_string(const json& row, const char* key, std::size_t line) {
  auto it = row.find(key);
  if (it == row.end() || !it->is_string()) {
    throw ValidationError("line " + std::to_string(line) + ": missing string field '" + key + "'");
  }
  return it->get<std::string>();
}

template <typename Fn>
void for_each_json_line(std::istream& in, Fn&& fn) {
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    json row;
    try {
      row = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ValidationError("line " + std::to_string(number) + ": " + e.what());
    }
    if (!row.is_object()) {
      throw ValidationError("line " + std::to_string(number) + ": expected a JSON object");
    }
    fn(row, number);
  }
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  return in;
}

}  // namespace

std::vector<Problem> parse_problems(std::istream& in, Dataset dataset) {
  std::vector<Problem> problems;
  std::set<std::pair<std::string, std::string>> seen;
  for_each_json_line(in, [&](const json& row, std::size_t line) {
    Problem p;
    p.id = require_string(row, "id", line);
    p.dataset = parse_dataset(require_string(row, "dataset", line));
    if (p.dataset != dataset) {
      throw ValidationError("line " + std::to_string(line) + ": dataset '" +
                            std::string(to_string(p.dataset)) + "' does not match '" +
                            std::string(to_string(dataset)) + "'");
    }
    p.language = require_string(row, "language", line);
    p.text = require_string(row, "question", line);
    auto answer = row.find("answer");
    if (answer == row.end() || answer->is_null()) {
      throw ValidationError("line " + std::to_string(line) + ": missing gold answer for id '" + p.id + "'");
    }
    // Integer golds are sometimes written as JSON numbers.
    p.gold_answer = answer->is_string() ? answer->get<std::string>() : answer->dump();
    if (p.gold_answer.empty() || !normalize(p.gold_answer)) {
      throw ValidationError("line " + std::to_string(line) + ": gold answer '" + p.gold_answer +
                            "' is not a number");
    }
    if (!seen.emplace(p.language, p.id).second) {
      throw ValidationError("line " + std::to_string(line) + ": duplicate id '" + p.id +
                            "' for language '" + p.language + "'");
    }
    problems.push_back(std::move(p));
  });
  check_parallel_corpus(problems);
  return problems;
}

std::vector<Problem> load_problems(const std::filesystem::path& path, Dataset dataset) {
  auto in = open_input(path);
  try {
    return parse_problems(in, dataset);
  } catch (const Error& e) {
    throw Error(e.kind(), path.string() + ": " + e.what());
  }
}

void check_parallel_corpus(const std::vector<Problem>& problems) {
  std::map<std::string, std::set<std::string>> ids;
  for (const Problem& p : problems) ids[p.language].insert(p.id);
  if (ids.empty()) return;
  const auto& [first_lang, first_ids] = *ids.begin();
  for (const auto& [lang, lang_ids] : ids) {
    if (lang_ids != first_ids) {
      throw ValidationError("parallel corpus violated: ids for '" + lang + "' differ from '" +
                            first_lang + "'");
    }
  }
}

std::vector<TraceRecord> parse_trace_records(std::istream& in) {
  std::vector<TraceRecord> records;
  for_each_json_line(in, [&](const json& row, std::size_t line) {
    TraceRecord r;
    r.id = require_string(row, "id", line);
    r.language = require_string(row, "language", line);
    r.model = require_string(row, "model", line);
    r.output = require_string(row, "output", line);
    records.push_back(std::move(r));
  });
  return records;
}

std::vector<TraceRecord> load_trace_records(const std::filesystem::path& path) {
  auto in = open_input(path);
  return parse_trace_records(in);
}

void write_trace_records(std::ostream& out, const std::vector<TraceRecord>& records) {
  for (const TraceRecord& r : records) {
    json row = {{"id", r.id}, {"language", r.language}, {"model", r.model}, {"output", r.output}};
    out << row.dump() << '\n';
  }
}

namespace {

enum class Terminal { kNone, kSpaced, kImmediate };

Terminal classify_terminal(char32_t cp) {
  switch (cp) {
    case U'.':
    case U'!':
    case U'?':
    case U'।':  // danda
    case U'॥':  // double danda
      return Terminal::kSpaced;
    case U'。':  // 。
    case U'！':  // ！
    case U'？':  // ？
      return Terminal::kImmediate;
    default:
      return Terminal::kNone;
  }
}

bool is_closer(char32_t cp) {
  switch (cp) {
    case U'"': case U'\'': case U')': case U']': case U'}':
    case U'’': case U'”': case U'»': case U'」': case U'』':
    case U'）': case U'】':
      return true;
    default:
      return false;
  }
}

class Segmenter {
 public:
  Segmenter(std::string_view text, std::string_view language, const SegmentationOptions& options)
      : text_(text), thai_(language == "th"), options_(options) {}

  std::vector<Step> run() {
    std::size_t pos = skip_space(0);
    std::size_t start = pos;
    while (pos < text_.size()) {
      const auto [cp, len] = unicode::decode(text_, pos);
      if (unicode::is_space(cp)) {
        const std::size_t run_end = skip_space(pos);
        if (is_break_run(pos, run_end)) {
          emit(start, pos, run_end);
          start = run_end;
        }
        pos = run_end;
        continue;
      }
      const Terminal kind = classify_terminal(cp);
      if (kind == Terminal::kNone) {
        pos += len;
        continue;
      }
      if (cp == U'.' && (between_digits(pos) || ends_abbreviation(start, pos))) {
        pos += len;
        continue;
      }
      std::size_t end = absorb_terminators(pos + len);
      const bool at_end = end == text_.size();
      const bool spaced = at_end || unicode::is_space(unicode::decode(text_, end).cp);
      if (kind == Terminal::kImmediate || spaced) {
        const std::size_t next = skip_space(end);
        emit(start, end, next);
        start = next;
      }
      pos = end;
    }
    if (start < text_.size()) {
      std::size_t content_end = text_.size();
      while (content_end > start) {
        const std::size_t prev = unicode::previous_start(text_, content_end);
        if (!unicode::is_space(unicode::decode(text_, prev).cp)) break;
        content_end = prev;
      }
      emit(start, content_end, text_.size());
    }
    return std::move(steps_);
  }

 private:
  std::size_t skip_space(std::size_t pos) const {
    while (pos < text_.size()) {
      const auto d = unicode::decode(text_, pos);
      if (!unicode::is_space(d.cp)) break;
      pos += d.length;
    }
    return pos;
  }

  bool is_break_run(std::size_t begin, std::size_t end) const {
    const auto newlines = std::count(text_.begin() + begin, text_.begin() + end, '\n');
    return newlines >= 2 || (thai_ && newlines >= 1);
  }

  bool between_digits(std::size_t pos) const {
    if (pos == 0 || pos + 1 >= text_.size()) return false;
    const char32_t before = unicode::decode(text_, unicode::previous_start(text_, pos)).cp;
    const char32_t after = unicode::decode(text_, pos + 1).cp;
    return unicode::digit_value(before).has_value() && unicode::digit_value(after).has_value();
  }

  bool ends_abbreviation(std::size_t sentence_start, std::size_t pos) const {
    if (options_.abbreviations.empty()) return false;
    std::size_t word_start = pos;
    while (word_start > sentence_start) {
      const std::size_t prev = unicode::previous_start(text_, word_start);
      if (unicode::is_space(unicode::decode(text_, prev).cp)) break;
      word_start = prev;
    }
    const std::string_view word = text_.substr(word_start, pos - word_start);
    return std::find(options_.abbreviations.begin(), options_.abbreviations.end(), word) !=
           options_.abbreviations.end();
  }

  std::size_t absorb_terminators(std::size_t pos) const {
    while (pos < text_.size()) {
      const auto d = unicode::decode(text_, pos);
      if (classify_terminal(d.cp) == Terminal::kNone && !is_closer(d.cp)) break;
      pos += d.length;
    }
    return pos;
  }

  void emit(std::size_t start, std::size_t content_end, std::size_t separator_end) {
    if (content_end <= start) return;
    Step step;
    step.index = static_cast<int>(steps_.size()) + 1;
    step.text = std::string(text_.substr(start, content_end - start));
    step.trailing_separator = std::string(text_.substr(content_end, separator_end - content_end));
    steps_.push_back(std::move(step));
  }

  std::string_view text_;
  bool thai_;
  const SegmentationOptions& options_;
  std::vector<Step> steps_;
};

}  // namespace

std::vector<Step> segment_steps(std::string_view raw_text, std::string_view language,
                                const SegmentationOptions& options) {
  return Segmenter(raw_text, language, options).run();
}

ReasoningTrace extract_trace(std::string_view model_output, std::string_view language,
                             const ThinkMarkers& markers, const SegmentationOptions& options) {
  if (markers.open.empty() || markers.close.empty()) {
    throw ConfigError("thinking markers must be non-empty");
  }
  const std::size_t open = model_output.find(markers.open);
  if (open == std::string_view::npos) {
    throw ValidationError("no reasoning trace: open marker '" + markers.open + "' not found");
  }
  const std::size_t content = open + markers.open.size();
  const std::size_t close = model_output.find(markers.close, content);

  ReasoningTrace trace;
  trace.language = std::string(language);
  trace.close_marker_missing = close == std::string_view::npos;
  trace.raw_text = std::string(
      model_output.substr(content, trace.close_marker_missing ? std::string_view::npos : close - content));

  std::size_t lead = 0;
  while (lead < trace.raw_text.size()) {
    const auto d = unicode::decode(trace.raw_text, lead);
    if (!unicode::is_space(d.cp)) break;
    lead += d.length;
  }
  trace.leading_whitespace = trace.raw_text.substr(0, lead);
  trace.steps = segment_steps(trace.raw_text, language, options);
  return trace;
}

StepStats trace_statistics(const std::vector<ReasoningTrace>& traces, Dataset dataset) {
  if (traces.empty()) throw ValidationError("trace_statistics: no traces");
  StepStats stats;
  stats.dataset = dataset;
  stats.language = traces.front().language;
  std::vector<std::size_t> counts;
  counts.reserve(traces.size());
  for (const ReasoningTrace& t : traces) {
    if (t.language != stats.language) {
      throw ValidationError("trace_statistics: mixed languages '" + stats.language + "' and '" +
                            t.language + "'");
    }
    counts.push_back(t.steps.size());
  }
  std::sort(counts.begin(), counts.end());
  double total = 0.0;
  for (std::size_t c : counts) total += static_cast<double>(c);
  stats.count = counts.size();
  stats.mean_steps = total / static_cast<double>(counts.size());
  const std::size_t mid = counts.size() / 2;
  stats.median_steps = counts.size() % 2 == 1
                           ? static_cast<double>(counts[mid])
                           : (static_cast<double>(counts[mid - 1]) + static_cast<double>(counts[mid])) / 2.0;
  return stats;
}

}  // namespace latentprobe
