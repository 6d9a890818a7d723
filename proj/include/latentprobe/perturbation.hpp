#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "latentprobe/answer_judge.hpp"
#include "latentprobe/corpus.hpp"
#include "latentprobe/error.hpp"
#include "latentprobe/inference_gateway.hpp"
#include "latentprobe/metrics.hpp"

namespace latentprobe {

enum class SpanExclusion { kYear, kOrdinal, kFraction, kEmbedded };

std::string_view to_string(SpanExclusion exclusion);

struct NumericSpan {
  std::size_t start = 0;  // byte offsets into the question
  std::size_t end = 0;
  std::string literal;
  CanonicalNumber value;
  std::optional<SpanExclusion> excluded;
  bool native_script = false;  // digits outside ASCII
  NumberToken token;
};

// Standalone numbers (optional sign and decimal part) in any handled script.
// Years (19xx/20xx), ordinals (2nd), parts of fractions (1/2, \frac{1}{2})
// and digits glued to ASCII letters are reported but marked excluded.
std::vector<NumericSpan> detect_numeric_spans(std::string_view text);

enum class EditType { kNumEdit, kParaphrase };

std::string_view to_string(EditType type);
EditType parse_edit_type(std::string_view name);

struct EditedSpan {
  std::size_t offset = 0;
  std::string original;
  std::string replacement;
};

struct EditedProblem {
  std::string original_id;
  LanguageCode language;
  EditType edit_type = EditType::kNumEdit;
  std::string text;
  std::optional<EditedSpan> edited_span;
  bool numeric_multiset_preserved = false;
  std::optional<std::uint64_t> seed;
  bool native_script = false;
  std::string changes;  // editor's own change notes (paraphrase)
  int editor_calls = 0;
};

// Changes exactly one editable span chosen uniformly with `seed`: integers
// 0, 1, 2 get +1, other integers +1 or +2 (seeded), decimals +0.1 when
// |x| < 1, +0.5 when |x| < 10, +1.0 otherwise. The new literal keeps the
// original digit script, grouping and sign style; every other byte is
// unchanged. nullopt when no span is editable.
std::optional<EditedProblem> num_edit(const Problem& problem, std::uint64_t seed);

struct ParaphraseCheck {
  bool valid = true;
  std::vector<std::string> reasons;
};

// "$...$" segments (pandoc rules: opener not followed by space, closer not
// preceded by space nor followed by a digit), delimiters included.
std::vector<std::string> math_segments(std::string_view text);

ParaphraseCheck validate_paraphrase(const Problem& original, std::string_view paraphrase_text);

std::string build_paraphrase_prompt(const Problem& problem, std::string_view language_name);
std::string build_solvability_prompt(std::string_view question, std::string_view language_name);

struct ParaphraseResponse {
  std::string paraphrase;
  std::string changes;
};

// Accepts bare JSON or JSON inside a ``` fence; nullopt when no object with
// a string "paraphrase" key can be read.
std::optional<ParaphraseResponse> parse_paraphrase_response(std::string_view completion);

class ParaphraseExhausted : public Error {
 public:
  ParaphraseExhausted(const std::string& problem_id, std::vector<std::string> reasons);
  const std::vector<std::string>& reasons() const { return reasons_; }

 private:
  std::vector<std::string> reasons_;
};

// Asks the editor for a paraphrase until one validates. Attempt i (0-based)
// samples with seed + i, so replayed fixtures can script rejections. At most
// 1 + max_retries editor calls.
EditedProblem request_paraphrase(const Problem& problem, std::string_view language_name, InferenceGateway& editor,
                                 SamplingConfig editor_config, int max_retries = 5);

enum class Setup { kWithoutTrace, kWithTrace };

std::string_view to_string(Setup setup);

// Problems solved under pass@k at ratio 0 (records for one language).
std::set<std::string> memorization_selection(std::span<const EvalRecord> records_at_zero, int k);

struct MemorizationRow {
  EditType edit_type = EditType::kNumEdit;
  std::string model;
  Setup setup = Setup::kWithoutTrace;
  LanguageCode language;
  std::size_t n = 0;
  std::optional<double> value;  // nullopt when n == 0
};

struct MemorizationInputs {
  std::string model;
  LanguageCode language;
  std::set<std::string> selection;
  int k = 10;
  // Per (edit, setup): problem id -> per-sample "prediction equals the
  // original gold answer" flags.
  std::map<std::pair<EditType, Setup>, std::map<std::string, std::vector<bool>>> matches;
};

// Four rows (NumEdit/Paraphrase x w/o/w trace). NumEdit reports the share of
// selected problems still answered with the original gold within k samples;
// Paraphrase reports pass@k accuracy against the unchanged gold.
std::vector<MemorizationRow> memorization_eval(const MemorizationInputs& inputs);

struct SolvabilityItem {
  std::string problem_id;
  CanonicalNumber gold;
  std::string original_output;
  std::string numedit_output;
  std::string paraphrase_output;
};

struct SolvabilityMetrics {
  std::optional<double> orig_acc;
  std::optional<double> numedit_match;
  std::optional<double> paraphrase_match;
  std::size_t n = 0;
};

SolvabilityMetrics solvability_eval(std::span<const SolvabilityItem> items);

}  // namespace latentprobe
