#include "latentprobe/perturbation.hpp"

#include <algorithm>
#include <random>

#include "json.hpp"
#include "latentprobe/unicode.hpp"

namespace latentprobe {

std::string_view to_string(SpanExclusion exclusion) {
  switch (exclusion) {
    case SpanExclusion::kYear:
      return "year";
    case SpanExclusion::kOrdinal:
      return "ordinal";
    case SpanExclusion::kFraction:
      return "fraction";
    case SpanExclusion::kEmbedded:
      return "embedded";
  }
  return "unknown";
}

std::string_view to_string(EditType type) { return type == EditType::kNumEdit ? "numedit" : "paraphrase"; }

EditType parse_edit_type(std::string_view name) {
  if (name == "numedit") return EditType::kNumEdit;
  if (name == "paraphrase") return EditType::kParaphrase;
  throw ValidationError("unknown edit type '" + std::string(name) + "'");
}

std::string_view to_string(Setup setup) { return setup == Setup::kWithoutTrace ? "w/o trace" : "w/ trace"; }

namespace {

std::optional<char32_t> char_before(std::string_view text, std::size_t pos) {
  if (pos == 0) return std::nullopt;
  return unicode::decode(text, unicode::previous_start(text, pos)).cp;
}

std::optional<char32_t> char_at(std::string_view text, std::size_t pos) {
  if (pos >= text.size()) return std::nullopt;
  return unicode::decode(text, pos).cp;
}

bool word_char(std::optional<char32_t> cp) { return cp && (unicode::is_ascii_letter(*cp) || *cp == U'_'); }

char lower(char c) { return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c; }

bool ordinal_suffix(std::string_view text, std::size_t end) {
  if (end + 2 > text.size()) return false;
  const std::string suffix{lower(text[end]), lower(text[end + 1])};
  if (suffix != "st" && suffix != "nd" && suffix != "rd" && suffix != "th") return false;
  return !word_char(char_at(text, end + 2));
}

bool frac_argument(std::string_view text, const NumberToken& tok) {
  if (tok.begin == 0 || text[tok.begin - 1] != '{' || tok.end >= text.size() || text[tok.end] != '}') {
    return false;
  }
  const std::string_view before = text.substr(0, tok.begin - 1);
  return before.ends_with("\\frac") || before.ends_with("\\dfrac") || before.ends_with("\\tfrac") ||
         before.ends_with("}");
}

std::optional<SpanExclusion> classify(std::string_view text, const NumberToken& tok) {
  const bool plain_integer = !tok.has_sign && !tok.has_grouping && tok.decimals == 0;
  if (plain_integer && tok.ascii.size() == 4 && (tok.ascii.starts_with("19") || tok.ascii.starts_with("20"))) {
    return SpanExclusion::kYear;
  }
  if (tok.decimals == 0 && ordinal_suffix(text, tok.end)) return SpanExclusion::kOrdinal;
  const auto before = char_before(text, tok.begin);
  const auto after = char_at(text, tok.end);
  if ((before && (*before == U'/' || *before == U'⁄')) || (after && (*after == U'/' || *after == U'⁄')) ||
      frac_argument(text, tok)) {
    return SpanExclusion::kFraction;
  }
  if (word_char(before) || word_char(after)) return SpanExclusion::kEmbedded;
  return std::nullopt;
}

BigInt pow10(unsigned exponent) {
  BigInt out = 1;
  for (unsigned i = 0; i < exponent; ++i) out *= 10;
  return out;
}

std::string render_literal(const NumericSpan& span, const BigInt& scaled, unsigned scale) {
  const NumberToken& tok = span.token;
  const bool negative = scaled < 0;
  std::string digits = (negative ? BigInt(-scaled) : scaled).str();
  if (digits.size() <= scale) digits.insert(0, scale + 1 - digits.size(), '0');
  std::string integer_part = digits.substr(0, digits.size() - scale);
  const std::string fraction_part = digits.substr(digits.size() - scale);

  const auto script = [&](char ascii_digit) { return unicode::encode(tok.digit_zero + (ascii_digit - '0')); };
  // Keep the original sign character ('-', '+' or U+2212).
  const auto first = unicode::decode(span.literal, 0);
  std::string out;
  if (negative) {
    out += (tok.has_sign && first.cp != U'+') ? span.literal.substr(0, first.length) : std::string("-");
  } else if (tok.has_sign && first.cp == U'+') {
    out += "+";
  }
  for (std::size_t i = 0; i < integer_part.size(); ++i) {
    const std::size_t remaining = integer_part.size() - i;
    if (tok.has_grouping && i > 0 && remaining % 3 == 0) out += unicode::encode(tok.grouping);
    out += script(integer_part[i]);
  }
  if (scale > 0) {
    out += span.literal.find("٫") != std::string::npos ? "٫" : ".";
    for (char c : fraction_part) out += script(c);
  }
  return out;
}

}  // namespace

std::vector<NumericSpan> detect_numeric_spans(std::string_view text) {
  std::vector<NumericSpan> spans;
  for (NumberToken& tok : lex_numbers(text)) {
    NumericSpan span;
    span.start = tok.begin;
    span.end = tok.end;
    span.literal = std::string(text.substr(tok.begin, tok.end - tok.begin));
    span.value = tok.value;
    span.excluded = classify(text, tok);
    span.native_script = tok.digit_zero != U'0';
    span.token = std::move(tok);
    spans.push_back(std::move(span));
  }
  return spans;
}

std::optional<EditedProblem> num_edit(const Problem& problem, std::uint64_t seed) {
  std::vector<NumericSpan> editable;
  for (NumericSpan& span : detect_numeric_spans(problem.text)) {
    if (!span.excluded) editable.push_back(std::move(span));
  }
  if (editable.empty()) return std::nullopt;

  std::mt19937_64 rng(seed);
  const NumericSpan& span = editable[rng() % editable.size()];
  const NumberToken& tok = span.token;

  // Original value as an integer scaled by 10^decimals.
  std::string signed_digits = tok.ascii;
  signed_digits.erase(std::remove(signed_digits.begin(), signed_digits.end(), '.'), signed_digits.end());
  const BigInt original = parse_decimal_integer(signed_digits);

  BigInt edited;
  unsigned scale = tok.decimals;
  if (tok.decimals == 0) {
    const bool small = original >= 0 && original <= 2;
    edited = original + (small ? 1 : 1 + static_cast<int>(rng() % 2));
  } else {
    const BigInt magnitude = original < 0 ? BigInt(-original) : original;
    const BigInt one = pow10(tok.decimals);
    // Delta in tenths.
    const int tenths = magnitude < one ? 1 : (magnitude < one * 10 ? 5 : 10);
    edited = original + BigInt(tenths) * pow10(tok.decimals - 1);
  }

  EditedProblem out;
  out.original_id = problem.id;
  out.language = problem.language;
  out.edit_type = EditType::kNumEdit;
  out.seed = seed;
  out.native_script = span.native_script;
  const std::string replacement = render_literal(span, edited, scale);
  out.text = problem.text.substr(0, span.start) + replacement + problem.text.substr(span.end);
  out.edited_span = EditedSpan{span.start, span.literal, replacement};
  out.numeric_multiset_preserved = false;
  return out;
}

std::vector<std::string> math_segments(std::string_view text) {
  std::vector<std::string> segments;
  const auto is_space_at = [&](std::size_t pos) {
    return pos < text.size() && unicode::is_space(unicode::decode(text, pos).cp);
  };
  const auto escaped = [&](std::size_t pos) { return pos > 0 && text[pos - 1] == '\\'; };
  std::size_t pos = 0;
  while (pos < text.size()) {
    if (text[pos] != '$' || escaped(pos)) {
      ++pos;
      continue;
    }
    const std::size_t delim = (pos + 1 < text.size() && text[pos + 1] == '$') ? 2 : 1;
    const std::size_t body = pos + delim;
    if (body >= text.size() || is_space_at(body)) {
      pos = body;
      continue;
    }
    std::size_t close = std::string_view::npos;
    for (std::size_t i = body; i + delim <= text.size(); ++i) {
      if (text[i] != '$' || escaped(i)) continue;
      if (delim == 2 && (i + 1 >= text.size() || text[i + 1] != '$')) continue;
      const bool closer = !unicode::is_space(unicode::decode(text, unicode::previous_start(text, i)).cp) &&
                          !(i + delim < text.size() && unicode::digit_value(unicode::decode(text, i + delim).cp));
      if (closer && i > body) {
        close = i;
        break;
      }
    }
    if (close == std::string_view::npos) {
      pos = body;
      continue;
    }
    segments.emplace_back(text.substr(pos, close + delim - pos));
    pos = close + delim;
  }
  return segments;
}

namespace {

std::vector<std::string> numeric_multiset(std::string_view text) {
  std::vector<std::string> values;
  for (const NumberToken& tok : lex_numbers(text)) values.push_back(tok.value.render());
  std::sort(values.begin(), values.end());
  return values;
}

}  // namespace

ParaphraseCheck validate_paraphrase(const Problem& original, std::string_view paraphrase_text) {
  ParaphraseCheck check;
  if (numeric_multiset(original.text) != numeric_multiset(paraphrase_text)) {
    check.valid = false;
    check.reasons.push_back("numeric multiset mismatch");
  }
  for (const std::string& segment : math_segments(original.text)) {
    if (paraphrase_text.find(segment) == std::string_view::npos) {
      check.valid = false;
      check.reasons.push_back("math segment changed: " + segment);
    }
  }
  return check;
}

std::string build_paraphrase_prompt(const Problem& problem, std::string_view language_name) {
  std::string prompt =
      "You are rewriting a math problem.\n"
      "\n"
      "Language constraint (MUST follow):\n"
      "- The paraphrase MUST be written in the SAME language as the original question.\n"
      "- The original question language is: ";
  prompt += language_name;
  prompt +=
      ". Do NOT translate to any other language.\n"
      "\n"
      "Hard constraints:\n"
      "1) Preserve ALL numbers exactly (character-for-character).\n"
      "2) Preserve ALL LaTeX math exactly as-is (anything inside $...$ must appear unchanged).\n"
      "3) Keep the question asking for the same final quantity; the problem must be logically equivalent.\n"
      "4) Reduce lexical overlap by paraphrasing and reordering sentences outside math mode.\n"
      "5) Do NOT include any solution steps, explanations, or the final answer.\n"
      "6) Do NOT add or remove any facts, entities, units, or constraints.\n"
      "\n"
      "Return ONLY valid JSON with exactly these keys:\n"
      "{\"paraphrase\": \"...\", \"changes\": \"...\"}\n"
      "\n"
      "Original problem:\n";
  prompt += problem.text;
  prompt += "\n";
  return prompt;
}

std::string build_solvability_prompt(std::string_view question, std::string_view language_name) {
  std::string prompt =
      "You are given a grade-school math word problem.\n"
      "\n"
      "Language constraint:\n"
      "- Write your solution in the SAME language as the problem.\n"
      "- The problem language is: ";
  prompt += language_name;
  prompt +=
      ". Do not translate.\n"
      "\n"
      "You may write intermediate steps.\n"
      "Hard requirement:\n"
      "- End your response with a SINGLE final line in the following exact format:\n"
      "  FINAL_ANSWER: <answer>\n"
      "\n"
      "Rules for <answer>:\n"
      "- Provide only the final numeric value (or a simplified number).\n"
      "- Do not wrap it in LaTeX, do not add units, and do not add extra words.\n"
      "- Do not output anything after the FINAL_ANSWER line.\n"
      "\n"
      "Problem:\n";
  prompt += question;
  prompt += "\n";
  return prompt;
}

std::optional<ParaphraseResponse> parse_paraphrase_response(std::string_view completion) {
  const std::size_t open = completion.find('{');
  const std::size_t close = completion.rfind('}');
  if (open == std::string_view::npos || close == std::string_view::npos || close < open) return std::nullopt;
  try {
    const auto doc = nlohmann::json::parse(completion.substr(open, close - open + 1));
    const auto it = doc.find("paraphrase");
    if (it == doc.end() || !it->is_string()) return std::nullopt;
    ParaphraseResponse out;
    out.paraphrase = it->get<std::string>();
    if (auto c = doc.find("changes"); c != doc.end()) out.changes = c->is_string() ? c->get<std::string>() : c->dump();
    return out;
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
}

namespace {

std::string join_reasons(const std::vector<std::string>& reasons) {
  std::string out;
  for (const std::string& r : reasons) out += (out.empty() ? "" : "; ") + r;
  return out;
}

}  // namespace

ParaphraseExhausted::ParaphraseExhausted(const std::string& problem_id, std::vector<std::string> reasons)
    : Error(ErrorKind::kValidation,
            "paraphrase for '" + problem_id + "' rejected on every attempt: " + join_reasons(reasons)),
      reasons_(std::move(reasons)) {}

EditedProblem request_paraphrase(const Problem& problem, std::string_view language_name, InferenceGateway& editor,
                                 SamplingConfig editor_config, int max_retries) {
  if (max_retries < 0) throw ConfigError("max_retries must be >= 0");
  const std::string prompt = build_paraphrase_prompt(problem, language_name);
  const std::int64_t base_seed = editor_config.seed;
  editor_config.n_samples = 1;
  std::vector<std::string> reasons;
  for (int attempt = 0; attempt <= max_retries; ++attempt) {
    editor_config.seed = base_seed + attempt;
    const auto completions = editor.generate_text(prompt, editor_config);
    const std::string prefix = "attempt " + std::to_string(attempt + 1) + ": ";
    const auto response = parse_paraphrase_response(completions.front().text);
    if (!response) {
      reasons.push_back(prefix + "editor reply is not valid JSON with a paraphrase");
      continue;
    }
    const ParaphraseCheck check = validate_paraphrase(problem, response->paraphrase);
    if (!check.valid) {
      for (const std::string& r : check.reasons) reasons.push_back(prefix + r);
      continue;
    }
    EditedProblem out;
    out.original_id = problem.id;
    out.language = problem.language;
    out.edit_type = EditType::kParaphrase;
    out.text = response->paraphrase;
    out.numeric_multiset_preserved = true;
    out.seed = static_cast<std::uint64_t>(editor_config.seed);
    out.changes = response->changes;
    out.editor_calls = attempt + 1;
    return out;
  }
  throw ParaphraseExhausted(problem.id, std::move(reasons));
}

std::set<std::string> memorization_selection(std::span<const EvalRecord> records_at_zero, int k) {
  std::set<std::string> ids;
  for (const EvalRecord& r : records_at_zero) {
    if (r.ratio.percent() != 0) throw ValidationError("memorization selection needs ratio-0 records");
    if (solved_at_k(r, k)) ids.insert(r.problem_id);
  }
  return ids;
}

std::vector<MemorizationRow> memorization_eval(const MemorizationInputs& inputs) {
  std::vector<MemorizationRow> rows;
  for (EditType edit : {EditType::kNumEdit, EditType::kParaphrase}) {
    for (Setup setup : {Setup::kWithoutTrace, Setup::kWithTrace}) {
      MemorizationRow row{edit, inputs.model, setup, inputs.language, inputs.selection.size(), std::nullopt};
      if (!inputs.selection.empty()) {
        const auto cell = inputs.matches.find({edit, setup});
        std::size_t hits = 0;
        for (const std::string& id : inputs.selection) {
          const std::vector<bool>* flags = nullptr;
          if (cell != inputs.matches.end()) {
            if (auto it = cell->second.find(id); it != cell->second.end()) flags = &it->second;
          }
          if (!flags) {
            throw ValidationError("no " + std::string(to_string(edit)) + " / " + std::string(to_string(setup)) +
                                  " predictions for selected problem '" + id + "'");
          }
          EvalRecord probe{id, inputs.language, Ratio(), *flags, false};
          hits += solved_at_k(probe, std::min<int>(inputs.k, static_cast<int>(flags->size()))) ? 1 : 0;
        }
        row.value = static_cast<double>(hits) / static_cast<double>(inputs.selection.size());
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

SolvabilityMetrics solvability_eval(std::span<const SolvabilityItem> items) {
  SolvabilityMetrics m;
  m.n = items.size();
  if (items.empty()) return m;
  const auto parse = [](const std::string& output) -> std::optional<CanonicalNumber> {
    const auto line = extract_final_answer_line(output);
    if (!line) return std::nullopt;
    return normalize(*line);
  };
  std::size_t correct = 0, numedit_same = 0, paraphrase_same = 0;
  for (const SolvabilityItem& item : items) {
    const auto original = parse(item.original_output);
    const auto numedit = parse(item.numedit_output);
    const auto paraphrase = parse(item.paraphrase_output);
    if (original && answers_equal(*original, item.gold)) ++correct;
    if (original && numedit && answers_equal(*original, *numedit)) ++numedit_same;
    if (original && paraphrase && answers_equal(*original, *paraphrase)) ++paraphrase_same;
  }
  const double n = static_cast<double>(items.size());
  m.orig_acc = correct / n;
  m.numedit_match = numedit_same / n;
  m.paraphrase_match = paraphrase_same / n;
  return m;
}

}  // namespace latentprobe
