#include "latentprobe/answer_judge.hpp"

#include <algorithm>
#include <cmath>

#include "latentprobe/error.hpp"
#include "latentprobe/truncation.hpp"
#include "latentprobe/unicode.hpp"

namespace latentprobe {
namespace {

BigInt pow10(unsigned exponent) {
  BigInt out = 1;
  for (unsigned i = 0; i < exponent; ++i) out *= 10;
  return out;
}

BigInt abs_big(const BigInt& v) { return v < 0 ? BigInt(-v) : v; }

constexpr unsigned kToleranceScale = 12;

}  // namespace

CanonicalNumber CanonicalNumber::integer(BigInt value) {
  CanonicalNumber n;
  n.kind_ = NumberKind::kInteger;
  n.numerator_ = std::move(value);
  return n;
}

CanonicalNumber CanonicalNumber::decimal(BigInt scaled, unsigned scale) {
  while (scale > 0 && scaled % 10 == 0) {
    scaled /= 10;
    --scale;
  }
  if (scale == 0) return integer(std::move(scaled));
  CanonicalNumber n;
  n.kind_ = NumberKind::kDecimal;
  n.numerator_ = std::move(scaled);
  n.scale_ = scale;
  return n;
}

CanonicalNumber CanonicalNumber::fraction(BigInt numerator, BigInt denominator) {
  if (denominator == 0) throw ValidationError("fraction with zero denominator");
  if (denominator < 0) {
    numerator = -numerator;
    denominator = -denominator;
  }
  const BigInt g = boost::multiprecision::gcd(abs_big(numerator), denominator);
  if (g > 1) {
    numerator /= g;
    denominator /= g;
  }
  if (denominator == 1) return integer(std::move(numerator));
  CanonicalNumber n;
  n.kind_ = NumberKind::kRational;
  n.numerator_ = std::move(numerator);
  n.denominator_ = std::move(denominator);
  return n;
}

CanonicalNumber CanonicalNumber::divide(const CanonicalNumber& a, const CanonicalNumber& b) {
  return fraction(a.numerator() * b.effective_denominator(), a.effective_denominator() * b.numerator());
}

BigInt CanonicalNumber::effective_denominator() const { return denominator_ * pow10(scale_); }

std::string CanonicalNumber::render() const {
  switch (kind_) {
    case NumberKind::kInteger:
      return numerator_.str();
    case NumberKind::kRational:
      return numerator_.str() + "/" + denominator_.str();
    case NumberKind::kDecimal: {
      std::string digits = abs_big(numerator_).str();
      if (digits.size() <= scale_) digits.insert(0, scale_ + 1 - digits.size(), '0');
      digits.insert(digits.size() - scale_, 1, '.');
      return (numerator_ < 0 ? "-" : "") + digits;
    }
  }
  return {};
}

BigInt parse_decimal_integer(std::string_view digits) {
  const bool negative = !digits.empty() && digits.front() == '-';
  if (negative) digits.remove_prefix(1);
  if (digits.empty()) throw ValidationError("empty digit string");
  BigInt out = 0;
  for (char c : digits) {
    if (c < '0' || c > '9') throw ValidationError("not a decimal digit string: " + std::string(digits));
    out = out * 10 + (c - '0');
  }
  return negative ? BigInt(-out) : out;
}

bool answers_equal(const CanonicalNumber& a, const CanonicalNumber& b, const EqualityOptions& options) {
  const BigInt da = a.effective_denominator();
  const BigInt db = b.effective_denominator();
  const BigInt lhs = a.numerator() * db;
  const BigInt rhs = b.numerator() * da;
  if (lhs == rhs) return true;
  const bool fine_decimal = (a.kind() == NumberKind::kDecimal && a.scale() > kToleranceScale) ||
                            (b.kind() == NumberKind::kDecimal && b.scale() > kToleranceScale);
  if (options.absolute_tolerance <= 0.0 || !fine_decimal) return false;
  const long double diff = abs_big(lhs - rhs).convert_to<long double>() / (da * db).convert_to<long double>();
  return diff <= static_cast<long double>(options.absolute_tolerance);
}

namespace {

bool is_sign(char32_t cp) { return cp == U'-' || cp == U'+' || cp == U'−'; }

bool sign_may_attach_after(char32_t cp) {
  if (unicode::is_space(cp)) return true;
  switch (cp) {
    case U'(': case U'[': case U'{': case U'=': case U'$': case U':': case U'"':
    case U'\'': case U'<': case U'>': case U'~': case U'≈': case U'“':
    case U'（': case U'：': case U'＝':
      return true;
    default:
      return false;
  }
}

bool is_group_separator(char32_t cp) {
  return cp == U',' || cp == U' ' || cp == U' ' || cp == U' ' || cp == U'٬';
}

bool is_decimal_point(char32_t cp) { return cp == U'.' || cp == U'٫'; }

struct DigitRun {
  std::string ascii;
  std::size_t end = 0;
};

DigitRun read_digits(std::string_view text, std::size_t pos) {
  DigitRun run{{}, pos};
  while (run.end < text.size()) {
    const auto d = unicode::decode(text, run.end);
    const auto v = unicode::digit_value(d.cp);
    if (!v) break;
    run.ascii.push_back(static_cast<char>('0' + *v));
    run.end += d.length;
  }
  return run;
}

bool digit_at(std::string_view text, std::size_t pos) {
  return pos < text.size() && unicode::digit_value(unicode::decode(text, pos).cp).has_value();
}

}  // namespace

std::vector<NumberToken> lex_numbers(std::string_view text, const LexOptions& options) {
  std::vector<NumberToken> tokens;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto first = unicode::decode(text, pos);
    if (!unicode::digit_value(first.cp)) {
      pos += first.length;
      continue;
    }

    NumberToken tok;
    tok.digit_zero = unicode::digit_zero(first.cp);
    tok.begin = pos;
    bool negative = false;
    bool leading_dot = false;

    // Attached sign or leading dot, looking backwards from the first digit.
    if (pos > 0) {
      const std::size_t p1 = unicode::previous_start(text, pos);
      const char32_t c1 = unicode::decode(text, p1).cp;
      const auto before = [&](std::size_t at) -> std::optional<char32_t> {
        if (at == 0) return std::nullopt;
        return unicode::decode(text, unicode::previous_start(text, at)).cp;
      };
      if (options.leading_dot && c1 == U'.') {
        const auto c2 = before(p1);
        if (!c2 || !unicode::digit_value(*c2)) {
          leading_dot = true;
          tok.begin = p1;
          const auto c2_sign = c2 && is_sign(*c2);
          if (c2_sign) {
            const std::size_t p2 = unicode::previous_start(text, p1);
            const auto c3 = before(p2);
            if (!c3 || sign_may_attach_after(*c3)) {
              tok.begin = p2;
              tok.has_sign = true;
              negative = *c2 != U'+';
            }
          }
        }
      }
      if (!leading_dot && is_sign(c1)) {
        const auto c2 = before(p1);
        if (!c2 || sign_may_attach_after(*c2)) {
          tok.begin = p1;
          tok.has_sign = true;
          negative = c1 != U'+';
        }
      }
    }

    DigitRun integer_part = read_digits(text, pos);
    std::string digits = leading_dot ? std::string("0") : integer_part.ascii;
    std::size_t cursor = integer_part.end;
    tok.integer_digits = integer_part.ascii.size();

    if (leading_dot) {
      tok.decimals = static_cast<unsigned>(integer_part.ascii.size());
      tok.integer_digits = 0;
      digits += integer_part.ascii;
    } else {
      if (integer_part.ascii.size() <= 3) {
        while (cursor < text.size()) {
          const auto sep = unicode::decode(text, cursor);
          if (!is_group_separator(sep.cp) || (tok.has_grouping && sep.cp != tok.grouping)) break;
          DigitRun group = read_digits(text, cursor + sep.length);
          if (group.ascii.size() != 3) break;
          tok.has_grouping = true;
          tok.grouping = sep.cp;
          digits += group.ascii;
          tok.integer_digits += 3;
          cursor = group.end;
        }
      }
      if (cursor < text.size()) {
        const auto point = unicode::decode(text, cursor);
        if (is_decimal_point(point.cp) && digit_at(text, cursor + point.length)) {
          DigitRun fraction = read_digits(text, cursor + point.length);
          tok.decimals = static_cast<unsigned>(fraction.ascii.size());
          digits += fraction.ascii;
          cursor = fraction.end;
        }
      }
    }

    tok.end = cursor;
    BigInt magnitude = parse_decimal_integer(digits);
    if (negative) magnitude = -magnitude;
    tok.value = tok.decimals > 0 ? CanonicalNumber::decimal(magnitude, tok.decimals)
                                 : CanonicalNumber::integer(magnitude);
    std::string ascii = digits;
    if (tok.decimals > 0) ascii.insert(ascii.size() - tok.decimals, 1, '.');
    if (leading_dot) ascii.erase(0, 1);
    if (negative) ascii.insert(0, 1, '-');
    tok.ascii = std::move(ascii);
    tokens.push_back(std::move(tok));
    pos = cursor;
  }
  return tokens;
}

std::optional<std::string> extract_boxed(std::string_view text) {
  static constexpr std::string_view kBoxed = "\\boxed{";
  const std::size_t at = text.rfind(kBoxed);
  if (at == std::string_view::npos) return std::nullopt;
  const std::size_t open = at + kBoxed.size();
  int depth = 1;
  for (std::size_t i = open; i < text.size(); ++i) {
    if (text[i] == '\\' && i + 1 < text.size() && (text[i + 1] == '{' || text[i + 1] == '}')) {
      ++i;
      continue;
    }
    if (text[i] == '{') ++depth;
    if (text[i] == '}' && --depth == 0) return std::string(text.substr(open, i - open));
  }
  return std::nullopt;
}

namespace {

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
}

// Reads a balanced {...} group starting at `pos` (which must be '{').
std::optional<std::pair<std::string, std::size_t>> brace_group(std::string_view s, std::size_t pos) {
  while (pos < s.size() && s[pos] == ' ') ++pos;
  if (pos >= s.size() || s[pos] != '{') return std::nullopt;
  int depth = 0;
  for (std::size_t i = pos; i < s.size(); ++i) {
    if (s[i] == '{') ++depth;
    if (s[i] == '}' && --depth == 0) return std::make_pair(std::string(s.substr(pos + 1, i - pos - 1)), i + 1);
  }
  return std::nullopt;
}

struct Item {
  std::size_t begin;
  std::size_t end;
  CanonicalNumber value;
  bool has_sign;
};

// Trailing '-' of `stretch` (ignoring spaces) that can act as a unary minus.
bool ends_with_unary_minus(std::string_view stretch) {
  std::size_t i = stretch.size();
  while (i > 0 && stretch[i - 1] == ' ') --i;
  if (i == 0 || stretch[i - 1] != '-') return false;
  --i;
  while (i > 0 && stretch[i - 1] == ' ') --i;
  if (i == 0) return true;
  const char c = stretch[i - 1];
  return c == '(' || c == '{' || c == '[' || c == '=' || c == '$' || c == ':';
}

}  // namespace

std::optional<CanonicalNumber> normalize(std::string_view input) {
  std::string s(input);
  replace_all(s, "\\dfrac", "\\frac");
  replace_all(s, "\\tfrac", "\\frac");
  for (std::string_view noise : {"\\left", "\\right", "\\!", "\\,", "\\;", "\\:", "\\ ", "\\%", "\\$"}) {
    replace_all(s, noise, " ");
  }

  std::vector<Item> items;
  std::size_t stretch_begin = 0;
  const auto lex_stretch = [&](std::size_t begin, std::size_t end) {
    for (NumberToken& tok : lex_numbers(std::string_view(s).substr(begin, end - begin), {.leading_dot = true})) {
      items.push_back({begin + tok.begin, begin + tok.end, std::move(tok.value), tok.has_sign});
    }
  };

  std::size_t pos = 0;
  while ((pos = s.find("\\frac", pos)) != std::string::npos) {
    auto num = brace_group(s, pos + 5);
    if (!num) return std::nullopt;
    auto den = brace_group(s, num->second);
    if (!den) return std::nullopt;
    auto a = normalize(num->first);
    auto b = normalize(den->first);
    if (!a || !b || b->numerator() == 0) return std::nullopt;
    CanonicalNumber value = CanonicalNumber::divide(*a, *b);
    const std::string_view before = std::string_view(s).substr(stretch_begin, pos - stretch_begin);
    const bool negative = ends_with_unary_minus(before);
    std::size_t lex_end = pos;
    if (negative) {
      value = CanonicalNumber::fraction(-value.numerator(), value.effective_denominator());
      lex_end = s.rfind('-', pos);
    }
    lex_stretch(stretch_begin, lex_end);
    items.push_back({lex_end, den->second, std::move(value), negative});
    stretch_begin = den->second;
    pos = den->second;
  }
  lex_stretch(stretch_begin, s.size());
  std::sort(items.begin(), items.end(), [](const Item& x, const Item& y) { return x.begin < y.begin; });

  // "a/b" with plain numbers on both sides is one rational.
  std::vector<Item> merged;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i + 1 < items.size() && !items[i + 1].has_sign) {
      const std::string_view between = std::string_view(s).substr(items[i].end, items[i + 1].begin - items[i].end);
      const bool slash = std::count(between.begin(), between.end(), '/') == 1 &&
                         between.find_first_not_of(" /") == std::string_view::npos;
      if (slash && items[i + 1].value.numerator() != 0) {
        merged.push_back({items[i].begin, items[i + 1].end,
                          CanonicalNumber::divide(items[i].value, items[i + 1].value), items[i].has_sign});
        ++i;
        continue;
      }
    }
    merged.push_back(items[i]);
  }
  if (merged.size() != 1) return std::nullopt;
  return merged.front().value;
}

std::optional<std::string> extract_final_answer_line(std::string_view text) {
  static constexpr std::string_view kTag = "FINAL_ANSWER:";
  std::optional<std::string> found;
  std::size_t line_start = 0;
  while (line_start <= text.size()) {
    std::size_t line_end = text.find('\n', line_start);
    if (line_end == std::string_view::npos) line_end = text.size();
    std::string_view line = text.substr(line_start, line_end - line_start);
    const std::size_t first = line.find_first_not_of(" \t\r");
    if (first != std::string_view::npos && line.substr(first).starts_with(kTag)) {
      std::string_view rest = line.substr(first + kTag.size());
      const std::size_t b = rest.find_first_not_of(" \t");
      const std::size_t e = rest.find_last_not_of(" \t\r");
      found = b == std::string_view::npos ? std::string() : std::string(rest.substr(b, e - b + 1));
    }
    line_start = line_end + 1;
  }
  return found;
}

std::string_view to_string(JudgeFailure failure) {
  return failure == JudgeFailure::kNoBox ? "no_box" : "unparseable";
}

Judgment judge_boxed(std::string_view completion, const CanonicalNumber& gold, const EqualityOptions& options) {
  Judgment j;
  j.extracted = extract_boxed(completion);
  if (!j.extracted) {
    j.failure = JudgeFailure::kNoBox;
    return j;
  }
  j.canonical = normalize(*j.extracted);
  if (!j.canonical) {
    j.failure = JudgeFailure::kUnparseable;
    return j;
  }
  j.correct = answers_equal(*j.canonical, gold, options);
  return j;
}

bool gold_in_text(std::string_view text, const CanonicalNumber& gold, const EqualityOptions& options) {
  for (const NumberToken& tok : lex_numbers(text)) {
    if (answers_equal(tok.value, gold, options)) return true;
  }
  return false;
}

bool gold_in_prefix(const TruncatedTrace& truncated, const CanonicalNumber& gold, const EqualityOptions& options) {
  return gold_in_text(truncated.text(), gold, options);
}

}  // namespace latentprobe
