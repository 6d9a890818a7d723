#pragma once

#include <boost/multiprecision/cpp_int.hpp>

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace latentprobe {

struct TruncatedTrace;

using BigInt = boost::multiprecision::cpp_int;

// Base-10 digits with an optional leading '-'. (cpp_int's own string
// constructor reads a leading 0 as an octal prefix.)
BigInt parse_decimal_integer(std::string_view digits);

enum class NumberKind { kInteger, kRational, kDecimal };

// Exact number in canonical form.
//
//   integer:  numerator / 1, scale 0
//   rational: numerator / denominator in lowest terms, denominator > 1
//   decimal:  numerator / 10^scale with scale > 0 and no trailing zero digit
//
// Construction goes through the factories, so two numbers written the same
// way compare equal structurally. Mathematical equality across kinds is
// answers_equal().
class CanonicalNumber {
 public:
  static CanonicalNumber integer(BigInt value);
  static CanonicalNumber decimal(BigInt scaled, unsigned scale);
  static CanonicalNumber fraction(BigInt numerator, BigInt denominator);
  // Exact quotient of two numbers (denominator must be non-zero).
  static CanonicalNumber divide(const CanonicalNumber& a, const CanonicalNumber& b);

  NumberKind kind() const { return kind_; }
  const BigInt& numerator() const { return numerator_; }
  const BigInt& denominator() const { return denominator_; }
  unsigned scale() const { return scale_; }

  // numerator / effective_denominator is the value.
  BigInt effective_denominator() const;

  // "3000", "-0.05", "1/2".
  std::string render() const;

  bool operator==(const CanonicalNumber&) const = default;

 private:
  NumberKind kind_ = NumberKind::kInteger;
  BigInt numerator_ = 0;
  BigInt denominator_ = 1;
  unsigned scale_ = 0;
};

struct EqualityOptions {
  // Applied only when either side is a decimal with more than 12 digits after
  // the point. Zero means exact comparison everywhere.
  double absolute_tolerance = 0.0;
};

bool answers_equal(const CanonicalNumber& a, const CanonicalNumber& b,
                   const EqualityOptions& options = {});

// A maximal numeric token: digit run in any handled script with an attached
// sign, thousands separators (when the grouping is consistent) and decimal
// part. Offsets are byte offsets into the scanned text.
struct NumberToken {
  std::size_t begin = 0;
  std::size_t end = 0;
  CanonicalNumber value;
  std::string ascii;           // sign, digits and '.', separators removed
  char32_t digit_zero = U'0';  // script of the first digit
  bool has_sign = false;
  bool has_grouping = false;
  char32_t grouping = 0;       // separator code point when has_grouping
  unsigned decimals = 0;       // digits after the decimal point as written
  std::size_t integer_digits = 0;
};

struct LexOptions {
  // Treat ".5" as 0.5 when the dot is not preceded by a digit.
  bool leading_dot = false;
};

std::vector<NumberToken> lex_numbers(std::string_view text, const LexOptions& options = {});

// Contents of the last \boxed{...} with balanced braces, or nullopt.
std::optional<std::string> extract_boxed(std::string_view text);

// Parses an answer string into a single number, stripping LaTeX wrappers,
// currency and percent signs, units and words. nullopt when zero or several
// numbers remain.
std::optional<CanonicalNumber> normalize(std::string_view text);

// Text after the last line starting with "FINAL_ANSWER:", or nullopt.
std::optional<std::string> extract_final_answer_line(std::string_view text);

enum class JudgeFailure { kNoBox, kUnparseable };

std::string_view to_string(JudgeFailure failure);

struct Judgment {
  std::optional<std::string> extracted;
  std::optional<CanonicalNumber> canonical;
  bool correct = false;
  std::optional<JudgeFailure> failure;
};

Judgment judge_boxed(std::string_view completion, const CanonicalNumber& gold,
                     const EqualityOptions& options = {});

// True iff some maximal numeric token in `text` equals `gold`.
bool gold_in_text(std::string_view text, const CanonicalNumber& gold,
                  const EqualityOptions& options = {});
bool gold_in_prefix(const TruncatedTrace& truncated, const CanonicalNumber& gold,
                    const EqualityOptions& options = {});

}  // namespace latentprobe
