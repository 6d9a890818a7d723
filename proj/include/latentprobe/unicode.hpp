#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

namespace latentprobe::unicode {

struct Decoded {
  char32_t cp;
  std::size_t length;  // bytes consumed, >= 1
};

// Decodes the code point starting at byte offset `pos`. Malformed input
// yields U+FFFD with length 1 so scanning always makes progress.
Decoded decode(std::string_view text, std::size_t pos);

// Byte offset of the code point that ends right before `pos` (pos > 0).
std::size_t previous_start(std::string_view text, std::size_t pos);

std::string encode(char32_t cp);

// Digit value of a Unicode decimal digit (general category Nd) for the
// scripts we handle; nullopt for anything else.
std::optional<int> digit_value(char32_t cp);

// The code point for digit 0 of the script containing `cp` (assumes cp is a
// digit per digit_value).
char32_t digit_zero(char32_t cp);

bool is_space(char32_t cp);
bool is_ascii_letter(char32_t cp);

}  // namespace latentprobe::unicode
