#pragma once

#include <string>
#include <string_view>

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>

namespace neurolens {

/// NFKC case-folded form with leading/trailing punctuation, symbols, whitespace and
/// underscores removed. Invalid UTF-8 degrades to U+FFFD and is stripped as a symbol.
inline std::string normalize_token(std::string_view s) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfkc = icu::Normalizer2::getNFKCCasefoldInstance(status);
  icu::UnicodeString in = icu::UnicodeString::fromUTF8(icu::StringPiece(s.data(), static_cast<int32_t>(s.size())));
  icu::UnicodeString folded = U_SUCCESS(status) ? nfkc->normalize(in, status) : in;
  if (U_FAILURE(status)) folded = in;

  auto strip = [](UChar32 c) {
    return c == '_' || u_ispunct(c) || u_isUWhiteSpace(c) || c == 0xFFFD ||
           (u_charType(c) >= U_DASH_PUNCTUATION && u_charType(c) <= U_OTHER_SYMBOL) || u_iscntrl(c);
  };
  int32_t begin = 0;
  int32_t end = folded.length();
  while (begin < end) {
    const UChar32 c = folded.char32At(begin);
    if (!strip(c)) break;
    begin += U16_LENGTH(c);
  }
  while (end > begin) {
    const int32_t prev = folded.moveIndex32(end, -1);
    const UChar32 c = folded.char32At(prev);
    if (!strip(c)) break;
    end = prev;
  }
  std::string out;
  folded.tempSubStringBetween(begin, end).toUTF8String(out);
  return out;
}

}  // namespace neurolens
