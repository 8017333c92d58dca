#pragma once

#include <optional>
#include <string>
#include <string_view>

namespace gridwatch::util {

// Normalizes a UTF-8 string to Unicode NFC. Returns std::nullopt when the
// input is not valid UTF-8 (overlong encodings, surrogates, and truncated
// sequences all count as invalid).
std::optional<std::string> nfc_normalize(std::string_view utf8);

bool is_valid_utf8(std::string_view s);

}  // namespace gridwatch::util
