#pragma once

namespace gridwatch {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace gridwatch
