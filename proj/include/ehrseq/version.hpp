#pragma once

namespace ehrseq {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace ehrseq
