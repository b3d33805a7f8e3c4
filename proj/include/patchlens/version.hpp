#pragma once

namespace patchlens {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace patchlens
