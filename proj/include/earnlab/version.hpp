#pragma once

namespace earnlab {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace earnlab
