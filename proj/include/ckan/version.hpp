#pragma once

namespace ckan {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace ckan
