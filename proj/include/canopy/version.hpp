#pragma once

namespace canopy {

inline constexpr const char* version = "0.1.0";

}
