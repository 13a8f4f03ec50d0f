#pragma once

namespace uwm {

// Written into every run directory so outputs can be traced to the code
// that produced them.
inline constexpr const char* kCodeVersion = "uwm-lab 1.0.0";

}  // namespace uwm
