#pragma once

#include <cstdio>
#include <string>

namespace cmta {

// Shortest decimal form that round-trips a double; used for deterministic
// CSV/SVG output.
inline std::string g17(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string g6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

}  // namespace cmta
