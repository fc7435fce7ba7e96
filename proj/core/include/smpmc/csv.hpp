#pragma once

#include <cstdio>
#include <string>

namespace smpmc {

// 17 significant digits: enough to round-trip a double
inline std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace smpmc
