#pragma once

#include <cstdio>
#include <string>
#include <vector>

namespace exotst {
namespace csv {

/// Splits one CSV line on commas. Fields are taken verbatim; quoting is not
/// supported (no producer in this project emits quoted fields).
inline std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

/// Formats a double with 17 significant digits, enough for a lossless
/// text round trip of any IEEE-754 double.
inline std::string g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace csv
}  // namespace exotst
