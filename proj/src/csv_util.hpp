#pragma once

#include "maglens/core.hpp"

#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <string>
#include <vector>

namespace maglens::csv {

inline void put(std::string& line, double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    line += ',';
    line += buf;
}

inline std::vector<std::string> split(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(item);
    return out;
}

inline double parse_double(const std::string& s) {
    char* end = nullptr;
    double x = std::strtod(s.c_str(), &end);
    if (end == s.c_str()) throw FormatError("not a number: '" + s + "'");
    return x;
}

}  // namespace maglens::csv
