#include "mmofl/csvio.hpp"

#include <cstdio>
#include <cstdlib>
#include <stdexcept>

namespace mmofl {

std::string format_real(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    size_t start = 0;
    for (size_t i = 0; i <= line.size(); ++i) {
        if (i == line.size() || line[i] == ',') {
            out.push_back(line.substr(start, i - start));
            start = i + 1;
        }
    }
    return out;
}

double parse_real(const std::string& cell) {
    if (cell.empty()) throw std::runtime_error("empty CSV cell");
    char* end = nullptr;
    const double v = std::strtod(cell.c_str(), &end);
    if (end != cell.c_str() + cell.size())
        throw std::runtime_error("unparseable real '" + cell + "'");
    return v;
}

long long parse_int(const std::string& cell) {
    if (cell.empty()) throw std::runtime_error("empty CSV cell");
    char* end = nullptr;
    const long long v = std::strtoll(cell.c_str(), &end, 10);
    if (end != cell.c_str() + cell.size())
        throw std::runtime_error("unparseable integer '" + cell + "'");
    return v;
}

}  // namespace mmofl
