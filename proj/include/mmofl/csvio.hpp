#pragma once

#include <string>
#include <vector>

namespace mmofl {

// Decimal formatting with 17 significant digits: round-trips any finite double.
std::string format_real(double x);

std::vector<std::string> split_csv_line(const std::string& line);

// Strict scalar parsers; throw std::runtime_error with the offending text.
double parse_real(const std::string& cell);
long long parse_int(const std::string& cell);

}  // namespace mmofl
