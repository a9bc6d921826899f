#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace hflow::num {

// Shortest form that round-trips is not guaranteed; 17 significant digits is.
std::string format_double(double v);

std::vector<std::string> split(const std::string& s, char sep);
std::string trim(const std::string& s);

// Strict parsers: the whole string must be consumed. `what` names the value
// in the ContractError message.
double parse_double(const std::string& s, const std::string& what);
std::uint64_t parse_uint(const std::string& s, const std::string& what);
std::vector<double> parse_doubles(const std::string& s, const std::string& what);

} // namespace hflow::num
