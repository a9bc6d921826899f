#include "hflow/numerics/text.hpp"

#include "hflow/numerics/error.hpp"

#include <cerrno>
#include <cstdlib>
#include <sstream>

namespace hflow::num {

std::string format_double(double v) {
    std::ostringstream os;
    os.imbue(std::locale::classic());
    os.precision(17);
    os << v;
    return os.str();
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::string item;
    std::stringstream ss(s);
    while (std::getline(ss, item, sep)) parts.push_back(item);
    if (!s.empty() && s.back() == sep) parts.emplace_back();
    return parts;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

double parse_double(const std::string& s, const std::string& what) {
    const std::string t = trim(s);
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(t.c_str(), &end);
    if (t.empty() || end != t.c_str() + t.size() || errno == ERANGE)
        throw ContractError(what + ": '" + s + "' is not a number");
    return v;
}

std::uint64_t parse_uint(const std::string& s, const std::string& what) {
    const std::string t = trim(s);
    char* end = nullptr;
    errno = 0;
    const unsigned long long v = std::strtoull(t.c_str(), &end, 0);
    if (t.empty() || t[0] == '-' || end != t.c_str() + t.size() || errno == ERANGE)
        throw ContractError(what + ": '" + s + "' is not a non-negative integer");
    return v;
}

std::vector<double> parse_doubles(const std::string& s, const std::string& what) {
    std::vector<double> out;
    if (trim(s).empty()) return out;
    for (const auto& p : split(s, ',')) out.push_back(parse_double(p, what));
    return out;
}

} // namespace hflow::num
