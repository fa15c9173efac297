#include "refkv/manifest.hpp"

#include <fstream>
#include <stdexcept>

namespace refkv {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

void write_kv_file(const std::string& path,
                   const std::vector<std::pair<std::string, std::string>>& entries) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    for (const auto& [k, v] : entries) os << k << " = " << v << "\n";
    if (!os) throw std::runtime_error("short write to " + path);
}

std::map<std::string, std::string> read_kv_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path);
    std::map<std::string, std::string> out;
    std::string line;
    while (std::getline(is, line)) {
        std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == '[') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(path + ": malformed line '" + line + "'");
        out[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
    }
    return out;
}

}  // namespace refkv
