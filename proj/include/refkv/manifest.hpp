#ifndef REFKV_MANIFEST_HPP
#define REFKV_MANIFEST_HPP

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace refkv {

// `key = value` text files used for checkpoints and run manifests.
// '#' starts a comment; keys keep their written order on write.
void write_kv_file(const std::string& path,
                   const std::vector<std::pair<std::string, std::string>>& entries);
std::map<std::string, std::string> read_kv_file(const std::string& path);

std::string trim(const std::string& s);

}  // namespace refkv

#endif
