#include "refkv/rng.hpp"

#include <cstring>
#include <sstream>
#include <stdexcept>

namespace refkv {

std::string Rng::state_string() const {
    std::ostringstream os;
    os << std::hex << seed_;
    for (uint64_t s : state_) os << ":" << std::hex << s;
    uint64_t spare_bits = 0;
    std::memcpy(&spare_bits, &spare_, 8);
    os << ":" << (has_spare_ ? 1 : 0) << ":" << std::hex << spare_bits;
    return os.str();
}

void Rng::restore_state(const std::string& s) {
    std::istringstream is(s);
    std::string tok;
    auto next = [&]() {
        if (!std::getline(is, tok, ':')) throw std::runtime_error("bad rng state string");
        return std::stoull(tok, nullptr, 16);
    };
    seed_ = next();
    for (auto& w : state_) w = next();
    has_spare_ = next() != 0;
    uint64_t spare_bits = next();
    std::memcpy(&spare_, &spare_bits, 8);
}

}  // namespace refkv
