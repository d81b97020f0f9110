#include "preflab/hash.hpp"

#include <array>
#include <cstdio>

namespace preflab {

std::string hash_hex(std::string_view data) {
    std::array<char, 17> buf{};
    std::snprintf(buf.data(), buf.size(), "%016llx",
                  static_cast<unsigned long long>(fnv1a(data)));
    return std::string(buf.data());
}

}  // namespace preflab
