#pragma once

#include <string>
#include <string_view>

namespace mads {

// SHA-256 hex digest (FIPS 180-4). Used for cache keys and artifact checksums.
std::string sha256_hex(std::string_view data);

}  // namespace mads
