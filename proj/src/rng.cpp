#include "mapchange/rng.hpp"

#include <cstdio>

#include "mapchange/errors.hpp"

namespace mapchange {

std::string rng_state_to_hex(const std::array<uint64_t, 4>& s) {
  char buf[4 * 16 + 1];
  std::snprintf(buf, sizeof(buf), "%016llx%016llx%016llx%016llx",
                static_cast<unsigned long long>(s[0]), static_cast<unsigned long long>(s[1]),
                static_cast<unsigned long long>(s[2]), static_cast<unsigned long long>(s[3]));
  return std::string(buf);
}

std::array<uint64_t, 4> rng_state_from_hex(const std::string& hex) {
  if (hex.size() != 64) throw DataError("rng state must be 64 hex digits, got " + hex);
  std::array<uint64_t, 4> s{};
  for (int w = 0; w < 4; ++w) {
    uint64_t v = 0;
    for (int i = 0; i < 16; ++i) {
      char c = hex[static_cast<std::size_t>(w * 16 + i)];
      uint64_t d;
      if (c >= '0' && c <= '9')
        d = static_cast<uint64_t>(c - '0');
      else if (c >= 'a' && c <= 'f')
        d = static_cast<uint64_t>(c - 'a') + 10;
      else if (c >= 'A' && c <= 'F')
        d = static_cast<uint64_t>(c - 'A') + 10;
      else
        throw DataError("rng state has non-hex character: " + hex);
      v = (v << 4) | d;
    }
    s[static_cast<std::size_t>(w)] = v;
  }
  return s;
}

}  // namespace mapchange
