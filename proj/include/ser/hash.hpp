#ifndef SER_HASH_HPP
#define SER_HASH_HPP

#include <cstdint>
#include <string>
#include <string_view>

namespace ser {

// FNV-1a, 128-bit variant. Used for config fingerprints (32 hex chars) and
// cache file naming. Not cryptographic.
inline std::string fnv1a128_hex(std::string_view data) {
    // FNV-1a 128-bit offset basis and prime.
    unsigned __int128 hash = (static_cast<unsigned __int128>(0x6C62272E07BB0142ull) << 64) |
                             0x62B821756295C58Dull;
    const unsigned __int128 prime = (static_cast<unsigned __int128>(0x0000000001000000ull) << 64) |
                                    0x000000000000013Bull;
    for (unsigned char c : data) {
        hash ^= c;
        hash *= prime;
    }
    static const char* digits = "0123456789abcdef";
    std::string out(32, '0');
    for (int i = 31; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[static_cast<unsigned>(hash & 0xF)];
        hash >>= 4;
    }
    return out;
}

// FNV-1a, 64-bit. Handy for deriving named RNG substreams.
inline std::uint64_t fnv1a64(std::string_view data) {
    std::uint64_t hash = 0xCBF29CE484222325ull;
    for (unsigned char c : data) {
        hash ^= c;
        hash *= 0x100000001B3ull;
    }
    return hash;
}

} // namespace ser

#endif
