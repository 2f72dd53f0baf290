#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace canlab {

// FNV-1a 64-bit. Used for content hashing of artifacts and configs; stable
// across platforms, not cryptographic.
class Fnv1a {
public:
    void update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            state_ ^= p[i];
            state_ *= 0x100000001b3ULL;
        }
    }
    void update(std::string_view s) { update(s.data(), s.size()); }

    std::uint64_t value() const { return state_; }

    std::string hex() const {
        static const char* digits = "0123456789abcdef";
        std::string out(16, '0');
        std::uint64_t v = state_;
        for (int i = 15; i >= 0; --i) {
            out[static_cast<std::size_t>(i)] = digits[v & 0xf];
            v >>= 4;
        }
        return out;
    }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string fnv1a_hex(std::string_view s) {
    Fnv1a h;
    h.update(s);
    return h.hex();
}

} // namespace canlab
