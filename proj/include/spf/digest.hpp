#pragma once

#include <span>
#include <string>
#include <string_view>

namespace spf {

/// Incremental SHA-256, hex output.
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    Sha256& update(std::span<const unsigned char> bytes);
    Sha256& update(std::string_view text);
    std::string hex();

private:
    void* ctx_;
};

std::string sha256_hex(std::string_view text);

}  // namespace spf
