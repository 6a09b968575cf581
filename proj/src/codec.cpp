// SPDX-License-Identifier: Apache-2.0
#include "itrain/codec.hpp"

#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>

#include <boost/uuid/random_generator.hpp>
#include <boost/uuid/uuid_io.hpp>
#include <openssl/evp.h>
#include <openssl/sha.h>

#include "itrain/error.hpp"

namespace itrain {

std::string random_uuid() {
    thread_local boost::uuids::random_generator generator;
    return boost::uuids::to_string(generator());
}

std::string sha256_hex(std::string_view data) {
    std::array<unsigned char, SHA256_DIGEST_LENGTH> digest{};
    SHA256(reinterpret_cast<const unsigned char*>(data.data()), data.size(), digest.data());
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(digest.size() * 2);
    for (unsigned char byte : digest) {
        out.push_back(kHex[byte >> 4]);
        out.push_back(kHex[byte & 0x0f]);
    }
    return out;
}

std::string encode_f64(std::span<const double> values) {
    static_assert(std::endian::native == std::endian::little, "float64 encoding assumes little-endian host");
    const std::size_t raw_size = values.size() * sizeof(double);
    if (raw_size == 0) {
        return {};
    }
    std::string out(4 * ((raw_size + 2) / 3), '\0');
    const int written = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                        reinterpret_cast<const unsigned char*>(values.data()),
                                        static_cast<int>(raw_size));
    out.resize(static_cast<std::size_t>(written));
    return out;
}

std::vector<double> decode_f64(std::string_view text) {
    if (text.empty()) {
        return {};
    }
    if (text.size() % 4 != 0) {
        throw Error(ErrorCode::parse_error, "base64 length is not a multiple of 4");
    }
    std::string raw(3 * text.size() / 4, '\0');
    const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(raw.data()),
                                  reinterpret_cast<const unsigned char*>(text.data()),
                                  static_cast<int>(text.size()));
    if (n < 0) {
        throw Error(ErrorCode::parse_error, "invalid base64");
    }
    // EVP_DecodeBlock keeps the zero bytes produced by '=' padding.
    std::size_t size = static_cast<std::size_t>(n);
    if (text.ends_with("==")) {
        size -= 2;
    } else if (text.ends_with("=")) {
        size -= 1;
    }
    if (size % sizeof(double) != 0) {
        throw Error(ErrorCode::parse_error, "float64 payload has a partial value");
    }
    std::vector<double> values(size / sizeof(double));
    std::memcpy(values.data(), raw.data(), size);
    return values;
}

std::string format_double(double value) {
    std::array<char, 64> buf{};
    auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), value);
    if (ec != std::errc{}) {
        throw Error(ErrorCode::invalid_value, "cannot format number");
    }
    return std::string(buf.data(), end);
}

}  // namespace itrain
