// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace itrain {

/// RFC-4122 version-4 identifier.
[[nodiscard]] std::string random_uuid();

[[nodiscard]] std::string sha256_hex(std::string_view data);

/// float64 values as little-endian bytes, base64 encoded.
[[nodiscard]] std::string encode_f64(std::span<const double> values);
[[nodiscard]] std::vector<double> decode_f64(std::string_view text);

/// Shortest decimal text that parses back to exactly `value`.
[[nodiscard]] std::string format_double(double value);

}  // namespace itrain
