// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace itrain {

enum class ErrorCode {
    parse_error,
    unknown_command,
    invalid_args,
    missing_field,
    invalid_field,
    unknown_event,
    duplicate_uuid,
    unknown_uuid,
    illegal_transition,
    unknown_layer,
    unknown_checkpoint,
    corrupt_checkpoint,
    unknown_source,
    invalid_value,
    shape_mismatch,
    non_finite,
    io_error,
    config_mismatch,
    connection_error,
    run_ended,
};

[[nodiscard]] std::string_view to_string(ErrorCode code) noexcept;

/// Error carrying a machine-readable code and, where one applies, the name of
/// the offending field.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, std::string message, std::string field = {})
        : std::runtime_error(std::move(message)), code_(code), field_(std::move(field)) {}

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }
    [[nodiscard]] const std::string& field() const noexcept { return field_; }

private:
    ErrorCode code_;
    std::string field_;
};

}  // namespace itrain
