#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace critlayers {

enum class ErrorCode {
    io,
    invalid_argument,
    invariant_violation,
    missing_layer_file,
    dimension_mismatch,
    bad_magic,
    unsupported_version,
    truncated_payload,
    degenerate_input,
    numeric_failure,
    out_of_range,
    config_mismatch,
    divergence,
    parse,
};

constexpr std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::io: return "io";
        case ErrorCode::invalid_argument: return "invalid_argument";
        case ErrorCode::invariant_violation: return "invariant_violation";
        case ErrorCode::missing_layer_file: return "missing_layer_file";
        case ErrorCode::dimension_mismatch: return "dimension_mismatch";
        case ErrorCode::bad_magic: return "bad_magic";
        case ErrorCode::unsupported_version: return "unsupported_version";
        case ErrorCode::truncated_payload: return "truncated_payload";
        case ErrorCode::degenerate_input: return "degenerate_input";
        case ErrorCode::numeric_failure: return "numeric_failure";
        case ErrorCode::out_of_range: return "out_of_range";
        case ErrorCode::config_mismatch: return "config_mismatch";
        case ErrorCode::divergence: return "divergence";
        case ErrorCode::parse: return "parse";
    }
    return "unknown";
}

// Every failure in the library surfaces as this exception; callers switch on code().
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string & message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code), detail_(message) {}

    ErrorCode code() const noexcept { return code_; }
    const std::string & detail() const noexcept { return detail_; }

private:
    ErrorCode code_;
    std::string detail_;
};

inline void require(bool condition, ErrorCode code, const std::string & message) {
    if (!condition) {
        throw Error(code, message);
    }
}

} // namespace critlayers
