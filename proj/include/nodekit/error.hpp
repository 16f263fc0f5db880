#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace nodekit {

enum class ErrorCode {
    format,
    unsupported,
    data,
    io,
    geometry,
    empty_mask,
    degenerate,
    argument,
    mode,
    convergence,
    landmark,
};

constexpr std::string_view to_string(ErrorCode code)
{
    switch (code) {
    case ErrorCode::format: return "format_error";
    case ErrorCode::unsupported: return "unsupported_error";
    case ErrorCode::data: return "data_error";
    case ErrorCode::io: return "io_error";
    case ErrorCode::geometry: return "geometry_error";
    case ErrorCode::empty_mask: return "empty_mask_error";
    case ErrorCode::degenerate: return "degenerate_error";
    case ErrorCode::argument: return "argument_error";
    case ErrorCode::mode: return "mode_error";
    case ErrorCode::convergence: return "convergence_error";
    case ErrorCode::landmark: return "landmark_error";
    }
    return "error";
}

/// All library failures surface as this exception; `code()` distinguishes them.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string &message)
        : std::runtime_error(message), code_(code)
    {
    }

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

} // namespace nodekit
