#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pmp {

enum class ErrorCode {
    kEmptyAfterStrip,
    kAdjacentMarks,
    kUnknownMark,
    kBadRatios,
    kIdOutOfRange,
    kShapeMismatch,
    kBadSelection,
    kTooShort,
    kEmptyBatch,
    kLengthMismatch,
    kTooLongAfterSlots,
    kConfigMismatch,
    kEmptyInput,
    kIo,
    kFormat,
};

constexpr std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::kEmptyAfterStrip: return "EmptyAfterStrip";
        case ErrorCode::kAdjacentMarks: return "AdjacentMarks";
        case ErrorCode::kUnknownMark: return "UnknownMark";
        case ErrorCode::kBadRatios: return "BadRatios";
        case ErrorCode::kIdOutOfRange: return "IdOutOfRange";
        case ErrorCode::kShapeMismatch: return "ShapeMismatch";
        case ErrorCode::kBadSelection: return "BadSelection";
        case ErrorCode::kTooShort: return "TooShort";
        case ErrorCode::kEmptyBatch: return "EmptyBatch";
        case ErrorCode::kLengthMismatch: return "LengthMismatch";
        case ErrorCode::kTooLongAfterSlots: return "TooLongAfterSlots";
        case ErrorCode::kConfigMismatch: return "ConfigMismatch";
        case ErrorCode::kEmptyInput: return "EmptyInput";
        case ErrorCode::kIo: return "Io";
        case ErrorCode::kFormat: return "Format";
    }
    return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (and tests) can branch on the kind without parsing messages.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

inline void require(bool condition, ErrorCode code, const std::string& message) {
    if (!condition) throw Error(code, message);
}

}  // namespace pmp
