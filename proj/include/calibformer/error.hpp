// Error type shared by every calibformer module.
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace calibformer {

enum class ErrorCode {
  kDegenerateDepth,
  kInvalidQuaternion,
  kInvalidRotation,
  kEmptyInput,
  kMalformedFile,
  kMalformedCalib,
  kResolutionMismatch,
  kConfig,
  kDimension,
  kUsage,
  kIo,
  kNanLoss,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDegenerateDepth: return "degenerate-depth";
    case ErrorCode::kInvalidQuaternion: return "invalid-quaternion";
    case ErrorCode::kInvalidRotation: return "invalid-rotation";
    case ErrorCode::kEmptyInput: return "empty-input";
    case ErrorCode::kMalformedFile: return "malformed-file";
    case ErrorCode::kMalformedCalib: return "malformed-calib";
    case ErrorCode::kResolutionMismatch: return "resolution-mismatch";
    case ErrorCode::kConfig: return "config-error";
    case ErrorCode::kDimension: return "dimension-error";
    case ErrorCode::kUsage: return "usage-error";
    case ErrorCode::kIo: return "io-error";
    case ErrorCode::kNanLoss: return "nan-loss";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace calibformer
