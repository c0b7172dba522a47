#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mmbert {

enum class ErrorKind {
  kShape,
  kConfig,
  kContract,
  kNumeric,
  kEmptyLoss,
  kDecode,
  kData,
  kIo,
  kMode,
  kCheckpointVersion,
  kCheckpointFingerprint,
  kCheckpointTruncated,
  kCheckpointCorrupt,
};

std::string_view error_kind_name(ErrorKind kind);

// Every failure raised by the library carries a kind so callers (the CLI in
// particular) can map it to an exit status without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace mmbert
