#include "mmbert/error.h"

namespace mmbert {

std::string_view error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kShape: return "shape error";
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kContract: return "contract error";
    case ErrorKind::kNumeric: return "numeric failure";
    case ErrorKind::kEmptyLoss: return "empty loss";
    case ErrorKind::kDecode: return "decode error";
    case ErrorKind::kData: return "data error";
    case ErrorKind::kIo: return "i/o error";
    case ErrorKind::kMode: return "mode error";
    case ErrorKind::kCheckpointVersion: return "checkpoint version error";
    case ErrorKind::kCheckpointFingerprint: return "checkpoint fingerprint error";
    case ErrorKind::kCheckpointTruncated: return "checkpoint truncated";
    case ErrorKind::kCheckpointCorrupt: return "checkpoint corrupt";
  }
  return "error";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(error_kind_name(kind)) + ": " + message), kind_(kind) {}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace mmbert
