#pragma once

#include <stdexcept>
#include <string>

namespace dmx {

enum class IoErrorKind {
  open_failed,
  bad_magic,
  bad_version,
  truncated,
  dim_overflow,
  bad_value,
  schema_mismatch,
};

class IoError : public std::runtime_error {
 public:
  IoError(IoErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  IoErrorKind kind() const { return kind_; }

 private:
  IoErrorKind kind_;
};

}  // namespace dmx
