#pragma once

#include <stdexcept>
#include <string>

namespace latentprobe {

// Categories double as CLI exit codes where one exists.
enum class ErrorKind {
  kConfig = 1,
  kBackend = 2,
  kValidation = 3,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const { return kind_; }
  int exit_code() const { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

inline Error ConfigError(const std::string& what) { return Error(ErrorKind::kConfig, what); }
inline Error BackendError(const std::string& what) { return Error(ErrorKind::kBackend, what); }
inline Error ValidationError(const std::string& what) { return Error(ErrorKind::kValidation, what); }

}  // namespace latentprobe
