#pragma once

#include <stdexcept>
#include <string>

namespace tsar {

// Broad failure classes; the C API maps these onto status codes and the CLI
// onto exit codes.
enum class ErrorKind {
  kShape,
  kNumeric,
  kConfig,
  kIo,
  kFormat,
  kInvalidArgument,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace tsar
