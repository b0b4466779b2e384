#pragma once

#include <stdexcept>
#include <string>

namespace slicegs {

/// Failure categories. The CLI maps each one onto a process exit code.
enum class ErrorKind {
  validation,  // bad argument or precondition
  data,        // malformed file, payload or dataset
  numeric,     // degenerate math, non-finite values, failed checks
  contract,    // API misuse such as a stale render cache
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ValidationError : Error {
  explicit ValidationError(const std::string& what) : Error(ErrorKind::validation, what) {}
};

struct DataError : Error {
  explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

struct ContractError : Error {
  explicit ContractError(const std::string& what) : Error(ErrorKind::contract, what) {}
};

inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::validation: return 1;
    case ErrorKind::data: return 2;
    case ErrorKind::numeric: return 3;
    case ErrorKind::contract: return 1;
  }
  return 1;
}

}  // namespace slicegs
