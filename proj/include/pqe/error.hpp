#pragma once

#include <stdexcept>
#include <string>

namespace pqe {

/// Error families. The CLI maps each family onto its own exit code.
enum class ErrorFamily { usage = 1, io = 2, validation = 3, divergence = 4 };

class Error : public std::runtime_error {
 public:
  Error(ErrorFamily family, const std::string& what) : std::runtime_error(what), family_(family) {}
  ErrorFamily family() const noexcept { return family_; }

 private:
  ErrorFamily family_;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error(ErrorFamily::validation, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorFamily::io, what) {}
};

class DivergenceError : public Error {
 public:
  explicit DivergenceError(const std::string& what) : Error(ErrorFamily::divergence, what) {}
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ValidationError(what);
}

}  // namespace pqe
