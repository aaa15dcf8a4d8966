#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace hieraudio {

// Error categories map 1:1 onto CLI exit codes.
enum class ErrorKind {
  invalid_input = 2,
  missing_dependency = 3,
  numerical = 4,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail_input(const std::string& msg) {
  throw Error(ErrorKind::invalid_input, msg);
}
[[noreturn]] inline void fail_missing(const std::string& msg) {
  throw Error(ErrorKind::missing_dependency, msg);
}
[[noreturn]] inline void fail_numerical(const std::string& msg) {
  throw Error(ErrorKind::numerical, msg);
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail_input(msg);
}

}  // namespace hieraudio
