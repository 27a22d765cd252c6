#pragma once

#include <stdexcept>
#include <string>

namespace coat {

// All failures surface as Error. `code` is a stable machine-parsable token
// (E_SHAPE, E_CONFIG, E_IO, ...); the CLI prints "error: <code>: <message>".
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(code + ": " + message), code_(std::move(code)) {}

  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

inline void check(bool cond, const char* code, const std::string& message) {
  if (!cond) throw Error(code, message);
}

}  // namespace coat
