#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace oneref {

// All library failures throw Error. `code()` is a stable identifier such as
// "ShapeMismatch" or "ParseError"; what() is "<code>: <detail>".
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& detail)
      : std::runtime_error(code + ": " + detail), code_(std::move(code)) {}

  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

[[noreturn]] inline void fail(const std::string& code, const std::string& detail) {
  throw Error(code, detail);
}

}  // namespace oneref
