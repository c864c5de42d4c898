#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace arfn {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Carries the op name and every operand extent so callers can report exactly what clashed.
class ShapeError : public Error {
 public:
  ShapeError(std::string op, std::vector<Shape> extents, const std::string& detail = {})
      : Error(format(op, extents, detail)), op_(std::move(op)), extents_(std::move(extents)) {}

  const std::string& op() const { return op_; }
  const std::vector<Shape>& extents() const { return extents_; }

 private:
  static std::string format(const std::string& op, const std::vector<Shape>& ex, const std::string& detail) {
    std::string m = "shape mismatch in " + op + ":";
    for (const auto& s : ex) m += " " + shape_str(s);
    if (!detail.empty()) m += " (" + detail + ")";
    return m;
  }
  std::string op_;
  std::vector<Shape> extents_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace arfn
