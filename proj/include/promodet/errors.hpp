#pragma once

#include <stdexcept>
#include <string>

namespace promodet {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid or degenerate box arithmetic.
class GeometryError : public Error {
 public:
  using Error::Error;
};

// Tensor shape / layout disagreement between two stages.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Bad configuration value; the message carries the dotted key path.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace promodet
