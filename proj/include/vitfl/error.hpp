#pragma once

#include <stdexcept>
#include <string>

namespace vitfl {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or dimension disagreement between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced by an operation or an update.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated file, bad record contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& what)
      : Error(key.empty() ? what : key + ": " + what), key_(std::move(key)) {}

  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

}  // namespace vitfl
