#pragma once

#include <stdexcept>
#include <string>

namespace kvprobe {

// Base for every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Weight archive / model loading failures. `tensor()` names the offending tensor when known.
class LoadError : public Error {
 public:
  LoadError(std::string tensor, const std::string& what)
      : Error(tensor.empty() ? what : "tensor '" + tensor + "': " + what), tensor_(std::move(tensor)) {}
  const std::string& tensor() const noexcept { return tensor_; }

 private:
  std::string tensor_;
};

class TokenizerError : public Error {
 public:
  using Error::Error;
};

// Shape, range, or configuration contract violated by a caller.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class SequenceOverflow : public Error {
 public:
  using Error::Error;
};

class DegenerateDirection : public Error {
 public:
  using Error::Error;
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

}  // namespace kvprobe
