#pragma once

#include <stdexcept>
#include <string>

namespace fedzda {

/// Tensor extents or ranks that do not line up.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A setting that cannot be honoured (bad hyperparameter, odd pooling extent, unknown id).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// API misuse, e.g. calling backward on a detached value.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A NaN or Inf surfaced in checked mode.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, truncated, count_mismatch, bad_format };

  ParseError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace fedzda
