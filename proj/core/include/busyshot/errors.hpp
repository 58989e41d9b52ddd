#pragma once

#include <stdexcept>
#include <string>

namespace busyshot {

/// Tensor, image or mask dimensions do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Input values are unusable (non-finite pixels, masks outside [0,1], ...).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Inconsistent configuration: channel counts, episode feasibility, split policy.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A support annotation with zero mass reached masked average pooling.
class EmptyMaskError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed manifests, dangling references, unreadable files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a training loss becomes NaN or infinite.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace busyshot
