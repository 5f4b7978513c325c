#pragma once

#include <stdexcept>
#include <string>

namespace mapworld {

/// Invalid or inconsistent configuration (world spec, model hyperparameters, CLI keys).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unrecognized on-disk format (bad magic, unknown version string).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Stored data is missing or fails its checksum. Carries the offending record id.
class IntegrityError : public std::runtime_error {
 public:
  IntegrityError(std::string id, const std::string& what)
      : std::runtime_error(what), id_(std::move(id)) {}
  const std::string& id() const { return id_; }

 private:
  std::string id_;
};

/// Well-formed input with invalid content (e.g. a class id outside [0, num_classes)).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or parameter shape mismatch.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or similar training failure; names the loss component.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(std::string component, const std::string& what)
      : std::runtime_error(what), component_(std::move(component)) {}
  const std::string& component() const { return component_; }

 private:
  std::string component_;
};

/// A file or directory could not be written or read.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad command line: unknown subcommand, flag or key.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mapworld
