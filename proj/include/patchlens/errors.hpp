#pragma once

#include <stdexcept>
#include <string>

namespace patchlens {

// Configuration / input errors. The CLI maps these to exit code 2,
// everything else derived from std::runtime_error to exit code 1.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct LoadError : ConfigError {
  explicit LoadError(const std::string& msg) : ConfigError(msg) {}
};

struct PatchError : std::runtime_error {
  explicit PatchError(const std::string& msg) : std::runtime_error(msg) {}
};

struct PairingError : std::runtime_error {
  explicit PairingError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CacheError : std::runtime_error {
  explicit CacheError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainError : std::runtime_error {
  explicit TrainError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace patchlens
