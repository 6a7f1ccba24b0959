#pragma once

#include <stdexcept>
#include <string>

namespace r3seg {

// Error taxonomy, mapped onto CLI exit codes by tools/:
//   ConfigError            -> 2 (usage / validation)
//   IoError, CorruptionError, CompatError -> 3 (data / compatibility)
//   anything else          -> 4 (internal)
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A value outside its documented domain (probability out of [0,1], tau <= 0, ...).
struct InputError : Error {
  using Error::Error;
};

// Structural mismatch between arguments (shapes, bounds, cardinalities).
struct StructureError : Error {
  using Error::Error;
};

// Filesystem / serialization failures.
struct IoError : Error {
  using Error::Error;
};

// A file exists but its contents fail integrity checks.
struct CorruptionError : IoError {
  using IoError::IoError;
};

// Version / architecture-hash / rank mismatch between artifacts.
struct CompatError : Error {
  using Error::Error;
};

// Invalid or inconsistent run configuration.
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace r3seg
