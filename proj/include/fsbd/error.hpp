#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fsbd {

// Caller passed something that violates an operation's precondition.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed file contents. offset is the byte position where parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

// Bad experiment configuration; key is the dotted path of the offending entry.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& key, const std::string& what)
      : std::runtime_error(key.empty() ? what : key + ": " + what), key_(key) {}

  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

// Checkpoint or mask built for a different parameter layout.
class IncompatibleLayout : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fsbd
