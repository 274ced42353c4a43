#pragma once

#include <stdexcept>
#include <string>

namespace tal {

// Shape or size disagreement between tensors handed to an operation.
struct dimension_error : std::runtime_error {
  explicit dimension_error(const std::string& what) : std::runtime_error(what) {}
};

// A value-level misuse: label out of range, bad kernel size, gamma count
// not matching the block count, and the like.
struct parameter_error : std::runtime_error {
  explicit parameter_error(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or version-mismatched file contents (IDX, model documents).
struct format_error : std::runtime_error {
  explicit format_error(const std::string& what) : std::runtime_error(what) {}
};

// Filesystem-level failure: missing file, unwritable directory.
struct io_error : std::runtime_error {
  explicit io_error(const std::string& what) : std::runtime_error(what) {}
};

// Training diverged (non-finite loss).
struct training_error : std::runtime_error {
  explicit training_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace tal
