#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cnnscope {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor extents disagree with what an operation requires.
struct ShapeError : Error {
  using Error::Error;
};

struct IndexError : Error {
  using Error::Error;
};

// A scalar argument is outside its admissible domain (empty batch, zero scale, ...).
struct DomainError : Error {
  using Error::Error;
};

struct ParseError : Error {
  using Error::Error;
};

struct IoError : Error {
  IoError(const std::string& what, std::string path)
      : Error(what + ": " + path), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

// Loss became NaN/Inf during training.
struct DivergenceError : Error {
  explicit DivergenceError(std::int64_t step)
      : Error("numerical divergence at step " + std::to_string(step)), step_(step) {}
  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

}  // namespace cnnscope
