/* Copyright 2026 The OPMT Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#ifndef OPMT_ERRORS_HPP_
#define OPMT_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace opmt {

// Root of every exception thrown by the library. The CLI maps these to
// exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible extents between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Output extent would not be integral (conv geometry, reshape size).
class ShapeError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

// A factorization rank below the full-rank bound.
class RankError : public Error {
 public:
  using Error::Error;
};

// Iterative solver failed to converge; carries the remaining residual.
class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, double residual)
      : Error(what), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

// Two models whose layer topology does not line up.
class StructuralError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss during training.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::size_t epoch,
                  std::size_t batch)
      : Error(what), epoch_(epoch), batch_(batch) {}
  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

// Malformed or corrupted archive bytes.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Bad experiment configuration; line is 1-based, 0 when not from a file.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& what, std::string key, std::size_t line)
      : Error(what), key_(std::move(key)), line_(line) {}
  const std::string& key() const { return key_; }
  std::size_t line() const { return line_; }

 private:
  std::string key_;
  std::size_t line_;
};

}  // namespace opmt

#endif  // OPMT_ERRORS_HPP_
