/*
 * Copyright 2026 The fedcar Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <stdexcept>
#include <string>

namespace fedcar {

/// Broad error classes; each maps to a distinct process exit code.
enum class ErrorClass {
  kConfig = 2,    // bad configuration or arguments, detected before compute
  kData = 3,      // malformed or missing data / model files
  kModel = 4,     // shape mismatch, non-finite values, contract violations
  kNetwork = 5,   // socket, protocol and timeout failures
};

class Error : public std::runtime_error {
 public:
  Error(ErrorClass cls, const std::string& what)
      : std::runtime_error(what), cls_(cls) {}
  ErrorClass error_class() const { return cls_; }
  int exit_code() const { return static_cast<int>(cls_); }

 private:
  ErrorClass cls_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorClass::kConfig, what) {}
};

struct DataError : Error {
  explicit DataError(const std::string& what) : Error(ErrorClass::kData, what) {}
};

struct ModelError : Error {
  explicit ModelError(const std::string& what) : Error(ErrorClass::kModel, what) {}
};

struct NetworkError : Error {
  explicit NetworkError(const std::string& what) : Error(ErrorClass::kNetwork, what) {}
};

}  // namespace fedcar
