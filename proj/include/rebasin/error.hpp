// Copyright 2026 The rebasin Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace rebasin {

// Base of every error thrown by the library. `category()` is a short,
// machine-parsable tag that the CLI prints in front of the message.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& what)
      : std::runtime_error(what), category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

// Malformed archive bytes or file containers.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error("format", what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io", what) {}
};

// Tensor or model shapes that disagree with each other or with a config.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape", what) {}
};

// Anything else that violates a documented precondition.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what)
      : Error("validation", what) {}
};

}  // namespace rebasin
