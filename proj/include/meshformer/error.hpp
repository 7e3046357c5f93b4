// Copyright 2026 The meshformer Authors
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

namespace meshformer {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand dimensions do not fit the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Input that makes the operation undefined (e.g. normalizing over no columns).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// A TransformerConfig / deployment constraint is violated. The message names
/// the constraint.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Pruning request that would break nestedness or mask invariants.
class PruningError : public Error {
 public:
  using Error::Error;
};

/// Gather round contract violated (overlapping ownership, foreign columns).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// Column ranges handed to output assembly leave a gap or overlap.
class AssemblyError : public Error {
 public:
  using Error::Error;
};

// Bundle I/O. Each failure mode has its own type so callers can tell a stale
// file from a corrupted one.
class BundleError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public BundleError {
 public:
  using BundleError::BundleError;
};

class VersionMismatchError : public BundleError {
 public:
  using BundleError::BundleError;
};

class TruncatedError : public BundleError {
 public:
  using BundleError::BundleError;
};

class DimensionMismatchError : public BundleError {
 public:
  using BundleError::BundleError;
};

}  // namespace meshformer
