// Copyright (c) 2026 the attackgen authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace attackgen {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Tensor/graph shape disagreement, detected eagerly at build time.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// A NaN or Inf escaped a public operation.
class NonFiniteError : public Error {
public:
  using Error::Error;
};

/// The model handle's access level does not permit the requested operation.
class AccessDeniedError : public Error {
public:
  using Error::Error;
};

/// A query-limited handle ran out of queries.
class BudgetExhaustedError : public Error {
public:
  using Error::Error;
};

class FileError : public Error {
public:
  using Error::Error;
};

class CorruptFileError : public FileError {
public:
  using FileError::FileError;
};

class TruncatedFileError : public FileError {
public:
  using FileError::FileError;
};

class TargetError : public Error {
public:
  using Error::Error;
};

/// dynamic_target: every pixel already carries the target class.
class AllTargetClassError : public TargetError {
public:
  using TargetError::TargetError;
};

/// confusion_target: the map contains no pixel of the target class.
class NoTargetPixelsError : public TargetError {
public:
  using TargetError::TargetError;
};

/// Training loss became non-finite.
class DivergenceError : public Error {
public:
  using Error::Error;
};

/// Boundary attack could not find an adversarial starting point.
class InitFailureError : public Error {
public:
  using Error::Error;
};

/// An attack spec failed compatibility validation.
class SpecValidationError : public Error {
public:
  using Error::Error;
};

} // namespace attackgen
