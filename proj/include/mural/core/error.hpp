// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace mural {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shapes of two operands disagree.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Argument outside the documented domain (negative size, t out of range, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

// NaN or Inf encountered where finite values are required.
class NonFiniteError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class FormatError : public IoError {
public:
    using IoError::IoError;
};

// Input admits no meaningful answer, e.g. clustering a constant image.
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class CheckpointError : public Error {
public:
    using Error::Error;
};

#define MURAL_CHECK(cond, ExType, msg)        \
    do {                                      \
        if (!(cond)) throw ExType(std::string(msg)); \
    } while (0)

}  // namespace mural
