#pragma once

#include <stdexcept>
#include <string>

namespace hvq {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor extents or channel counts disagree.
class DimensionError : public Error {
public:
    using Error::Error;
};

// An op produced NaN or Inf.
class NumericError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

// Caller violated a precondition of an operation.
class ContractError : public Error {
public:
    using Error::Error;
};

// Object used in the wrong lifecycle state (e.g. a consumed tape).
class StateError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

}  // namespace hvq
