#pragma once

#include <stdexcept>
#include <string>

namespace akd {

// Base of every error raised by the library. The CLI maps subclasses onto
// distinct exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

// A caller violated an operation's precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class LoadError : public Error {
public:
    using Error::Error;
};

// Non-finite loss or gradient during training.
class DivergenceError : public Error {
public:
    using Error::Error;
};

}  // namespace akd
