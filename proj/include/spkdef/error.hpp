#pragma once

#include <stdexcept>
#include <string>

namespace spkdef {

// Every error raised by the library derives from Error so callers can catch
// one type at the CLI boundary.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class FormatError : public Error {  // malformed file contents
public:
    using Error::Error;
};

class ShapeError : public Error {  // incompatible lengths / shapes
public:
    using Error::Error;
};

class ParameterError : public Error {  // precondition on a tunable parameter
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class ContractError : public Error {  // API misuse (wrong label, non-scalar loss, ...)
public:
    using Error::Error;
};

class AdapterError : public Error {  // external codec process failure
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class ScoringError : public Error {
public:
    using Error::Error;
};

}  // namespace spkdef
