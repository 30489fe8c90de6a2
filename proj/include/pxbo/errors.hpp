#ifndef PXBO_ERRORS_HPP
#define PXBO_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace pxbo {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed manifest, snapshot or other structured input.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Binary payload byte count disagrees with the declared shape.
class SizeError : public Error {
public:
    SizeError(const std::string& what, std::size_t expected, std::size_t actual)
        : Error(what + ": expected " + std::to_string(expected) + " bytes, got " + std::to_string(actual)),
          expected_(expected),
          actual_(actual)
    {
    }

    std::size_t expected() const noexcept { return expected_; }
    std::size_t actual() const noexcept { return actual_; }

private:
    std::size_t expected_;
    std::size_t actual_;
};

/// Non-finite or otherwise unusable numeric data.
class DataError : public Error {
public:
    using Error::Error;
};

class ArgumentError : public Error {
public:
    using Error::Error;
};

/// A record or query references a location the model does not know.
class ConsistencyError : public Error {
public:
    using Error::Error;
};

/// Operation invoked in the wrong session phase.
class StateError : public Error {
public:
    using Error::Error;
};

/// Kernel matrix could not be factorized even after jitter escalation.
class ConditioningError : public Error {
public:
    using Error::Error;
};

class CapacityError : public Error {
public:
    using Error::Error;
};

/// The loop needs human input but no answering channel was supplied.
class DeadlockError : public Error {
public:
    using Error::Error;
};

} // namespace pxbo

#endif // PXBO_ERRORS_HPP
