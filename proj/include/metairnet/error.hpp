#pragma once

#include <stdexcept>
#include <string>

namespace metairnet {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

/// A precondition on an argument value was violated (NaN input, bad config...).
class PreconditionError : public Error {
public:
    using Error::Error;
};

class IngestionError : public Error {
public:
    using Error::Error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

class SamplingError : public Error {
public:
    using Error::Error;
};

class CheckpointError : public Error {
public:
    using Error::Error;
};

/// Raised when an optimization loop produces a non-finite loss.
class TrainingError : public Error {
public:
    TrainingError(const std::string& what, long iteration)
        : Error(what + " (iteration " + std::to_string(iteration) + ")"), iteration_(iteration) {}

    long iteration() const { return iteration_; }

private:
    long iteration_;
};

class AdaptationError : public TrainingError {
public:
    using TrainingError::TrainingError;
};

class AugmentationError : public Error {
public:
    using Error::Error;
};

class UsageError : public Error {
public:
    using Error::Error;
};

}  // namespace metairnet
