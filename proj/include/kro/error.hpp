#pragma once

#include <stdexcept>
#include <string>

namespace kro {

/// Base class for every error raised by the library.
class Error : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

/// Inputs rejected before any numerics run (bad dimensions, bad config,
/// missing files). The CLI maps these to exit code 1.
class ValidationError : public Error
{
public:
    using Error::Error;
};

class DimensionMismatch : public ValidationError
{
public:
    using ValidationError::ValidationError;
};

class UnsupportedActivation : public ValidationError
{
public:
    using ValidationError::ValidationError;
};

class MissingFile : public ValidationError
{
public:
    explicit MissingFile( const std::string &path )
        : ValidationError( "file not found: " + path )
        , _path( path )
    {
    }

    const std::string &path() const
    {
        return _path;
    }

private:
    std::string _path;
};

/// Euler-rate singularity of the 3D quadcopter (|cos(pitch)| too small).
class GimbalLock : public Error
{
public:
    using Error::Error;
};

/// Training produced a non-finite loss.
class TrainingDiverged : public Error
{
public:
    using Error::Error;
};

/// A linear solve that should be well-posed was not (e.g. R + B'PB singular).
class SolveFailure : public Error
{
public:
    using Error::Error;
};

class IoError : public Error
{
public:
    using Error::Error;
};

} // namespace kro
