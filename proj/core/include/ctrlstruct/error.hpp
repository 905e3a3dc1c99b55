#pragma once

#include <stdexcept>
#include <string>

namespace ctrlstruct {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad user configuration or invalid arguments (CLI exit code 2).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed input file; carries the 1-based line number when known.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line)
        : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}

    explicit ParseError(const std::string& what) : Error(what) {}

    std::size_t line() const { return line_; }

private:
    std::size_t line_{0};
};

/// A stage was asked to run before the artifact it consumes exists (exit code 3).
class MissingArtifactError : public Error {
public:
    MissingArtifactError(const std::string& artifact, const std::string& producing_stage)
        : Error("missing artifact '" + artifact + "'; run stage '" + producing_stage + "' first"),
          artifact_(artifact),
          stage_(producing_stage) {}

    const std::string& artifact() const { return artifact_; }
    const std::string& producing_stage() const { return stage_; }

private:
    std::string artifact_;
    std::string stage_;
};

/// Non-finite loss or other numerical breakdown (exit code 4).
class NumericalError : public Error {
public:
    using Error::Error;
};

/// Checkpoint header does not match what the caller expects.
class CheckpointError : public Error {
public:
    using Error::Error;
};

}  // namespace ctrlstruct
