#pragma once

#include <stdexcept>
#include <string>

namespace pmnet {

// Error kinds map onto CLI exit codes: Usage -> 1, everything else -> 2.
enum class ErrorKind {
    Usage,
    Shape,
    Parse,
    Format,
    Io,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

struct UsageError : Error {
    explicit UsageError(const std::string& message) : Error(ErrorKind::Usage, message) {}
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& message) : Error(ErrorKind::Shape, message) {}
};

struct ParseError : Error {
    explicit ParseError(const std::string& message) : Error(ErrorKind::Parse, message) {}
};

struct FormatError : Error {
    explicit FormatError(const std::string& message) : Error(ErrorKind::Format, message) {}
};

struct IoError : Error {
    explicit IoError(const std::string& message) : Error(ErrorKind::Io, message) {}
};

}  // namespace pmnet
