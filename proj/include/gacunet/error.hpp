#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gacunet {

// Each error family maps to one CLI exit code (see tools/gacunet.cpp).
class Error : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
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

class ParseError : public DataError {
   public:
    ParseError(const std::string& what, std::size_t offset)
        : DataError(what + " (at byte offset " + std::to_string(offset) + ")"), message_(what), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }
    const std::string& message() const noexcept { return message_; }

   private:
    std::string message_;
    std::size_t offset_;
};

class NumericError : public Error {
   public:
    using Error::Error;
};

/// A frozen artifact changed when it must not have.
class InvariantError : public Error {
   public:
    using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

}  // namespace gacunet
