#pragma once

#include <stdexcept>
#include <string>

namespace bdet {

// Bad input files, malformed schemas, missing datasets. CLI exit code 2.
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf values, diverged training, failed numeric checks. CLI exit code 3.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace bdet
