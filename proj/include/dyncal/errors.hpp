#pragma once

#include <stdexcept>
#include <string>

namespace dyncal {

// Bad user input at the interface level (flags, config values, method
// selection). CLI maps this to exit code 1.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed or inconsistent data (files, stores, dimension mismatches).
// CLI maps this to exit code 2.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace dyncal
