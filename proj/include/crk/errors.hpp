#pragma once

#include <stdexcept>
#include <string>

namespace crk {

// Thrown for malformed inputs, violated file-format contracts and bad
// configuration. The CLI maps it to exit code 2; every other exception is an
// internal error (exit code 1).
class InputError : public std::runtime_error {
public:
    explicit InputError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace crk
