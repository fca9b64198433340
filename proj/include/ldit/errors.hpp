#pragma once

#include <stdexcept>
#include <string>

namespace ldit {

// Bad values in a config file or construction parameters. Maps to exit code 2.
struct config_error : std::runtime_error {
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or corrupted on-disk artifact (checkpoint, dataset container).
struct format_error : std::runtime_error {
    explicit format_error(const std::string& msg) : std::runtime_error(msg) {}
};

// A pipeline stage was invoked before its prerequisites exist. Maps to exit code 2.
struct stage_error : std::runtime_error {
    explicit stage_error(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace ldit
