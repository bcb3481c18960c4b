#pragma once

#include <stdexcept>
#include <string>

namespace icft {

// Error taxonomy. Tests match on concrete types, so keep them distinct.
struct dim_error : std::runtime_error {
    explicit dim_error(const std::string& m) : std::runtime_error("dimension error: " + m) {}
};

struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& m) : std::runtime_error("numeric error: " + m) {}
};

struct contract_error : std::runtime_error {
    explicit contract_error(const std::string& m) : std::runtime_error("contract error: " + m) {}
};

struct config_error : std::runtime_error {
    explicit config_error(const std::string& m) : std::runtime_error("config error: " + m) {}
};

struct context_length_error : std::runtime_error {
    explicit context_length_error(const std::string& m)
        : std::runtime_error("context length error: " + m) {}
};

struct validation_error : std::runtime_error {
    explicit validation_error(const std::string& m) : std::runtime_error("validation error: " + m) {}
};

struct io_error : std::runtime_error {
    explicit io_error(const std::string& m) : std::runtime_error("io error: " + m) {}
};

}  // namespace icft
