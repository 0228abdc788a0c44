#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmoe {

// Error taxonomy; the CLI maps these onto process exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct ValueError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};

// SHA-256 of a byte buffer, as a lowercase hex string. Used to prove frozen
// tensors stay untouched across training.
std::string sha256_hex(const void* data, size_t len);

inline std::string sha256_hex(const std::vector<double>& v) {
    return sha256_hex(v.data(), v.size() * sizeof(double));
}

std::string join_path(const std::string& dir, const std::string& leaf);

}  // namespace mmoe
