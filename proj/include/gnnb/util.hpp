#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gnnb {

/// Input could not be parsed; message names the offending field.
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A domain invariant was violated (asymmetric adjacency, self loop, ...).
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Bad argument to an operation (empty mask, ratios not summing to 1, ...).
struct ArgumentError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// NaN/Inf appeared, an SVD failed to converge, or training diverged.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// SHA-256 of a byte string, lowercase hex.
std::string sha256_hex(std::string_view bytes);

/// Derives an independent 64-bit seed from a base seed and a purpose label.
/// Used to hand every task in a run matrix its own RNG stream.
uint64_t derive_seed(uint64_t base, std::string_view purpose);

inline std::mt19937_64 make_rng(uint64_t base, std::string_view purpose) {
    return std::mt19937_64(derive_seed(base, purpose));
}

/// Shortest decimal string that round-trips the double. Keeps CSV and JSON
/// output byte-stable across runs.
std::string format_double(double v);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);
bool file_exists(const std::string& path);

}  // namespace gnnb
