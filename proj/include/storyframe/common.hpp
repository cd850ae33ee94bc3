#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace sf {

// Bad inputs, shapes, file contents. Maps to CLI exit code 1.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Corpus / request / checkpoint files that fail to parse.
struct ParseError : ValidationError {
    using ValidationError::ValidationError;
};

// Non-finite losses or gradients during optimization.
struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);
std::string sha256_file_hex(const std::string& path);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);

// Worker cap for read-only fan-out (decoding, metrics). Honors MD_THREADS.
int worker_count();

// Runs fn(i) for i in [0, n), fanned out over worker_count() threads.
// Work items must be independent; results must not depend on scheduling.
void parallel_for(size_t n, const std::function<void(size_t)>& fn);

}  // namespace sf
