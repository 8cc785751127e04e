#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace mvit {

// Error taxonomy used across the library. The CLI maps these onto exit
// codes: ConfigError -> 1, MissingArtifactError -> 2, NumericError -> 3.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct MissingArtifactError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 1469598103934665603ULL);
uint64_t fnv1a64(const std::string& s, uint64_t h = 1469598103934665603ULL);
std::string hex64(uint64_t v);

// splitmix64 finalizer; used to derive independent RNG streams.
uint64_t mix64(uint64_t x);
uint64_t derive_seed(uint64_t seed, uint64_t stream);
uint64_t derive_seed(uint64_t seed, const std::string& tag);

// Worker count for sample-level parallelism. MV2_WORKERS overrides;
// defaults to min(4, hardware_concurrency).
int worker_count();

// Static-partition parallel map over [0, n). Results must be written to
// disjoint, index-addressed slots so the outcome is identical for any
// worker count.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

}  // namespace mvit
