#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mvit/common.hpp"

#include <json.hpp>

namespace mvit {

// On-disk container for grids: "<base>.json" sidecar header plus
// "<base>.raw" little-endian float32 payload. Round trips are bitwise.
struct GridHeader {
    std::string kind;             // "volume" | "fnc" | "saliency"
    std::vector<int64_t> dims;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
};

void write_grid(const std::string& base_path, const GridHeader& header,
                const std::vector<float>& payload);
// Throws DataError on missing file, truncated payload, or non-finite values.
std::pair<GridHeader, std::vector<float>> read_grid(const std::string& base_path);

// Single-file checkpoint container:
//   magic "MV2C" | u32 version | u64 header_len | header JSON (UTF-8)
//   | float32 payload | u64 fnv1a64 checksum of all preceding bytes
struct Checkpoint {
    nlohmann::json header;        // kind, descriptor, params[], config_hash, extras
    std::vector<float> payload;
};

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);  // verifies checksum

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace mvit
