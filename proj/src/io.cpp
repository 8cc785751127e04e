#include "mvit/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace mvit {

static_assert(std::endian::native == std::endian::little,
              "payloads are little-endian; big-endian hosts are unsupported");

namespace {

std::vector<char> read_all_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file: " + path);
    in.seekg(0, std::ios::end);
    auto n = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<char> buf(static_cast<size_t>(n));
    if (n > 0) in.read(buf.data(), n);
    if (!in) throw DataError("failed reading file: " + path);
    return buf;
}

void write_all_bytes(const std::string& path, const void* data, size_t n) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write file: " + path);
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out) throw DataError("failed writing file: " + path);
}

}  // namespace

void write_grid(const std::string& base_path, const GridHeader& header,
                const std::vector<float>& payload) {
    int64_t expect = 1;
    for (int64_t d : header.dims) expect *= d;
    if (expect != static_cast<int64_t>(payload.size()))
        throw ShapeError("write_grid: payload size does not match dims");
    nlohmann::json j;
    j["kind"] = header.kind;
    j["dims"] = header.dims;
    j["dtype"] = "float32";
    j["endianness"] = "little";
    j["spacing"] = header.spacing;
    write_text_file(base_path + ".json", j.dump(2) + "\n");
    write_all_bytes(base_path + ".raw", payload.data(), payload.size() * sizeof(float));
}

std::pair<GridHeader, std::vector<float>> read_grid(const std::string& base_path) {
    if (!std::filesystem::exists(base_path + ".json"))
        throw DataError("missing grid header: " + base_path + ".json");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(base_path + ".json"));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("bad grid header " + base_path + ".json: " + e.what());
    }
    GridHeader h;
    h.kind = j.value("kind", "volume");
    h.dims = j.at("dims").get<std::vector<int64_t>>();
    if (j.value("dtype", "float32") != "float32")
        throw DataError("unsupported dtype in " + base_path + ".json");
    if (j.value("endianness", "little") != "little")
        throw DataError("unsupported endianness in " + base_path + ".json");
    if (j.contains("spacing")) {
        auto sp = j["spacing"].get<std::vector<double>>();
        for (size_t i = 0; i < 3 && i < sp.size(); ++i) h.spacing[i] = sp[i];
    }
    int64_t expect = 1;
    for (int64_t d : h.dims) {
        if (d <= 0) throw DataError("nonpositive dim in " + base_path + ".json");
        expect *= d;
    }
    auto bytes = read_all_bytes(base_path + ".raw");
    if (static_cast<int64_t>(bytes.size()) != expect * static_cast<int64_t>(sizeof(float)))
        throw DataError("truncated payload: " + base_path + ".raw (" +
                        std::to_string(bytes.size()) + " bytes, expected " +
                        std::to_string(expect * sizeof(float)) + ")");
    std::vector<float> payload(static_cast<size_t>(expect));
    std::memcpy(payload.data(), bytes.data(), bytes.size());
    for (float v : payload)
        if (!std::isfinite(v))
            throw DataError("non-finite element in " + base_path + ".raw");
    return {h, payload};
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::string header = ckpt.header.dump();
    std::vector<char> buf;
    auto push = [&buf](const void* p, size_t n) {
        const char* c = static_cast<const char*>(p);
        buf.insert(buf.end(), c, c + n);
    };
    push("MV2C", 4);
    uint32_t version = 1;
    push(&version, 4);
    uint64_t hlen = header.size();
    push(&hlen, 8);
    push(header.data(), header.size());
    push(ckpt.payload.data(), ckpt.payload.size() * sizeof(float));
    uint64_t sum = fnv1a64(buf.data(), buf.size());
    push(&sum, 8);
    write_all_bytes(path, buf.data(), buf.size());
}

Checkpoint read_checkpoint(const std::string& path) {
    if (!std::filesystem::exists(path))
        throw MissingArtifactError("missing checkpoint: " + path);
    auto buf = read_all_bytes(path);
    if (buf.size() < 24) throw DataError("checkpoint too small: " + path);
    if (std::memcmp(buf.data(), "MV2C", 4) != 0)
        throw DataError("bad checkpoint magic: " + path);
    uint32_t version;
    std::memcpy(&version, buf.data() + 4, 4);
    if (version != 1) throw DataError("unsupported checkpoint version in " + path);
    uint64_t hlen;
    std::memcpy(&hlen, buf.data() + 8, 8);
    if (16 + hlen + 8 > buf.size()) throw DataError("truncated checkpoint header: " + path);
    uint64_t stored;
    std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
    uint64_t computed = fnv1a64(buf.data(), buf.size() - 8);
    if (stored != computed) throw DataError("checkpoint checksum mismatch: " + path);
    Checkpoint ckpt;
    try {
        ckpt.header = nlohmann::json::parse(
            std::string(buf.data() + 16, buf.data() + 16 + hlen));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("bad checkpoint header JSON: ") + e.what());
    }
    size_t payload_bytes = buf.size() - 8 - 16 - static_cast<size_t>(hlen);
    if (payload_bytes % sizeof(float)) throw DataError("ragged checkpoint payload: " + path);
    ckpt.payload.resize(payload_bytes / sizeof(float));
    std::memcpy(ckpt.payload.data(), buf.data() + 16 + hlen, payload_bytes);
    return ckpt;
}

void write_text_file(const std::string& path, const std::string& content) {
    write_all_bytes(path, content.data(), content.size());
}

std::string read_text_file(const std::string& path) {
    auto b = read_all_bytes(path);
    return std::string(b.begin(), b.end());
}

}  // namespace mvit
