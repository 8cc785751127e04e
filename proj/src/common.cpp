#include "mvit/common.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace mvit {

uint64_t fnv1a64(const void* data, size_t n, uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

uint64_t fnv1a64(const std::string& s, uint64_t h) {
    return fnv1a64(s.data(), s.size(), h);
}

std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

uint64_t derive_seed(uint64_t seed, uint64_t stream) {
    return mix64(mix64(seed) ^ mix64(stream * 0x9e3779b97f4a7c15ULL + 1));
}

uint64_t derive_seed(uint64_t seed, const std::string& tag) {
    return derive_seed(seed, fnv1a64(tag));
}

int worker_count() {
    if (const char* env = std::getenv("MV2_WORKERS")) {
        int v = std::atoi(env);
        if (v >= 1) return v;
    }
    unsigned hc = std::thread::hardware_concurrency();
    if (hc == 0) hc = 1;
    return static_cast<int>(std::min(4u, hc));
}

void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
    if (n <= 0) return;
    int workers = worker_count();
    if (workers <= 1 || n == 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    workers = static_cast<int>(std::min<int64_t>(workers, n));
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            for (int64_t i = w; i < n; i += workers) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace mvit
