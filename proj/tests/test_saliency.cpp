#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mvit/io.hpp"
#include "mvit/rng.hpp"
#include "mvit/saliency.hpp"

using namespace mvit;
namespace fs = std::filesystem;

namespace {

AttentionEntry entry(const std::vector<std::vector<double>>& rows, bool kv_primary,
                     const std::string& stream = "fused") {
    Tensor m({static_cast<int64_t>(rows.size()), static_cast<int64_t>(rows[0].size())});
    for (size_t i = 0; i < rows.size(); ++i)
        for (size_t j = 0; j < rows[i].size(); ++j)
            m.at(static_cast<int64_t>(i), static_cast<int64_t>(j)) = rows[i][j];
    return {stream, 0, 0, m, kv_primary};
}

}  // namespace

TEST_CASE("token_attention_scores: uniform, column-mean, and sum-to-one") {
    AttentionRecord rec;
    rec.primary_tokens = 2;
    rec.entries.push_back(entry({{0.5, 0.5}, {0.5, 0.5}}, true));
    auto s = token_attention_scores(rec);
    CHECK(s[0] == doctest::Approx(0.5));
    CHECK(s[1] == doctest::Approx(0.5));

    AttentionRecord rec2;
    rec2.primary_tokens = 2;
    rec2.entries.push_back(entry({{1.0, 0.0}, {1.0, 0.0}}, true));
    auto s2 = token_attention_scores(rec2);
    CHECK(s2[0] == doctest::Approx(1.0));
    CHECK(s2[1] == doctest::Approx(0.0));

    // a mix of matrices, including non-primary ones that must be ignored
    AttentionRecord rec3;
    rec3.primary_tokens = 3;
    rec3.entries.push_back(entry({{0.2, 0.3, 0.5}, {0.1, 0.8, 0.1}, {0.4, 0.4, 0.2}}, true));
    rec3.entries.push_back(entry({{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}}, true, "cross"));
    rec3.entries.push_back(entry({{0.9, 0.1}, {0.5, 0.5}}, false, "fnc"));
    auto s3 = token_attention_scores(rec3);
    double total = 0.0;
    for (double v : s3) {
        CHECK(v >= 0.0);
        total += v;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9));

    AttentionRecord empty;
    empty.primary_tokens = 2;
    CHECK_THROWS_AS(token_attention_scores(empty), DataError);
    AttentionRecord none;
    none.primary_tokens = 0;
    CHECK_THROWS_AS(token_attention_scores(none), DataError);
}

TEST_CASE("scores sum to one for every stochastic record (property)") {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        AttentionRecord rec;
        rec.primary_tokens = static_cast<int64_t>(rng.uniform_int(2, 8));
        int n_mats = static_cast<int>(rng.uniform_int(1, 6));
        for (int m = 0; m < n_mats; ++m) {
            int64_t nq = rng.uniform_int(1, 7);
            Tensor mat({nq, rec.primary_tokens});
            for (int64_t i = 0; i < nq; ++i) {
                double row_sum = 0.0;
                for (int64_t j = 0; j < rec.primary_tokens; ++j) {
                    mat.at(i, j) = rng.uniform(0.0, 1.0);
                    row_sum += mat.at(i, j);
                }
                for (int64_t j = 0; j < rec.primary_tokens; ++j) mat.at(i, j) /= row_sum;
            }
            rec.entries.push_back({"fused", 0, m, mat, true});
        }
        auto s = token_attention_scores(rec);
        double total = 0.0;
        for (double v : s) {
            CHECK(v >= 0.0);
            total += v;
        }
        CHECK(std::fabs(total - 1.0) < 1e-9);
    }
}

TEST_CASE("scores_to_volume: dims, bounds, monotone blocks, degenerate fallback") {
    std::vector<PatchBlock> blocks = {{0, 1, 0, 2, 0, 2}, {1, 2, 0, 2, 0, 2}};
    std::array<int64_t, 3> grid{2, 2, 2};
    std::array<int64_t, 3> ambient{8, 8, 8};

    SUBCASE("two tokens with scores (1,0): block interiors stay ordered") {
        auto sal = scores_to_volume({1.0, 0.0}, blocks, grid, ambient);
        CHECK(sal.dims == ambient);
        CHECK_FALSE(sal.degenerate);
        float lo = 1.0f, hi = 0.0f;
        for (float v : sal.values) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        CHECK(lo == 0.0f);
        CHECK(hi == 1.0f);  // max exactly 1 after normalization
        // interior of block 1 (low z) > interior of block 2 (high z)
        CHECK(sal.at(1, 4, 4) > sal.at(6, 4, 4));
    }

    SUBCASE("constant scores trip the flagged 0.5 fallback") {
        auto sal = scores_to_volume({0.5, 0.5}, blocks, grid, ambient);
        CHECK(sal.degenerate);
        for (float v : sal.values) CHECK(v == 0.5f);
    }

    SUBCASE("single token covering the whole grid is degenerate") {
        auto sal = scores_to_volume({1.0}, {{0, 2, 0, 2, 0, 2}}, grid, ambient);
        CHECK(sal.degenerate);
    }

    SUBCASE("length mismatch is rejected") {
        CHECK_THROWS_AS(scores_to_volume({1.0}, blocks, grid, ambient), ShapeError);
    }
}

TEST_CASE("export_overlay writes container and slice images") {
    fs::path dir = fs::temp_directory_path() / "mvit_saliency";
    fs::remove_all(dir);
    fs::create_directories(dir);

    Rng rng(5);
    StructuralVolume v;
    v.dims = {6, 5, 4};
    v.voxels.resize(120);
    for (auto& x : v.voxels) x = static_cast<float>(rng.uniform01());

    SaliencyVolume s;
    s.dims = v.dims;
    s.values.assign(120, 0.0f);
    for (size_t i = 0; i < 60; ++i) s.values[i] = 1.0f;

    std::string base = (dir / "subj").string();
    auto files = export_overlay(v, s, base, {1, 3});
    CHECK(files.size() == 4);  // json + raw + 2 slices
    for (const auto& f : files) CHECK(fs::exists(f));

    // saliency container round trips bitwise
    auto [hdr, payload] = read_grid(base + "_saliency");
    CHECK(hdr.kind == "saliency");
    CHECK(payload == s.values);

    // all-zero saliency renders pure grayscale (r == g == b == gray)
    SaliencyVolume zero;
    zero.dims = v.dims;
    zero.values.assign(120, 0.0f);
    auto files2 = export_overlay(v, zero, (dir / "plain").string(), {2});
    std::ifstream ppm(files2.back(), std::ios::binary);
    std::string magic, wh1, wh2, maxv;
    ppm >> magic >> wh1 >> wh2 >> maxv;
    CHECK(magic == "P6");
    ppm.get();  // single whitespace after header
    for (int64_t y = 0; y < v.dims[1]; ++y)
        for (int64_t x = 0; x < v.dims[2]; ++x) {
            char rgb[3];
            ppm.read(rgb, 3);
            CHECK(rgb[0] == rgb[1]);
            CHECK(rgb[1] == rgb[2]);
            auto expect = static_cast<unsigned char>(
                std::lround(255.0 * std::clamp<double>(v.at(2, y, x), 0.0, 1.0)));
            CHECK(static_cast<unsigned char>(rgb[0]) == expect);
        }

    CHECK_THROWS_AS(export_overlay(v, s, base, {99}), ConfigError);
    SaliencyVolume bad;
    bad.dims = {1, 1, 1};
    bad.values = {0.0f};
    CHECK_THROWS_AS(export_overlay(v, bad, base, {}), ShapeError);
}

TEST_CASE("roi_saliency_split separates inside from outside") {
    RoiSpec roi;
    roi.center = {0.5, 0.5, 0.5};
    roi.radii = {0.3, 0.3, 0.3};
    SaliencyVolume s;
    s.dims = {10, 10, 10};
    s.values.assign(1000, 0.0f);
    for (int64_t z = 0; z < 10; ++z)
        for (int64_t y = 0; y < 10; ++y)
            for (int64_t x = 0; x < 10; ++x)
                if (roi.contains(s.dims, z, y, x))
                    s.values[static_cast<size_t>((z * 10 + y) * 10 + x)] = 1.0f;
    auto [inside, outside] = roi_saliency_split(s, roi);
    CHECK(inside == doctest::Approx(1.0));
    CHECK(outside == doctest::Approx(0.0));
}
