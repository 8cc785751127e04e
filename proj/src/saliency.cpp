#include "mvit/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "mvit/io.hpp"

namespace mvit {

std::vector<double> token_attention_scores(const AttentionRecord& record) {
    if (record.primary_tokens <= 0)
        throw DataError("token_attention_scores: record has no primary-stream tokens");
    std::vector<double> scores(static_cast<size_t>(record.primary_tokens), 0.0);
    int64_t used = 0;
    for (const auto& e : record.entries) {
        if (!e.kv_is_primary) continue;
        if (e.matrix.rank() != 2 || e.matrix.dim(1) != record.primary_tokens)
            throw ShapeError("token_attention_scores: key-side size mismatch");
        int64_t nq = e.matrix.dim(0), nk = e.matrix.dim(1);
        for (int64_t j = 0; j < nk; ++j) {
            double col = 0.0;
            for (int64_t i = 0; i < nq; ++i) col += e.matrix.at(i, j);
            scores[static_cast<size_t>(j)] += col / static_cast<double>(nq);
        }
        ++used;
    }
    if (used == 0)
        throw DataError("token_attention_scores: no attention matrices target the "
                        "primary stream");
    for (auto& s : scores) s /= static_cast<double>(used);
    return scores;
}

namespace {

double trilinear(const std::vector<double>& grid, const std::array<int64_t, 3>& g,
                 double fz, double fy, double fx) {
    auto at = [&](int64_t z, int64_t y, int64_t x) {
        return grid[static_cast<size_t>((z * g[1] + y) * g[2] + x)];
    };
    int64_t z0 = static_cast<int64_t>(fz), y0 = static_cast<int64_t>(fy),
            x0 = static_cast<int64_t>(fx);
    int64_t z1 = std::min(z0 + 1, g[0] - 1), y1 = std::min(y0 + 1, g[1] - 1),
            x1 = std::min(x0 + 1, g[2] - 1);
    double tz = fz - static_cast<double>(z0), ty = fy - static_cast<double>(y0),
           tx = fx - static_cast<double>(x0);
    double c00 = at(z0, y0, x0) * (1 - tx) + at(z0, y0, x1) * tx;
    double c01 = at(z0, y1, x0) * (1 - tx) + at(z0, y1, x1) * tx;
    double c10 = at(z1, y0, x0) * (1 - tx) + at(z1, y0, x1) * tx;
    double c11 = at(z1, y1, x0) * (1 - tx) + at(z1, y1, x1) * tx;
    double c0 = c00 * (1 - ty) + c01 * ty;
    double c1 = c10 * (1 - ty) + c11 * ty;
    return c0 * (1 - tz) + c1 * tz;
}

}  // namespace

SaliencyVolume scores_to_volume(const std::vector<double>& scores,
                                const std::vector<PatchBlock>& patch_map,
                                const std::array<int64_t, 3>& grid_dims,
                                const std::array<int64_t, 3>& ambient_dims) {
    if (scores.size() != patch_map.size())
        throw ShapeError("scores_to_volume: scores/patch map length mismatch");
    if (patch_map.empty()) throw ShapeError("scores_to_volume: empty patch map");

    SaliencyVolume out;
    out.dims = ambient_dims;
    out.values.assign(
        static_cast<size_t>(ambient_dims[0] * ambient_dims[1] * ambient_dims[2]), 0.0f);

    double lo = scores[0], hi = scores[0];
    for (double s : scores) {
        lo = std::min(lo, s);
        hi = std::max(hi, s);
    }
    if (!(hi > lo)) {
        out.degenerate = true;
        for (auto& v : out.values) v = 0.5f;
        return out;
    }

    std::vector<double> grid(static_cast<size_t>(grid_dims[0] * grid_dims[1] * grid_dims[2]),
                             0.0);
    for (size_t t = 0; t < patch_map.size(); ++t) {
        const auto& b = patch_map[t];
        for (int64_t z = b.z0; z < b.z1; ++z)
            for (int64_t y = b.y0; y < b.y1; ++y)
                for (int64_t x = b.x0; x < b.x1; ++x)
                    grid[static_cast<size_t>((z * grid_dims[1] + y) * grid_dims[2] + x)] =
                        scores[t];
    }

    size_t idx = 0;
    for (int64_t z = 0; z < ambient_dims[0]; ++z)
        for (int64_t y = 0; y < ambient_dims[1]; ++y)
            for (int64_t x = 0; x < ambient_dims[2]; ++x, ++idx) {
                double fz = ambient_dims[0] == 1
                                ? 0.0
                                : static_cast<double>(z) *
                                      static_cast<double>(grid_dims[0] - 1) /
                                      static_cast<double>(ambient_dims[0] - 1);
                double fy = ambient_dims[1] == 1
                                ? 0.0
                                : static_cast<double>(y) *
                                      static_cast<double>(grid_dims[1] - 1) /
                                      static_cast<double>(ambient_dims[1] - 1);
                double fx = ambient_dims[2] == 1
                                ? 0.0
                                : static_cast<double>(x) *
                                      static_cast<double>(grid_dims[2] - 1) /
                                      static_cast<double>(ambient_dims[2] - 1);
                out.values[idx] = static_cast<float>(trilinear(grid, grid_dims, fz, fy, fx));
            }

    float vlo = out.values[0], vhi = out.values[0];
    for (float v : out.values) {
        vlo = std::min(vlo, v);
        vhi = std::max(vhi, v);
    }
    float scale = 1.0f / (vhi - vlo);
    for (auto& v : out.values) v = (v - vlo) * scale;
    return out;
}

std::vector<std::string> export_overlay(const StructuralVolume& v, const SaliencyVolume& s,
                                        const std::string& base_path,
                                        const std::vector<int64_t>& slices) {
    if (v.dims != s.dims) throw ShapeError("export_overlay: volume/saliency dims differ");
    std::vector<std::string> written;

    GridHeader h;
    h.kind = "saliency";
    h.dims = {s.dims[0], s.dims[1], s.dims[2]};
    h.spacing = v.spacing;
    write_grid(base_path + "_saliency", h, s.values);
    written.push_back(base_path + "_saliency.json");
    written.push_back(base_path + "_saliency.raw");

    for (int64_t z : slices) {
        if (z < 0 || z >= v.dims[0])
            throw ConfigError("export_overlay: slice index out of range");
        std::string path = base_path + "_slice_" + std::to_string(z) + ".ppm";
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write slice image: " + path);
        out << "P6\n" << v.dims[2] << " " << v.dims[1] << "\n255\n";
        for (int64_t y = 0; y < v.dims[1]; ++y)
            for (int64_t x = 0; x < v.dims[2]; ++x) {
                double gray = 255.0 * std::clamp<double>(v.at(z, y, x), 0.0, 1.0);
                double sv = std::clamp<double>(s.at(z, y, x), 0.0, 1.0);
                double w = 0.6 * sv;  // monotone red-orange ramp over grayscale
                unsigned char rgb[3] = {
                    static_cast<unsigned char>(std::lround((1.0 - w) * gray + w * 255.0)),
                    static_cast<unsigned char>(std::lround((1.0 - w) * gray + w * 64.0)),
                    static_cast<unsigned char>(std::lround((1.0 - w) * gray)),
                };
                out.write(reinterpret_cast<const char*>(rgb), 3);
            }
        if (!out) throw DataError("failed writing slice image: " + path);
        written.push_back(path);
    }
    return written;
}

std::pair<double, double> roi_saliency_split(const SaliencyVolume& s, const RoiSpec& roi) {
    double in_sum = 0.0, out_sum = 0.0;
    int64_t in_n = 0, out_n = 0;
    for (int64_t z = 0; z < s.dims[0]; ++z)
        for (int64_t y = 0; y < s.dims[1]; ++y)
            for (int64_t x = 0; x < s.dims[2]; ++x) {
                if (roi.contains(s.dims, z, y, x)) {
                    in_sum += s.at(z, y, x);
                    ++in_n;
                } else {
                    out_sum += s.at(z, y, x);
                    ++out_n;
                }
            }
    return {in_n ? in_sum / static_cast<double>(in_n) : 0.0,
            out_n ? out_sum / static_cast<double>(out_n) : 0.0};
}

}  // namespace mvit
