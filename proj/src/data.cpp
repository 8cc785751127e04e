#include "mvit/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <mutex>
#include <set>

#include "mvit/io.hpp"
#include "mvit/rng.hpp"

namespace mvit {

Tensor StructuralVolume::as_tensor() const {
    Tensor t({1, dims[0], dims[1], dims[2]});
    for (int64_t i = 0; i < numel(); ++i) t[i] = static_cast<double>(voxels[static_cast<size_t>(i)]);
    return t;
}

Tensor FNCMatrix::as_tensor() const {
    Tensor t({c, c});
    for (int64_t i = 0; i < c * c; ++i) t[i] = static_cast<double>(entries[static_cast<size_t>(i)]);
    return t;
}

FNCMatrix validate_fnc(FNCMatrix m) {
    const double tol = 1e-6;
    for (int64_t i = 0; i < m.c; ++i) {
        for (int64_t j = 0; j < m.c; ++j) {
            double v = m.at(i, j);
            if (v < -1.0 || v > 1.0)
                throw DataError("FNC entry out of [-1,1] at (" + std::to_string(i) + "," +
                                std::to_string(j) + "): " + std::to_string(v));
            double asym = std::fabs(v - m.at(j, i));
            if (asym > tol)
                throw DataError("FNC asymmetry " + std::to_string(asym) + " exceeds 1e-6 at (" +
                                std::to_string(i) + "," + std::to_string(j) + ")");
        }
        if (std::fabs(m.at(i, i) - 1.0) > tol)
            throw DataError("FNC diagonal not 1 at index " + std::to_string(i));
    }
    // symmetrize residual round-off
    for (int64_t i = 0; i < m.c; ++i)
        for (int64_t j = i + 1; j < m.c; ++j) {
            float s = static_cast<float>((static_cast<double>(m.at(i, j)) +
                                          static_cast<double>(m.at(j, i))) / 2.0);
            m.at(i, j) = s;
            m.at(j, i) = s;
        }
    return m;
}

std::string provenance_name(Provenance p) {
    switch (p) {
        case Provenance::Real: return "real";
        case Provenance::SyntheticGenerated: return "synthetic-generated";
        case Provenance::LdmAugmented: return "ldm-augmented";
    }
    return "unknown";
}

Provenance provenance_from(const std::string& s) {
    if (s == "real") return Provenance::Real;
    if (s == "synthetic-generated") return Provenance::SyntheticGenerated;
    if (s == "ldm-augmented") return Provenance::LdmAugmented;
    throw DataError("unknown provenance: " + s);
}

std::string gen_mode_name(GenMode m) { return m == GenMode::Additive ? "additive" : "xor"; }

GenMode gen_mode_from(const std::string& s) {
    if (s == "additive") return GenMode::Additive;
    if (s == "xor") return GenMode::Xor;
    throw ConfigError("unknown generator mode: " + s);
}

std::array<int64_t, 4> GeneratorConfig::resolved_fnc_block() const {
    if (fnc_block[0] >= 0) return fnc_block;
    // off-diagonal block scaled to the matrix size; reproduces
    // rows [2,6) x cols [9,13) at C = 16
    int64_t span = std::max<int64_t>(1, c / 4);
    int64_t r0 = c / 8;
    int64_t c0 = (9 * c) / 16;
    return {r0, r0 + span, c0, std::min(c, c0 + span)};
}

bool RoiSpec::contains(const std::array<int64_t, 3>& dims, int64_t z, int64_t y,
                       int64_t x) const {
    double dz = (static_cast<double>(z) / static_cast<double>(dims[0] - 1) - center[0]) / radii[0];
    double dy = (static_cast<double>(y) / static_cast<double>(dims[1] - 1) - center[1]) / radii[1];
    double dx = (static_cast<double>(x) / static_cast<double>(dims[2] - 1) - center[2]) / radii[2];
    return dz * dz + dy * dy + dx * dx <= 1.0;
}

const SubjectRecord* DatasetManifest::find(const std::string& id) const {
    for (const auto& s : subjects)
        if (s.id == id) return &s;
    return nullptr;
}

std::vector<std::string> FoldAssignment::members(int fold) const {
    std::vector<std::string> out;
    for (const auto& [id, f] : fold_of)
        if (f == fold) out.push_back(id);
    return out;  // map iteration is id-sorted, hence deterministic
}

StructuralVolume load_volume(const std::string& base_path,
                             const std::array<int64_t, 3>& expected_dims) {
    auto [header, payload] = read_grid(base_path);
    if (header.dims.size() != 3)
        throw DataError("volume header must have 3 dims: " + base_path);
    for (int i = 0; i < 3; ++i)
        if (header.dims[static_cast<size_t>(i)] != expected_dims[static_cast<size_t>(i)])
            throw DataError("volume dim mismatch in " + base_path + ": got " +
                            std::to_string(header.dims[static_cast<size_t>(i)]) +
                            ", expected " +
                            std::to_string(expected_dims[static_cast<size_t>(i)]) +
                            " at axis " + std::to_string(i));
    StructuralVolume v;
    v.dims = expected_dims;
    v.spacing = header.spacing;
    v.voxels = std::move(payload);
    return v;
}

void write_volume(const std::string& base_path, const StructuralVolume& v) {
    GridHeader h;
    h.kind = "volume";
    h.dims = {v.dims[0], v.dims[1], v.dims[2]};
    h.spacing = v.spacing;
    write_grid(base_path, h, v.voxels);
}

FNCMatrix load_fnc(const std::string& base_path, int64_t c) {
    auto [header, payload] = read_grid(base_path);
    if (header.dims.size() != 2 || header.dims[0] != c || header.dims[1] != c)
        throw DataError("FNC dim mismatch in " + base_path + ", expected " +
                        std::to_string(c) + "x" + std::to_string(c));
    FNCMatrix m;
    m.c = c;
    m.entries = std::move(payload);
    return validate_fnc(std::move(m));
}

void write_fnc(const std::string& base_path, const FNCMatrix& m) {
    GridHeader h;
    h.kind = "fnc";
    h.dims = {m.c, m.c};
    write_grid(base_path, h, m.entries);
}

StructuralVolume normalize_volume(const StructuralVolume& v) {
    float lo = v.voxels[0], hi = v.voxels[0];
    for (float x : v.voxels) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    if (!(hi > lo)) throw DataError("normalize_volume: constant volume (max == min)");
    StructuralVolume out = v;
    float scale = 1.0f / (hi - lo);
    for (auto& x : out.voxels) x = (x - lo) * scale;
    return out;
}

namespace {

// Smooth per-subject field: low-resolution Gaussian grid, trilinear upsample.
void add_smooth_noise(StructuralVolume& v, double amplitude, Rng& rng) {
    const int64_t gd = 6, gh = 7, gw = 6;
    std::vector<double> grid(static_cast<size_t>(gd * gh * gw));
    for (auto& g : grid) g = rng.normal();
    auto gat = [&](int64_t z, int64_t y, int64_t x) {
        return grid[static_cast<size_t>((z * gh + y) * gw + x)];
    };
    for (int64_t z = 0; z < v.dims[0]; ++z)
        for (int64_t y = 0; y < v.dims[1]; ++y)
            for (int64_t x = 0; x < v.dims[2]; ++x) {
                double fz = static_cast<double>(z) / static_cast<double>(v.dims[0] - 1) * (gd - 1);
                double fy = static_cast<double>(y) / static_cast<double>(v.dims[1] - 1) * (gh - 1);
                double fx = static_cast<double>(x) / static_cast<double>(v.dims[2] - 1) * (gw - 1);
                int64_t z0 = static_cast<int64_t>(fz), y0 = static_cast<int64_t>(fy),
                        x0 = static_cast<int64_t>(fx);
                int64_t z1 = std::min(z0 + 1, gd - 1), y1 = std::min(y0 + 1, gh - 1),
                        x1 = std::min(x0 + 1, gw - 1);
                double tz = fz - z0, ty = fy - y0, tx = fx - x0;
                double c00 = gat(z0, y0, x0) * (1 - tx) + gat(z0, y0, x1) * tx;
                double c01 = gat(z0, y1, x0) * (1 - tx) + gat(z0, y1, x1) * tx;
                double c10 = gat(z1, y0, x0) * (1 - tx) + gat(z1, y0, x1) * tx;
                double c11 = gat(z1, y1, x0) * (1 - tx) + gat(z1, y1, x1) * tx;
                double c0 = c00 * (1 - ty) + c01 * ty;
                double c1 = c10 * (1 - ty) + c11 * ty;
                v.at(z, y, x) += static_cast<float>(amplitude * (c0 * (1 - tz) + c1 * tz));
            }
}

// Fixed anatomy phantom: three Gaussian lobes over a dim background.
// Subject-independent, so it is computed once per dims and cached.
const std::vector<float>& phantom_base(const std::array<int64_t, 3>& dims) {
    static std::mutex mu;
    static std::map<std::array<int64_t, 3>, std::vector<float>> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(dims);
    if (it != cache.end()) return it->second;

    struct Blob {
        double cz, cy, cx, s, a;
    };
    const Blob blobs[] = {
        {0.35, 0.40, 0.35, 0.22, 0.55},
        {0.65, 0.42, 0.65, 0.22, 0.55},
        {0.50, 0.70, 0.50, 0.18, 0.45},
    };
    std::vector<float> base(static_cast<size_t>(dims[0] * dims[1] * dims[2]));
    size_t idx = 0;
    for (int64_t z = 0; z < dims[0]; ++z)
        for (int64_t y = 0; y < dims[1]; ++y)
            for (int64_t x = 0; x < dims[2]; ++x, ++idx) {
                double fz = static_cast<double>(z) / static_cast<double>(dims[0] - 1);
                double fy = static_cast<double>(y) / static_cast<double>(dims[1] - 1);
                double fx = static_cast<double>(x) / static_cast<double>(dims[2] - 1);
                double val = 0.08;
                for (const auto& b : blobs) {
                    double d2 = (fz - b.cz) * (fz - b.cz) + (fy - b.cy) * (fy - b.cy) +
                                (fx - b.cx) * (fx - b.cx);
                    val += b.a * std::exp(-d2 / (2.0 * b.s * b.s));
                }
                base[idx] = static_cast<float>(val);
            }
    return cache.emplace(dims, std::move(base)).first->second;
}

StructuralVolume make_subject_volume(const GeneratorConfig& cfg, double roi_shift, Rng& rng) {
    StructuralVolume v;
    v.dims = cfg.dims;
    v.spacing = {1.5, 1.5, 1.5};
    v.voxels = phantom_base(cfg.dims);

    add_smooth_noise(v, cfg.noise_volume, rng);

    if (roi_shift != 0.0) {
        for (int64_t z = 0; z < v.dims[0]; ++z)
            for (int64_t y = 0; y < v.dims[1]; ++y)
                for (int64_t x = 0; x < v.dims[2]; ++x)
                    if (cfg.roi.contains(v.dims, z, y, x))
                        v.at(z, y, x) += static_cast<float>(roi_shift);
    }
    return normalize_volume(v);
}

FNCMatrix make_subject_fnc(const GeneratorConfig& cfg, double block_shift, Rng& rng) {
    FNCMatrix m;
    m.c = cfg.c;
    m.entries.assign(static_cast<size_t>(cfg.c * cfg.c), 0.0f);
    for (int64_t i = 0; i < cfg.c; ++i) {
        m.at(i, i) = 1.0f;
        for (int64_t j = i + 1; j < cfg.c; ++j) {
            float v = static_cast<float>(rng.normal(0.0, cfg.noise_fnc));
            m.at(i, j) = v;
            m.at(j, i) = v;
        }
    }
    const auto b = cfg.resolved_fnc_block();
    for (int64_t i = b[0]; i < b[1]; ++i)
        for (int64_t j = b[2]; j < b[3]; ++j) {
            m.at(i, j) += static_cast<float>(block_shift);
            m.at(j, i) = m.at(i, j);
        }
    for (auto& e : m.entries) e = std::clamp(e, -1.0f, 1.0f);
    for (int64_t i = 0; i < cfg.c; ++i) m.at(i, i) = 1.0f;
    return m;
}

}  // namespace

DatasetManifest synthesize_dataset(int64_t n, GenMode mode,
                                   const std::array<int64_t, 3>& dims, int64_t c,
                                   uint64_t seed, const GeneratorConfig* overrides) {
    if (n < 10) throw ConfigError("synthesize_dataset: n must be >= 10");
    if (n % 2) throw ConfigError("synthesize_dataset: n must be even for balanced classes");
    GeneratorConfig cfg = overrides ? *overrides : GeneratorConfig{};
    cfg.mode = mode;
    cfg.dims = dims;
    cfg.c = c;
    // the ROI must span at least one voxel in each axis
    for (int a = 0; a < 3; ++a) {
        double r = cfg.roi.radii[static_cast<size_t>(a)] *
                   static_cast<double>(dims[static_cast<size_t>(a)] - 1);
        if (r < 1.0 || dims[static_cast<size_t>(a)] < 4)
            throw ConfigError("synthesize_dataset: ROI does not fit volume dims");
    }
    cfg.fnc_block = cfg.resolved_fnc_block();
    if (cfg.fnc_block[1] > c || cfg.fnc_block[3] > c || cfg.fnc_block[0] < 0 ||
        cfg.fnc_block[2] < cfg.fnc_block[1])
        throw ConfigError("synthesize_dataset: FNC block does not fit matrix size");

    DatasetManifest manifest;
    manifest.seed = seed;
    manifest.config = cfg;
    manifest.subjects.reserve(static_cast<size_t>(n));

    for (int64_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, static_cast<uint64_t>(i)));
        int label = static_cast<int>(i % 2);
        double vol_shift = 0.0, fnc_shift = 0.0;
        if (mode == GenMode::Additive) {
            vol_shift = label ? cfg.delta_volume : 0.0;
            fnc_shift = label ? cfg.delta_fnc : 0.0;
        } else {
            // hidden factors: a drives the volume ROI, b the FNC block;
            // label == 1 iff a*b == 1, so each factor is marginally
            // independent of the label
            int a = rng.uniform01() < 0.5 ? -1 : 1;
            int b = label ? a : -a;
            vol_shift = a * cfg.delta_volume;
            fnc_shift = b * cfg.delta_fnc;
        }
        SubjectRecord rec;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "subj-%05lld", static_cast<long long>(i));
        rec.id = buf;
        rec.label = label;
        rec.provenance = Provenance::SyntheticGenerated;
        rec.site = (i % 4 < 2) ? "site-a" : "site-b";
        rec.volume = std::make_shared<StructuralVolume>(make_subject_volume(cfg, vol_shift, rng));
        rec.fnc = std::make_shared<FNCMatrix>(make_subject_fnc(cfg, fnc_shift, rng));
        manifest.subjects.push_back(std::move(rec));
    }
    return manifest;
}

double roi_mean(const StructuralVolume& v, const RoiSpec& roi) {
    double sum = 0.0;
    int64_t count = 0;
    for (int64_t z = 0; z < v.dims[0]; ++z)
        for (int64_t y = 0; y < v.dims[1]; ++y)
            for (int64_t x = 0; x < v.dims[2]; ++x)
                if (roi.contains(v.dims, z, y, x)) {
                    sum += v.at(z, y, x);
                    ++count;
                }
    return count ? sum / static_cast<double>(count) : 0.0;
}

double fnc_block_mean(const FNCMatrix& m, const std::array<int64_t, 4>& block) {
    double sum = 0.0;
    int64_t count = 0;
    for (int64_t i = block[0]; i < block[1]; ++i)
        for (int64_t j = block[2]; j < block[3]; ++j) {
            sum += m.at(i, j);
            ++count;
        }
    return count ? sum / static_cast<double>(count) : 0.0;
}

FoldAssignment make_folds(const DatasetManifest& manifest, int k, uint64_t seed) {
    if (k < 2) throw ConfigError("make_folds: k must be >= 2");
    std::vector<std::string> by_class[2];
    for (const auto& s : manifest.subjects) {
        if (s.provenance == Provenance::LdmAugmented) continue;
        by_class[s.label].push_back(s.id);
    }
    for (int c = 0; c < 2; ++c)
        if (static_cast<int>(by_class[c].size()) < k)
            throw DataError("make_folds: class " + std::to_string(c) + " has only " +
                            std::to_string(by_class[c].size()) + " subjects, need >= " +
                            std::to_string(k));

    FoldAssignment fa;
    fa.k = k;
    // deal each class round-robin; stagger the starting fold by the
    // cumulative remainder so fold sizes stay within 1 of each other
    int start = 0;
    for (int c = 0; c < 2; ++c) {
        Rng rng(derive_seed(seed, "folds-class-" + std::to_string(c)));
        auto ids = by_class[c];
        rng.shuffle(ids);
        for (size_t i = 0; i < ids.size(); ++i)
            fa.fold_of[ids[i]] = static_cast<int>((i + static_cast<size_t>(start)) % static_cast<size_t>(k));
        start = (start + static_cast<int>(ids.size() % static_cast<size_t>(k))) % k;
    }
    return fa;
}

nlohmann::json generator_config_json(const GeneratorConfig& g) {
    nlohmann::json j;
    j["mode"] = gen_mode_name(g.mode);
    j["dims"] = g.dims;
    j["components"] = g.c;
    j["delta_volume"] = g.delta_volume;
    j["delta_fnc"] = g.delta_fnc;
    j["noise_volume"] = g.noise_volume;
    j["noise_fnc"] = g.noise_fnc;
    j["roi"] = {{"center", g.roi.center}, {"radii", g.roi.radii}};
    j["fnc_block"] = g.fnc_block;
    return j;
}

GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
    GeneratorConfig g;
    g.mode = gen_mode_from(j.value("mode", "additive"));
    if (j.contains("dims")) {
        auto d = j["dims"].get<std::vector<int64_t>>();
        if (d.size() != 3) throw ConfigError("generator dims must have 3 entries");
        g.dims = {d[0], d[1], d[2]};
    }
    g.c = j.value("components", g.c);
    g.delta_volume = j.value("delta_volume", g.delta_volume);
    g.delta_fnc = j.value("delta_fnc", g.delta_fnc);
    g.noise_volume = j.value("noise_volume", g.noise_volume);
    g.noise_fnc = j.value("noise_fnc", g.noise_fnc);
    if (j.contains("roi")) {
        auto c = j["roi"].value("center", std::vector<double>{0.5, 0.45, 0.5});
        auto r = j["roi"].value("radii", std::vector<double>{0.28, 0.25, 0.28});
        if (c.size() != 3 || r.size() != 3) throw ConfigError("roi center/radii must have 3 entries");
        g.roi.center = {c[0], c[1], c[2]};
        g.roi.radii = {r[0], r[1], r[2]};
    }
    if (j.contains("fnc_block")) {
        auto b = j["fnc_block"].get<std::vector<int64_t>>();
        if (b.size() != 4) throw ConfigError("fnc_block must have 4 entries");
        g.fnc_block = {b[0], b[1], b[2], b[3]};
    }
    return g;
}

void save_manifest(const DatasetManifest& manifest, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "data");
    nlohmann::json j;
    j["seed"] = manifest.seed;
    j["config"] = generator_config_json(manifest.config);
    j["subjects"] = nlohmann::json::array();
    for (const auto& s : manifest.subjects) {
        std::string vol_rel = "data/" + s.id + "_vol";
        std::string fnc_rel = "data/" + s.id + "_fnc";
        write_volume((fs::path(dir) / vol_rel).string(), *s.volume);
        write_fnc((fs::path(dir) / fnc_rel).string(), *s.fnc);
        nlohmann::json sj;
        sj["id"] = s.id;
        sj["label"] = s.label;
        sj["provenance"] = provenance_name(s.provenance);
        sj["site"] = s.site;
        sj["volume"] = vol_rel;
        sj["fnc"] = fnc_rel;
        if (!s.train_folds.empty()) sj["train_folds"] = s.train_folds;
        j["subjects"].push_back(std::move(sj));
    }
    write_text_file((fs::path(dir) / "manifest.json").string(), j.dump(2) + "\n");
}

DatasetManifest load_manifest(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    if (!fs::exists(manifest_path))
        throw MissingArtifactError("missing manifest: " + manifest_path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(manifest_path));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("bad manifest JSON: ") + e.what());
    }
    DatasetManifest manifest;
    manifest.seed = j.value("seed", 0ULL);
    manifest.config = generator_config_from_json(j.at("config"));
    fs::path dir = fs::path(manifest_path).parent_path();
    std::set<std::string> seen;
    for (const auto& sj : j.at("subjects")) {
        SubjectRecord rec;
        rec.id = sj.at("id").get<std::string>();
        if (!seen.insert(rec.id).second)
            throw DataError("duplicate subject id in manifest: " + rec.id);
        rec.label = sj.at("label").get<int>();
        if (rec.label != 0 && rec.label != 1)
            throw DataError("subject label must be 0 or 1: " + rec.id);
        rec.provenance = provenance_from(sj.at("provenance").get<std::string>());
        rec.site = sj.value("site", "");
        if (sj.contains("train_folds")) rec.train_folds = sj["train_folds"].get<std::vector<int>>();
        rec.volume = std::make_shared<StructuralVolume>(
            load_volume((dir / sj.at("volume").get<std::string>()).string(), manifest.config.dims));
        rec.fnc = std::make_shared<FNCMatrix>(
            load_fnc((dir / sj.at("fnc").get<std::string>()).string(), manifest.config.c));
        manifest.subjects.push_back(std::move(rec));
    }
    return manifest;
}

}  // namespace mvit
