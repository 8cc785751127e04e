#pragma once

#include <array>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mvit/common.hpp"
#include "mvit/tensor.hpp"

#include <json.hpp>

namespace mvit {

// 3D gray-matter intensity grid, normalized to [0,1]. float32 storage to
// match the on-disk payload bit for bit.
struct StructuralVolume {
    std::array<int64_t, 3> dims{0, 0, 0};  // depth, height, width
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::vector<float> voxels;             // row-major depth*height*width

    int64_t numel() const { return dims[0] * dims[1] * dims[2]; }
    float at(int64_t z, int64_t y, int64_t x) const {
        return voxels[static_cast<size_t>((z * dims[1] + y) * dims[2] + x)];
    }
    float& at(int64_t z, int64_t y, int64_t x) {
        return voxels[static_cast<size_t>((z * dims[1] + y) * dims[2] + x)];
    }
    Tensor as_tensor() const;  // [1, depth, height, width] double
};

// Symmetric C x C functional network connectivity matrix.
struct FNCMatrix {
    int64_t c = 0;
    std::vector<float> entries;  // row-major C*C

    float at(int64_t i, int64_t j) const { return entries[static_cast<size_t>(i * c + j)]; }
    float& at(int64_t i, int64_t j) { return entries[static_cast<size_t>(i * c + j)]; }
    Tensor as_tensor() const;  // [C, C] double
};

// Validates symmetry (<=1e-6, then symmetrized), range, and unit diagonal.
FNCMatrix validate_fnc(FNCMatrix m);

enum class Provenance { Real, SyntheticGenerated, LdmAugmented };
std::string provenance_name(Provenance p);
Provenance provenance_from(const std::string& s);

struct SubjectRecord {
    std::string id;
    std::shared_ptr<StructuralVolume> volume;
    std::shared_ptr<FNCMatrix> fnc;
    int label = 0;  // 0 = control, 1 = patient
    Provenance provenance = Provenance::SyntheticGenerated;
    std::string site;
    // Folds whose training phase may use this record. Only populated for
    // ldm-augmented records; such records are never assigned to folds.
    std::vector<int> train_folds;
};

enum class GenMode { Additive, Xor };
std::string gen_mode_name(GenMode m);
GenMode gen_mode_from(const std::string& s);

// Ellipsoidal region of interest in fractional coordinates.
struct RoiSpec {
    std::array<double, 3> center{0.5, 0.45, 0.5};
    std::array<double, 3> radii{0.28, 0.25, 0.28};
    bool contains(const std::array<int64_t, 3>& dims, int64_t z, int64_t y, int64_t x) const;
};

struct GeneratorConfig {
    GenMode mode = GenMode::Additive;
    std::array<int64_t, 3> dims{24, 28, 24};
    int64_t c = 16;
    double delta_volume = 0.15;   // ROI intensity shift
    double delta_fnc = 0.25;      // FNC block offset
    double noise_volume = 0.05;   // smooth per-subject variation
    double noise_fnc = 0.08;      // symmetric FNC jitter
    RoiSpec roi;
    // rows [r0,r1) x cols [c0,c1); negative entries mean "derive from C"
    std::array<int64_t, 4> fnc_block{-1, -1, -1, -1};

    std::array<int64_t, 4> resolved_fnc_block() const;
};

struct DatasetManifest {
    std::vector<SubjectRecord> subjects;
    uint64_t seed = 0;
    GeneratorConfig config;

    const SubjectRecord* find(const std::string& id) const;
};

struct FoldAssignment {
    std::map<std::string, int> fold_of;
    int k = 0;

    std::vector<std::string> members(int fold) const;
};

// -- grid-backed file import/export ------------------------------------

StructuralVolume load_volume(const std::string& base_path,
                             const std::array<int64_t, 3>& expected_dims);
void write_volume(const std::string& base_path, const StructuralVolume& v);
FNCMatrix load_fnc(const std::string& base_path, int64_t c);
void write_fnc(const std::string& base_path, const FNCMatrix& m);

// Min-max scale to [0,1]. Throws DataError for a constant volume.
StructuralVolume normalize_volume(const StructuralVolume& v);

// -- synthetic data ------------------------------------------------------

// Balanced two-class multimodal dataset with a planted signal.
//  additive: label shifts both the volume ROI mean and the FNC block.
//  xor:      hidden factors a (volume) and b (fnc); label = [a*b == 1],
//            so each modality alone carries no label information.
DatasetManifest synthesize_dataset(int64_t n, GenMode mode,
                                   const std::array<int64_t, 3>& dims, int64_t c,
                                   uint64_t seed, const GeneratorConfig* overrides = nullptr);

double roi_mean(const StructuralVolume& v, const RoiSpec& roi);
double fnc_block_mean(const FNCMatrix& m, const std::array<int64_t, 4>& block);

// Stratified fold assignment over non-augmented records. Fold sizes and
// per-fold class counts differ by at most 1.
FoldAssignment make_folds(const DatasetManifest& manifest, int k, uint64_t seed);

// -- manifest persistence -------------------------------------------------

// Writes manifest.json plus per-subject grid containers under dir/data/.
void save_manifest(const DatasetManifest& manifest, const std::string& dir);
DatasetManifest load_manifest(const std::string& manifest_path);

nlohmann::json generator_config_json(const GeneratorConfig& g);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);

}  // namespace mvit
