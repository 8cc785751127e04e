#pragma once

#include <array>
#include <string>
#include <vector>

#include "mvit/data.hpp"
#include "mvit/vit.hpp"

namespace mvit {

// Voxel-level importance map over the input volume, min-max normalized to
// [0,1]. `degenerate` marks the constant-score fallback (all 0.5).
struct SaliencyVolume {
    std::array<int64_t, 3> dims{0, 0, 0};
    std::vector<float> values;
    bool degenerate = false;

    float at(int64_t z, int64_t y, int64_t x) const {
        return values[static_cast<size_t>((z * dims[1] + y) * dims[2] + x)];
    }
};

// Average attention RECEIVED by each primary-stream token: mean over all
// matrices whose key side indexes primary tokens, over their query rows.
// Scores are nonnegative and sum to 1.
std::vector<double> token_attention_scores(const AttentionRecord& record);

// Paint each token's grid block with its score, trilinear-upsample the
// grid to the ambient dims, then min-max normalize. Constant scores trip
// the flagged all-0.5 fallback.
SaliencyVolume scores_to_volume(const std::vector<double>& scores,
                                const std::vector<PatchBlock>& patch_map,
                                const std::array<int64_t, 3>& grid_dims,
                                const std::array<int64_t, 3>& ambient_dims);

// Writes "<base>_saliency" grid container plus one alpha-blended axial
// slice image per entry of `slices` ("<base>_slice_<z>.ppm"). Returns the
// written file paths.
std::vector<std::string> export_overlay(const StructuralVolume& v, const SaliencyVolume& s,
                                        const std::string& base_path,
                                        const std::vector<int64_t>& slices);

// Mean saliency inside/outside the generator ROI (for the planted-signal
// localization summary).
std::pair<double, double> roi_saliency_split(const SaliencyVolume& s, const RoiSpec& roi);

}  // namespace mvit
