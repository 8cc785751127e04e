#pragma once

#include <map>
#include <vector>

#include "mvit/autoencoder.hpp"
#include "mvit/config.hpp"
#include "mvit/data.hpp"
#include "mvit/diffusion.hpp"

namespace mvit {

// One unconditional latent diffusion model per class; the generated label
// is inherited from the augmenter by construction.
struct ClassAugmenter {
    int label = 0;
    DenoiserModel denoiser;
    NoiseSchedule schedule;
    size_t training_corpus_size = 0;  // count of matching-label subjects
};

// Trains the denoiser on the posterior-mean latents of same-label subjects
// drawn from `subjects` (non-augmented records only). Needs >= 10 of them.
ClassAugmenter fit_augmenter(const std::vector<const SubjectRecord*>& subjects, int label,
                             const AutoencoderModel& ae, const RunConfig& cfg,
                             uint64_t seed);
ClassAugmenter fit_augmenter(const DatasetManifest& manifest, int label,
                             const AutoencoderModel& ae, const RunConfig& cfg,
                             uint64_t seed);

// Samples n subjects: volume = decode(sample(...)) clipped to [0,1]; FNC =
// random same-label donor matrix plus symmetric Gaussian jitter (std 0.02)
// re-clipped with unit diagonal; provenance = ldm-augmented.
std::vector<SubjectRecord> generate_subjects(const ClassAugmenter& aug, int64_t n,
                                             const std::vector<const SubjectRecord*>& donors,
                                             const AutoencoderModel& ae,
                                             const std::string& id_prefix, uint64_t seed);

// Appends ceil(ratio * real_count) generated subjects per class, tagged
// with the folds whose training phase may use them. Fold assignment and
// evaluation sets are untouched.
DatasetManifest augment_training_folds(const DatasetManifest& manifest,
                                       const FoldAssignment& folds, double ratio,
                                       const std::map<int, ClassAugmenter>& augmenters,
                                       const AutoencoderModel& ae, uint64_t seed);

}  // namespace mvit
