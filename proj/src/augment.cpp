#include "mvit/augment.hpp"

#include <algorithm>
#include <cmath>

#include "mvit/lffm.hpp"
#include "mvit/rng.hpp"

namespace mvit {

ClassAugmenter fit_augmenter(const std::vector<const SubjectRecord*>& subjects, int label,
                             const AutoencoderModel& ae, const RunConfig& cfg,
                             uint64_t seed) {
    std::vector<const SubjectRecord*> matching;
    for (const auto* s : subjects)
        if (s->label == label && s->provenance != Provenance::LdmAugmented)
            matching.push_back(s);
    if (matching.size() < 10)
        throw DataError("fit_augmenter: only " + std::to_string(matching.size()) +
                        " subjects with label " + std::to_string(label) + ", need >= 10");

    std::vector<Tensor> latents(matching.size());
    parallel_for(static_cast<int64_t>(matching.size()), [&](int64_t i) {
        latents[static_cast<size_t>(i)] =
            extract_latent(*matching[static_cast<size_t>(i)]->volume, ae);
    });

    ClassAugmenter aug;
    aug.label = label;
    aug.schedule = cfg.schedule();
    aug.training_corpus_size = matching.size();
    aug.denoiser = make_denoiser(cfg.denoiser_descriptor(),
                                 derive_seed(seed, "augmenter-" + std::to_string(label)));
    train_denoiser(latents, aug.denoiser, aug.schedule, cfg.diffusion,
                   derive_seed(seed, "augmenter-train-" + std::to_string(label)));
    return aug;
}

ClassAugmenter fit_augmenter(const DatasetManifest& manifest, int label,
                             const AutoencoderModel& ae, const RunConfig& cfg,
                             uint64_t seed) {
    std::vector<const SubjectRecord*> subjects;
    for (const auto& s : manifest.subjects) subjects.push_back(&s);
    return fit_augmenter(subjects, label, ae, cfg, seed);
}

namespace {

FNCMatrix perturbed_donor_fnc(const FNCMatrix& donor, Rng& rng) {
    FNCMatrix m = donor;
    for (int64_t i = 0; i < m.c; ++i)
        for (int64_t j = i + 1; j < m.c; ++j) {
            float jitter = static_cast<float>(rng.normal(0.0, 0.02));
            float v = std::clamp(m.at(i, j) + jitter, -1.0f, 1.0f);
            m.at(i, j) = v;
            m.at(j, i) = v;
        }
    for (int64_t i = 0; i < m.c; ++i) m.at(i, i) = 1.0f;
    return m;
}

}  // namespace

std::vector<SubjectRecord> generate_subjects(const ClassAugmenter& aug, int64_t n,
                                             const std::vector<const SubjectRecord*>& donors,
                                             const AutoencoderModel& ae,
                                             const std::string& id_prefix, uint64_t seed) {
    if (n < 1) throw ConfigError("generate_subjects: n must be >= 1");
    if (donors.empty()) throw DataError("generate_subjects: empty donor pool");
    for (const auto* d : donors)
        if (d->label != aug.label)
            throw DataError("generate_subjects: donor label mismatch");

    Rng donor_rng(derive_seed(seed, "aug-donor"));
    std::vector<size_t> donor_idx(static_cast<size_t>(n));
    for (auto& d : donor_idx)
        d = static_cast<size_t>(donor_rng.uniform_int(0, static_cast<int64_t>(donors.size()) - 1));

    std::vector<SubjectRecord> out(static_cast<size_t>(n));
    parallel_for(n, [&](int64_t i) {
        uint64_t sub_seed = derive_seed(seed, static_cast<uint64_t>(i));
        Tensor z = sample(aug.denoiser, aug.schedule, sub_seed);
        StructuralVolume vol = decode(z, ae);  // decode clamps to [0,1]

        const SubjectRecord* donor = donors[donor_idx[static_cast<size_t>(i)]];
        Rng fnc_rng(derive_seed(sub_seed, "aug-fnc"));
        FNCMatrix fnc = perturbed_donor_fnc(*donor->fnc, fnc_rng);

        SubjectRecord rec;
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%s-%05lld", id_prefix.c_str(),
                      static_cast<long long>(i));
        rec.id = buf;
        rec.label = aug.label;
        rec.provenance = Provenance::LdmAugmented;
        rec.site = donor->site;
        rec.volume = std::make_shared<StructuralVolume>(std::move(vol));
        rec.fnc = std::make_shared<FNCMatrix>(validate_fnc(std::move(fnc)));
        out[static_cast<size_t>(i)] = std::move(rec);
    });
    return out;
}

DatasetManifest augment_training_folds(const DatasetManifest& manifest,
                                       const FoldAssignment& folds, double ratio,
                                       const std::map<int, ClassAugmenter>& augmenters,
                                       const AutoencoderModel& ae, uint64_t seed) {
    if (ratio < 0.0) throw ConfigError("augment_training_folds: ratio must be >= 0");
    if (ratio == 0.0) return manifest;

    DatasetManifest out = manifest;
    std::vector<int> all_folds;
    for (int f = 0; f < folds.k; ++f) all_folds.push_back(f);

    for (int label = 0; label <= 1; ++label) {
        auto it = augmenters.find(label);
        if (it == augmenters.end())
            throw ConfigError("augment_training_folds: missing augmenter for class " +
                              std::to_string(label));
        std::vector<const SubjectRecord*> donors;
        int64_t real_count = 0;
        for (const auto& s : manifest.subjects)
            if (s.provenance != Provenance::LdmAugmented && s.label == label) {
                donors.push_back(&s);
                ++real_count;
            }
        int64_t n_aug = static_cast<int64_t>(
            std::ceil(ratio * static_cast<double>(real_count)));
        if (n_aug == 0) continue;
        auto generated = generate_subjects(
            it->second, n_aug, donors, ae, "aug" + std::to_string(label),
            derive_seed(seed, "augment-class-" + std::to_string(label)));
        for (auto& rec : generated) {
            rec.train_folds = all_folds;
            out.subjects.push_back(std::move(rec));
        }
    }
    return out;
}

}  // namespace mvit
