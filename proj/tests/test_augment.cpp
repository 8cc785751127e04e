#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "mvit/augment.hpp"
#include "mvit/pipeline.hpp"
#include "mvit/rng.hpp"

using namespace mvit;

namespace {

RunConfig aug_config() {
    RunConfig cfg = default_config("desk");
    cfg.dims = {12, 14, 12};
    cfg.components = 8;
    cfg.n_subjects = 40;
    cfg.generator.dims = cfg.dims;
    cfg.generator.c = 8;
    cfg.ae_channels = {4, 8};
    cfg.latent_channels = 4;
    cfg.ae.epochs = 2;
    cfg.diffusion_T = 8;
    cfg.diffusion.steps = 20;
    cfg.diffusion.batch_size = 8;
    cfg.denoiser_hidden = 8;
    cfg.k_folds = 5;
    cfg.seed = 17;
    return cfg;
}

}  // namespace

TEST_CASE("fit_augmenter: label bookkeeping and insufficient-subject error") {
    RunConfig cfg = aug_config();
    auto manifest = pipeline_synthesize(cfg);
    auto ae = pipeline_pretrain_ae(manifest, cfg);

    auto aug = fit_augmenter(manifest, 1, ae, cfg, 5);
    CHECK(aug.label == 1);
    CHECK(aug.training_corpus_size == 20);  // matching-label subjects only
    CHECK(aug.schedule.T == cfg.diffusion_T);

    // a manifest without label-1 subjects cannot fit a label-1 augmenter
    DatasetManifest zeros = manifest;
    for (auto& s : zeros.subjects) s.label = 0;
    CHECK_THROWS_AS(fit_augmenter(zeros, 1, ae, cfg, 5), DataError);
}

TEST_CASE("generate_subjects: contracts and determinism") {
    RunConfig cfg = aug_config();
    auto manifest = pipeline_synthesize(cfg);
    auto ae = pipeline_pretrain_ae(manifest, cfg);
    auto aug = fit_augmenter(manifest, 0, ae, cfg, 5);

    std::vector<const SubjectRecord*> donors;
    for (const auto& s : manifest.subjects)
        if (s.label == 0) donors.push_back(&s);

    auto gen = generate_subjects(aug, 5, donors, ae, "aug0", 77);
    REQUIRE(gen.size() == 5);
    std::set<std::string> ids;
    for (const auto& r : gen) {
        CHECK(r.label == 0);
        CHECK(r.provenance == Provenance::LdmAugmented);
        CHECK(ids.insert(r.id).second);
        for (float v : r.volume->voxels) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
        CHECK_NOTHROW(validate_fnc(*r.fnc));
    }

    auto gen2 = generate_subjects(aug, 5, donors, ae, "aug0", 77);
    for (size_t i = 0; i < 5; ++i) {
        CHECK(gen[i].volume->voxels == gen2[i].volume->voxels);
        CHECK(gen[i].fnc->entries == gen2[i].fnc->entries);
    }

    CHECK_THROWS_AS(generate_subjects(aug, 3, {}, ae, "x", 1), DataError);
    CHECK_THROWS_AS(generate_subjects(aug, 0, donors, ae, "x", 1), ConfigError);
}

TEST_CASE("augment_training_folds: identity at ratio 0, counts, tagging") {
    RunConfig cfg = aug_config();
    auto manifest = pipeline_synthesize(cfg);
    auto folds = pipeline_folds(manifest, cfg);
    auto ae = pipeline_pretrain_ae(manifest, cfg);
    std::map<int, ClassAugmenter> augs;
    augs.emplace(0, fit_augmenter(manifest, 0, ae, cfg, 5));
    augs.emplace(1, fit_augmenter(manifest, 1, ae, cfg, 5));

    auto same = augment_training_folds(manifest, folds, 0.0, augs, ae, 9);
    CHECK(same.subjects.size() == manifest.subjects.size());

    auto boosted = augment_training_folds(manifest, folds, 0.5, augs, ae, 9);
    // 20 real per class, ratio 0.5 -> 10 augmented per class appended
    int aug_count[2] = {0, 0};
    for (const auto& s : boosted.subjects)
        if (s.provenance == Provenance::LdmAugmented) {
            aug_count[s.label] += 1;
            CHECK(s.train_folds.size() == 5);  // usable by every fold's training phase
        }
    CHECK(aug_count[0] == 10);
    CHECK(aug_count[1] == 10);
    CHECK(boosted.subjects.size() == manifest.subjects.size() + 20);

    std::map<int, ClassAugmenter> missing;
    missing.emplace(0, fit_augmenter(manifest, 0, ae, cfg, 5));
    CHECK_THROWS_AS(augment_training_folds(manifest, folds, 0.5, missing, ae, 9),
                    ConfigError);
}

TEST_CASE("augmented records never reach an evaluation set") {
    RunConfig cfg = aug_config();
    cfg.cls_epochs = 2;
    cfg.embed_dim = 16;
    cfg.vit_layers = 1;
    cfg.heads = 2;
    cfg.mlp_hidden = 16;
    cfg.latent_patch = {1, 2, 1};
    cfg.vol_patch = {6, 7, 6};
    cfg.aug_ratio = 0.5;

    auto manifest = pipeline_synthesize(cfg);
    auto folds = pipeline_folds(manifest, cfg);
    auto ae = pipeline_pretrain_ae(manifest, cfg);
    auto augs = pipeline_fit_augmenters(manifest, ae, cfg);
    auto boosted = pipeline_augment(manifest, folds, augs, ae, cfg);

    std::set<std::string> augmented_ids;
    for (const auto& s : boosted.subjects)
        if (s.provenance == Provenance::LdmAugmented) augmented_ids.insert(s.id);
    CHECK(!augmented_ids.empty());

    auto spec = experiment_preset("MultiViT2");
    auto cv = run_cv(boosted, folds, spec, cfg, &ae, 55);
    for (const auto& f : cv.report.folds)
        for (const auto& id : f.eval_ids) CHECK(augmented_ids.count(id) == 0);

    // fold assignment untouched by augmentation
    for (const auto& id : augmented_ids) CHECK(folds.fold_of.count(id) == 0);
}

TEST_CASE("refit-per-fold variant tags records for a single fold") {
    RunConfig cfg = aug_config();
    cfg.refit_per_fold = true;
    cfg.aug_ratio = 0.25;
    cfg.diffusion.steps = 5;
    auto manifest = pipeline_synthesize(cfg);
    auto folds = pipeline_folds(manifest, cfg);
    auto ae = pipeline_pretrain_ae(manifest, cfg);
    auto boosted = pipeline_augment(manifest, folds, {}, ae, cfg);
    int aug_total = 0;
    for (const auto& s : boosted.subjects)
        if (s.provenance == Provenance::LdmAugmented) {
            ++aug_total;
            CHECK(s.train_folds.size() == 1);
        }
    // per fold: 16 real per class in training -> ceil(.25*16) = 4 per class
    CHECK(aug_total == 5 * 2 * 4);
}
