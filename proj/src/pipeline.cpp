#include "mvit/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "mvit/lffm.hpp"
#include "mvit/rng.hpp"

namespace mvit {

DatasetManifest pipeline_synthesize(const RunConfig& cfg) {
    return synthesize_dataset(cfg.n_subjects, cfg.gen_mode, cfg.dims, cfg.components,
                              cfg.seed, &cfg.generator);
}

AutoencoderModel pipeline_pretrain_ae(const DatasetManifest& manifest, const RunConfig& cfg,
                                      std::vector<double>* loss_curve) {
    AutoencoderModel model =
        make_autoencoder(cfg.ae_descriptor(), derive_seed(cfg.seed, "ae-init"));
    auto curve = train_autoencoder(manifest, model, cfg.ae, derive_seed(cfg.seed, "ae-train"));
    if (loss_curve) *loss_curve = std::move(curve);
    return model;
}

std::map<int, ClassAugmenter> pipeline_fit_augmenters(const DatasetManifest& manifest,
                                                      const AutoencoderModel& ae,
                                                      const RunConfig& cfg) {
    std::map<int, ClassAugmenter> out;
    for (int label = 0; label <= 1; ++label)
        out.emplace(label, fit_augmenter(manifest, label, ae, cfg,
                                         derive_seed(cfg.seed, "fit-augmenter")));
    return out;
}

FoldAssignment pipeline_folds(const DatasetManifest& manifest, const RunConfig& cfg) {
    return make_folds(manifest, cfg.k_folds, derive_seed(cfg.seed, "folds"));
}

DatasetManifest pipeline_augment(const DatasetManifest& manifest, const FoldAssignment& folds,
                                 const std::map<int, ClassAugmenter>& augmenters,
                                 const AutoencoderModel& ae, const RunConfig& cfg) {
    if (cfg.aug_ratio == 0.0) return manifest;
    if (!cfg.refit_per_fold)
        return augment_training_folds(manifest, folds, cfg.aug_ratio, augmenters, ae,
                                      derive_seed(cfg.seed, "augment"));

    // strict variant: per-fold augmenters trained on that fold's training
    // population only; generated records tagged for that single fold
    DatasetManifest out = manifest;
    for (int f = 0; f < folds.k; ++f) {
        std::vector<const SubjectRecord*> train_pop;
        for (const auto& s : manifest.subjects) {
            if (s.provenance == Provenance::LdmAugmented) continue;
            auto it = folds.fold_of.find(s.id);
            if (it != folds.fold_of.end() && it->second != f) train_pop.push_back(&s);
        }
        for (int label = 0; label <= 1; ++label) {
            ClassAugmenter aug = fit_augmenter(
                train_pop, label, ae, cfg,
                derive_seed(cfg.seed, "fold-augmenter-" + std::to_string(f)));
            std::vector<const SubjectRecord*> donors;
            int64_t real_count = 0;
            for (const auto* s : train_pop)
                if (s->label == label) {
                    donors.push_back(s);
                    ++real_count;
                }
            int64_t n_aug = static_cast<int64_t>(
                std::ceil(cfg.aug_ratio * static_cast<double>(real_count)));
            if (n_aug == 0) continue;
            auto generated = generate_subjects(
                aug, n_aug, donors, ae,
                "aug" + std::to_string(label) + "-f" + std::to_string(f),
                derive_seed(cfg.seed, "augment-fold-" + std::to_string(f) + "-" +
                                          std::to_string(label)));
            for (auto& rec : generated) {
                rec.train_folds = {f};
                out.subjects.push_back(std::move(rec));
            }
        }
    }
    return out;
}

MatrixRun pipeline_matrix(const DatasetManifest& manifest, const RunConfig& cfg,
                          bool include_fnc_row) {
    MatrixRun run;
    run.folds = pipeline_folds(manifest, cfg);

    auto presets = experiment_matrix_presets();
    if (include_fnc_row) presets.push_back(experiment_preset("Baseline1-FNC"));

    bool any_extractor = false, any_augmented = false;
    for (const auto& p : presets) {
        any_extractor |= (p.mode == ArchMode::Hybrid);
        any_augmented |= p.augmented;
    }

    run.manifest = manifest;
    if (any_extractor || (any_augmented && cfg.aug_ratio > 0.0)) {
        run.ae = pipeline_pretrain_ae(manifest, cfg);
        if (any_augmented && cfg.aug_ratio > 0.0) {
            std::map<int, ClassAugmenter> augmenters;
            if (!cfg.refit_per_fold)
                augmenters = pipeline_fit_augmenters(manifest, *run.ae, cfg);
            run.manifest = pipeline_augment(manifest, run.folds, augmenters, *run.ae, cfg);
        }
    }

    for (const auto& spec : presets) {
        MatrixRow row;
        row.spec = spec;
        CvResult cv;
        try {
            cv = run_cv(run.manifest, run.folds, spec, cfg,
                        run.ae ? &*run.ae : nullptr,
                        derive_seed(cfg.seed, "row-" + spec.name));
            row.ok = true;
            row.accuracy = cv.report.mean_accuracy;
            row.auc = cv.report.mean_auc;
            row.report = cv.report;
        } catch (const std::exception& e) {
            row.ok = false;
            row.error = e.what();
        }
        run.table.rows.push_back(std::move(row));
        run.cv.push_back(std::move(cv));
    }
    return run;
}

FoldMetrics evaluate_fold(const DatasetManifest& manifest, const FoldAssignment& folds,
                          int fold_idx, const ClassifierModel& model,
                          const AutoencoderModel* ae) {
    if (fold_idx < 0 || fold_idx >= folds.k)
        throw ConfigError("evaluate_fold: fold index out of range");
    std::vector<const SubjectRecord*> eval;
    for (const auto& s : manifest.subjects) {
        if (s.provenance == Provenance::LdmAugmented) continue;
        auto it = folds.fold_of.find(s.id);
        if (it != folds.fold_of.end() && it->second == fold_idx) eval.push_back(&s);
    }
    if (eval.empty()) throw DataError("evaluate_fold: empty evaluation set");

    std::vector<std::array<double, 2>> probs(eval.size());
    std::vector<int> labels(eval.size());
    std::vector<double> losses(eval.size());
    parallel_for(static_cast<int64_t>(eval.size()), [&](int64_t i) {
        const auto* s = eval[static_cast<size_t>(i)];
        auto fr = classifier_forward(*s->volume, *s->fnc, model, ae, nullptr,
                                     /*want_attention=*/false);
        probs[static_cast<size_t>(i)] = fr.probs;
        labels[static_cast<size_t>(i)] = s->label;
        losses[static_cast<size_t>(i)] =
            ops::cross_entropy_logits(fr.logits, s->label)->value.value();
    });

    FoldMetrics fm;
    fm.fold = fold_idx;
    fm.accuracy = compute_accuracy(probs, labels);
    std::vector<double> scores;
    for (const auto& p : probs) scores.push_back(p[1]);
    fm.auc = compute_auc(scores, labels);
    for (double l : losses) fm.final_val_loss += l;
    fm.final_val_loss /= static_cast<double>(eval.size());
    for (const auto* s : eval) fm.eval_ids.push_back(s->id);
    return fm;
}

SaliencySummary pipeline_saliency(const DatasetManifest& manifest, const FoldAssignment& folds,
                                  int fold_idx, const ClassifierModel& model,
                                  const AutoencoderModel* ae, const RunConfig& cfg,
                                  const std::string& out_dir, int max_slice_exports) {
    std::vector<const SubjectRecord*> eval;
    for (const auto& s : manifest.subjects) {
        if (s.provenance == Provenance::LdmAugmented) continue;
        auto it = folds.fold_of.find(s.id);
        if (it != folds.fold_of.end() && it->second == fold_idx) eval.push_back(&s);
    }
    if (eval.empty()) throw DataError("pipeline_saliency: empty evaluation set");

    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

    SaliencySummary summary;
    summary.items.resize(eval.size());
    parallel_for(static_cast<int64_t>(eval.size()), [&](int64_t i) {
        const auto* s = eval[static_cast<size_t>(i)];
        auto fr = classifier_forward(*s->volume, *s->fnc, model, ae, nullptr,
                                     /*want_attention=*/true);
        auto scores = token_attention_scores(fr.record);
        SaliencyVolume sal = scores_to_volume(scores, fr.record.patch_map,
                                              fr.record.grid_dims, cfg.dims);
        auto [inside, outside] = roi_saliency_split(sal, cfg.generator.roi);
        summary.items[static_cast<size_t>(i)] = {s->id, s->label, inside, outside,
                                                 sal.degenerate};
        if (!out_dir.empty()) {
            std::string base = (std::filesystem::path(out_dir) / s->id).string();
            std::vector<int64_t> slices;
            if (i < max_slice_exports) {
                int64_t d = cfg.dims[0];
                slices = {d / 4, d / 2, (3 * d) / 4};
            }
            export_overlay(*s->volume, sal, base, slices);
        }
    });

    for (const auto& item : summary.items) {
        summary.mean_inside += item.roi_inside;
        summary.mean_outside += item.roi_outside;
    }
    summary.mean_inside /= static_cast<double>(summary.items.size());
    summary.mean_outside /= static_cast<double>(summary.items.size());
    return summary;
}

nlohmann::json saliency_summary_json(const SaliencySummary& s) {
    nlohmann::json j;
    j["mean_roi_inside"] = s.mean_inside;
    j["mean_roi_outside"] = s.mean_outside;
    j["subjects"] = nlohmann::json::array();
    for (const auto& item : s.items)
        j["subjects"].push_back({{"id", item.id},
                                 {"label", item.label},
                                 {"roi_inside", item.roi_inside},
                                 {"roi_outside", item.roi_outside},
                                 {"degenerate", item.degenerate}});
    return j;
}

}  // namespace mvit
