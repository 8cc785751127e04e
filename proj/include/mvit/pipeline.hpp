#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mvit/augment.hpp"
#include "mvit/config.hpp"
#include "mvit/saliency.hpp"
#include "mvit/train.hpp"

namespace mvit {

// In-process orchestration of the staged workflow:
//   synth -> pretrain-ae -> train-ldm -> augment -> train/evaluate -> saliency
// The CLI persists each stage's artifacts; these helpers run the same steps
// on in-memory objects.

DatasetManifest pipeline_synthesize(const RunConfig& cfg);

AutoencoderModel pipeline_pretrain_ae(const DatasetManifest& manifest, const RunConfig& cfg,
                                      std::vector<double>* loss_curve = nullptr);

std::map<int, ClassAugmenter> pipeline_fit_augmenters(const DatasetManifest& manifest,
                                                      const AutoencoderModel& ae,
                                                      const RunConfig& cfg);

FoldAssignment pipeline_folds(const DatasetManifest& manifest, const RunConfig& cfg);

// Default policy: augmenters fit once on the full real population, records
// tagged for every fold. With cfg.refit_per_fold, augmenters are refit on
// each fold's training population and records are tagged for that fold
// only.
DatasetManifest pipeline_augment(const DatasetManifest& manifest, const FoldAssignment& folds,
                                 const std::map<int, ClassAugmenter>& augmenters,
                                 const AutoencoderModel& ae, const RunConfig& cfg);

struct MatrixRun {
    MatrixResult table;
    std::vector<CvResult> cv;  // aligned with table.rows
    FoldAssignment folds;
    DatasetManifest manifest;  // augmented when aug_ratio > 0
    std::optional<AutoencoderModel> ae;
};

// Runs the five-row grid (plus the optional unimodal FNC control) against
// one manifest. Per-row failures are recorded, not fatal.
MatrixRun pipeline_matrix(const DatasetManifest& manifest, const RunConfig& cfg,
                          bool include_fnc_row = false);

// Evaluation-only pass over one fold with an already-trained model.
FoldMetrics evaluate_fold(const DatasetManifest& manifest, const FoldAssignment& folds,
                          int fold_idx, const ClassifierModel& model,
                          const AutoencoderModel* ae);

struct SaliencySummary {
    struct Item {
        std::string id;
        int label = 0;
        double roi_inside = 0.0;
        double roi_outside = 0.0;
        bool degenerate = false;
    };
    std::vector<Item> items;
    double mean_inside = 0.0;
    double mean_outside = 0.0;
};

// Saliency for every evaluation subject of one fold. When out_dir is
// non-empty, writes saliency containers for each subject and slice images
// for the first `max_slice_exports` of them.
SaliencySummary pipeline_saliency(const DatasetManifest& manifest, const FoldAssignment& folds,
                                  int fold_idx, const ClassifierModel& model,
                                  const AutoencoderModel* ae, const RunConfig& cfg,
                                  const std::string& out_dir = "",
                                  int max_slice_exports = 2);

nlohmann::json saliency_summary_json(const SaliencySummary& s);

}  // namespace mvit
