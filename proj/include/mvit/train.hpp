#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mvit/autoencoder.hpp"
#include "mvit/config.hpp"
#include "mvit/data.hpp"
#include "mvit/optim.hpp"
#include "mvit/vit.hpp"

namespace mvit {

// One row of the experiment grid.
struct ExperimentSpec {
    std::string name;
    std::string main_model;
    std::string data_label;   // "MRI" | "FNC" | "MRI/FNC"
    ArchMode mode = ArchMode::Hybrid;
    bool lffm = false;
    bool augmented = false;
    std::string lffm_flag;    // printed value: "-", "No", "Yes"
    std::string aug_flag;
};

// The five grid rows, in output order.
std::vector<ExperimentSpec> experiment_matrix_presets();
// Named lookup; also accepts the non-grid unimodal extra "Baseline1-FNC".
ExperimentSpec experiment_preset(const std::string& name);

struct FoldMetrics {
    int fold = 0;
    double accuracy = 0.0;
    double auc = 0.0;
    double final_val_loss = 0.0;
    std::vector<std::string> eval_ids;
};

struct MetricsReport {
    std::string experiment;
    int k = 0;
    std::vector<FoldMetrics> folds;
    double mean_accuracy = 0.0;
    double mean_auc = 0.0;
    std::string config_hash;
    uint64_t seed = 0;
};

struct FoldResult {
    ClassifierModel model;
    FoldMetrics metrics;
};

// Trains one fold: training set = out-of-fold non-augmented subjects plus,
// when spec.augmented, the ldm-augmented records tagged for this fold;
// evaluation set = the fold's (real) members. Leakage between the two is a
// fatal error, not a statistic.
FoldResult train_one_fold(const DatasetManifest& manifest, const FoldAssignment& folds,
                          int fold_idx, const ExperimentSpec& spec, const RunConfig& cfg,
                          const AutoencoderModel* ae, uint64_t seed);

struct CvResult {
    MetricsReport report;
    std::vector<ClassifierModel> fold_models;
};

// 5-fold CV with per-fold seeds derived from (seed, fold).
CvResult run_cv(const DatasetManifest& manifest, const FoldAssignment& folds,
                const ExperimentSpec& spec, const RunConfig& cfg,
                const AutoencoderModel* ae, uint64_t seed);

std::string metrics_csv(const MetricsReport& report);
nlohmann::json metrics_json(const MetricsReport& report);

struct MatrixRow {
    ExperimentSpec spec;
    bool ok = false;
    std::string error;
    double accuracy = 0.0;
    double auc = 0.0;
    MetricsReport report;
};

struct MatrixResult {
    std::vector<MatrixRow> rows;
};

std::string matrix_csv(const MatrixResult& m);
nlohmann::json matrix_json(const MatrixResult& m);

}  // namespace mvit
