// Stage-oriented command line for the multimodal classification pipeline:
//   synth-data -> pretrain-ae -> train-ldm -> augment -> train -> evaluate
//   -> saliency, plus `matrix` which runs the whole experiment grid.
// Exit codes: 0 success, 1 usage/config error, 2 missing upstream artifact,
// 3 numerical failure.

#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mvit/augment.hpp"
#include "mvit/config.hpp"
#include "mvit/io.hpp"
#include "mvit/lffm.hpp"
#include "mvit/pipeline.hpp"
#include "mvit/train.hpp"

namespace fs = std::filesystem;
using namespace mvit;

namespace {

struct GlobalOpts {
    std::string config_path;
    std::string out_override;
    int64_t seed_override = -1;
    std::string preset_override;
    bool allow_hash_mismatch = false;
};

RunConfig resolve_config(const GlobalOpts& g) {
    RunConfig cfg;
    if (!g.config_path.empty())
        cfg = load_config(g.config_path);
    else if (!g.preset_override.empty())
        cfg = default_config(g.preset_override);
    else
        cfg = default_config("desk");
    if (!g.preset_override.empty() && !g.config_path.empty()) {
        // --preset reselects the base profile; explicit config keys win
        nlohmann::json j = nlohmann::json::parse(read_text_file(g.config_path));
        j["preset"] = g.preset_override;
        cfg = config_from_json(j);
    }
    if (g.seed_override >= 0) cfg.seed = static_cast<uint64_t>(g.seed_override);
    if (!g.out_override.empty()) cfg.out_dir = g.out_override;
    return cfg;
}

void write_stage_config(const RunConfig& cfg, const std::string& stage) {
    fs::create_directories(cfg.out_dir);
    nlohmann::json j = config_json(cfg);
    j["config_hash"] = config_hash(cfg);
    write_text_file((fs::path(cfg.out_dir) / (stage + "_config.json")).string(),
                    j.dump(2) + "\n");
}

void check_hash(const std::string& artifact_hash, const RunConfig& cfg,
                const std::string& what, bool allow_mismatch) {
    if (artifact_hash.empty()) return;
    if (artifact_hash != config_hash(cfg)) {
        if (allow_mismatch) {
            std::cerr << "warning: " << what << " was produced by a different config ("
                      << artifact_hash << " != " << config_hash(cfg) << ")\n";
            return;
        }
        throw ConfigError(what + " config hash mismatch (" + artifact_hash +
                          " != " + config_hash(cfg) +
                          "); pass --allow-hash-mismatch to override");
    }
}

std::string manifest_path(const RunConfig& cfg) {
    return (fs::path(cfg.out_dir) / "manifest.json").string();
}
std::string aug_manifest_path(const RunConfig& cfg) {
    return (fs::path(cfg.out_dir) / "augmented" / "manifest.json").string();
}
std::string ae_path(const RunConfig& cfg) {
    return (fs::path(cfg.out_dir) / "ae.ckpt").string();
}
std::string ldm_path(const RunConfig& cfg, int label) {
    return (fs::path(cfg.out_dir) / ("ldm_c" + std::to_string(label) + ".ckpt")).string();
}

DatasetManifest require_manifest(const RunConfig& cfg) {
    if (!fs::exists(manifest_path(cfg)))
        throw MissingArtifactError("missing manifest (run stage: synth-data): " +
                                   manifest_path(cfg));
    return load_manifest(manifest_path(cfg));
}

AutoencoderModel require_ae(const RunConfig& cfg, bool allow_mismatch) {
    if (!fs::exists(ae_path(cfg)))
        throw MissingArtifactError("missing autoencoder checkpoint (run stage: pretrain-ae): " +
                                   ae_path(cfg));
    std::string hash;
    AutoencoderModel ae = load_autoencoder(ae_path(cfg), &hash);
    check_hash(hash, cfg, "autoencoder checkpoint", allow_mismatch);
    return ae;
}

int cmd_synth_data(const RunConfig& cfg) {
    DatasetManifest manifest = pipeline_synthesize(cfg);
    fs::create_directories(cfg.out_dir);
    save_manifest(manifest, cfg.out_dir);
    write_stage_config(cfg, "synth-data");
    std::cout << manifest_path(cfg) << "\n";
    return 0;
}

int cmd_pretrain_ae(const RunConfig& cfg) {
    DatasetManifest manifest = require_manifest(cfg);
    std::vector<double> curve;
    AutoencoderModel ae = pipeline_pretrain_ae(manifest, cfg, &curve);
    save_autoencoder(ae_path(cfg), ae, config_hash(cfg));
    std::string csv = "epoch,total_loss\n";
    for (size_t i = 0; i < curve.size(); ++i) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%zu,%.9f\n", i, curve[i]);
        csv += buf;
    }
    write_text_file((fs::path(cfg.out_dir) / "ae_loss.csv").string(), csv);
    write_stage_config(cfg, "pretrain-ae");
    std::cout << ae_path(cfg) << "\n";
    return 0;
}

int cmd_train_ldm(const RunConfig& cfg, bool allow_mismatch) {
    DatasetManifest manifest = require_manifest(cfg);
    AutoencoderModel ae = require_ae(cfg, allow_mismatch);
    auto augmenters = pipeline_fit_augmenters(manifest, ae, cfg);
    for (const auto& [label, aug] : augmenters)
        save_denoiser(ldm_path(cfg, label), aug.denoiser, aug.schedule, config_hash(cfg),
                      label);
    write_stage_config(cfg, "train-ldm");
    std::cout << ldm_path(cfg, 0) << "\n" << ldm_path(cfg, 1) << "\n";
    return 0;
}

std::map<int, ClassAugmenter> require_augmenters(const RunConfig& cfg, bool allow_mismatch) {
    std::map<int, ClassAugmenter> out;
    for (int label = 0; label <= 1; ++label) {
        if (!fs::exists(ldm_path(cfg, label)))
            throw MissingArtifactError(
                "missing denoiser checkpoint (run stage: train-ldm): " +
                ldm_path(cfg, label));
        ClassAugmenter aug;
        std::string hash;
        int stored_label = -1;
        aug.denoiser = load_denoiser(ldm_path(cfg, label), &aug.schedule, &hash,
                                     &stored_label);
        check_hash(hash, cfg, "denoiser checkpoint", allow_mismatch);
        aug.label = stored_label >= 0 ? stored_label : label;
        out.emplace(label, std::move(aug));
    }
    return out;
}

int cmd_augment(const RunConfig& cfg, bool allow_mismatch) {
    DatasetManifest manifest = require_manifest(cfg);
    AutoencoderModel ae = require_ae(cfg, allow_mismatch);
    FoldAssignment folds = pipeline_folds(manifest, cfg);
    std::map<int, ClassAugmenter> augmenters;
    if (!cfg.refit_per_fold) augmenters = require_augmenters(cfg, allow_mismatch);
    DatasetManifest augmented = pipeline_augment(manifest, folds, augmenters, ae, cfg);
    fs::create_directories(fs::path(cfg.out_dir) / "augmented");
    save_manifest(augmented, (fs::path(cfg.out_dir) / "augmented").string());
    write_stage_config(cfg, "augment");
    std::cout << aug_manifest_path(cfg) << "\n";
    return 0;
}

int cmd_train(const RunConfig& cfg, bool allow_mismatch) {
    ExperimentSpec spec = experiment_preset(cfg.experiment);
    DatasetManifest manifest;
    if (spec.augmented && cfg.aug_ratio > 0.0) {
        if (!fs::exists(aug_manifest_path(cfg)))
            throw MissingArtifactError("missing augmented manifest (run stage: augment): " +
                                       aug_manifest_path(cfg));
        manifest = load_manifest(aug_manifest_path(cfg));
    } else {
        manifest = require_manifest(cfg);
    }
    std::optional<AutoencoderModel> ae;
    std::string extractor_hash;
    if (spec.mode == ArchMode::Hybrid) {
        ae = require_ae(cfg, allow_mismatch);
        extractor_hash = hex64(fnv1a64(ae->params.flatten_f32().data(),
                                       ae->params.flatten_f32().size() * sizeof(float)));
    }
    FoldAssignment folds = pipeline_folds(manifest, cfg);
    CvResult cv = run_cv(manifest, folds, spec, cfg, ae ? &*ae : nullptr,
                         derive_seed(cfg.seed, "row-" + spec.name));

    for (int f = 0; f < folds.k; ++f) {
        std::string path =
            (fs::path(cfg.out_dir) / ("classifier_" + spec.name + "_fold" +
                                      std::to_string(f) + ".ckpt"))
                .string();
        save_classifier(path, cv.fold_models[static_cast<size_t>(f)], config_hash(cfg),
                        extractor_hash, f);
    }
    write_text_file((fs::path(cfg.out_dir) / ("metrics_" + spec.name + ".csv")).string(),
                    metrics_csv(cv.report));
    write_text_file((fs::path(cfg.out_dir) / ("metrics_" + spec.name + ".json")).string(),
                    metrics_json(cv.report).dump(2) + "\n");
    write_stage_config(cfg, "train");
    std::cout << metrics_csv(cv.report);
    return 0;
}

int cmd_evaluate(const RunConfig& cfg, const std::string& ckpt_path, bool allow_mismatch) {
    if (!fs::exists(ckpt_path))
        throw MissingArtifactError("missing classifier checkpoint (run stage: train): " +
                                   ckpt_path);
    std::string hash, extractor_hash;
    int fold_idx = -1;
    ClassifierModel model = load_classifier(ckpt_path, &hash, &extractor_hash, &fold_idx);
    check_hash(hash, cfg, "classifier checkpoint", allow_mismatch);
    DatasetManifest manifest = require_manifest(cfg);
    std::optional<AutoencoderModel> ae;
    if (model.desc.mode == ArchMode::Hybrid) ae = require_ae(cfg, allow_mismatch);
    FoldAssignment folds = pipeline_folds(manifest, cfg);
    FoldMetrics fm = evaluate_fold(manifest, folds, fold_idx, model, ae ? &*ae : nullptr);

    nlohmann::json j;
    j["config_hash"] = hash;
    j["fold"] = fm.fold;
    j["accuracy"] = fm.accuracy;
    j["auc"] = fm.auc;
    j["mean_loss"] = fm.final_val_loss;
    j["eval_ids"] = fm.eval_ids;
    std::string out = j.dump(2) + "\n";
    write_text_file((fs::path(cfg.out_dir) / "evaluate.json").string(), out);
    std::cout << out;
    return 0;
}

int cmd_saliency(const RunConfig& cfg, const std::string& ckpt_path, bool allow_mismatch) {
    if (!fs::exists(ckpt_path))
        throw MissingArtifactError("missing classifier checkpoint (run stage: train): " +
                                   ckpt_path);
    std::string hash, extractor_hash;
    int fold_idx = -1;
    ClassifierModel model = load_classifier(ckpt_path, &hash, &extractor_hash, &fold_idx);
    check_hash(hash, cfg, "classifier checkpoint", allow_mismatch);
    DatasetManifest manifest = require_manifest(cfg);
    std::optional<AutoencoderModel> ae;
    if (model.desc.mode == ArchMode::Hybrid) ae = require_ae(cfg, allow_mismatch);
    FoldAssignment folds = pipeline_folds(manifest, cfg);
    std::string sal_dir = (fs::path(cfg.out_dir) / "saliency").string();
    SaliencySummary summary = pipeline_saliency(manifest, folds, fold_idx, model,
                                                ae ? &*ae : nullptr, cfg, sal_dir, 2);
    write_text_file((fs::path(sal_dir) / "summary.json").string(),
                    saliency_summary_json(summary).dump(2) + "\n");
    std::cout << sal_dir << "/summary.json\n";
    return 0;
}

int cmd_matrix(const RunConfig& cfg, bool include_fnc_row) {
    DatasetManifest manifest = require_manifest(cfg);
    MatrixRun run = pipeline_matrix(manifest, cfg, include_fnc_row);
    fs::create_directories(cfg.out_dir);
    write_text_file((fs::path(cfg.out_dir) / "matrix.csv").string(), matrix_csv(run.table));
    write_text_file((fs::path(cfg.out_dir) / "matrix.json").string(),
                    matrix_json(run.table).dump(2) + "\n");
    for (size_t i = 0; i < run.table.rows.size(); ++i) {
        const auto& row = run.table.rows[i];
        if (!row.ok) continue;
        write_text_file(
            (fs::path(cfg.out_dir) / ("metrics_" + row.spec.name + ".csv")).string(),
            metrics_csv(row.report));
    }
    write_stage_config(cfg, "matrix");
    std::cout << matrix_csv(run.table);
    bool all_ok = true;
    for (const auto& row : run.table.rows) all_ok &= row.ok;
    return all_ok ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multimodal neuroimaging classification pipeline"};
    app.require_subcommand(1);

    GlobalOpts g;
    app.add_option("--config", g.config_path, "config JSON path");
    app.add_option("--seed", g.seed_override, "override config seed");
    app.add_option("--out", g.out_override, "override output directory");
    app.add_option("--preset", g.preset_override, "config preset (desk|paper)");
    app.add_flag("--allow-hash-mismatch", g.allow_hash_mismatch,
                 "accept artifacts produced by a different config");

    auto* synth = app.add_subcommand("synth-data", "generate the synthetic dataset");
    auto* pretrain = app.add_subcommand("pretrain-ae", "train the autoencoder");
    auto* ldm = app.add_subcommand("train-ldm", "train per-class latent diffusion models");
    auto* augment = app.add_subcommand("augment", "generate augmented training subjects");
    auto* train = app.add_subcommand("train", "cross-validated classifier training");
    auto* evaluate = app.add_subcommand("evaluate", "re-evaluate a saved classifier fold");
    auto* saliency = app.add_subcommand("saliency", "attention saliency maps for a fold");
    auto* matrix = app.add_subcommand("matrix", "run the full experiment grid");

    std::string ckpt_path;
    evaluate->add_option("--checkpoint", ckpt_path, "classifier checkpoint")->required();
    std::string sal_ckpt;
    saliency->add_option("--checkpoint", sal_ckpt, "classifier checkpoint")->required();
    bool include_fnc_row = false;
    matrix->add_flag("--with-fnc-row", include_fnc_row,
                     "append the unimodal FNC control row (not part of the grid)");

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg = resolve_config(g);
        if (synth->parsed()) return cmd_synth_data(cfg);
        if (pretrain->parsed()) return cmd_pretrain_ae(cfg);
        if (ldm->parsed()) return cmd_train_ldm(cfg, g.allow_hash_mismatch);
        if (augment->parsed()) return cmd_augment(cfg, g.allow_hash_mismatch);
        if (train->parsed()) return cmd_train(cfg, g.allow_hash_mismatch);
        if (evaluate->parsed()) return cmd_evaluate(cfg, ckpt_path, g.allow_hash_mismatch);
        if (saliency->parsed()) return cmd_saliency(cfg, sal_ckpt, g.allow_hash_mismatch);
        if (matrix->parsed()) return cmd_matrix(cfg, include_fnc_row);
        std::cerr << "no subcommand\n";
        return 1;
    } catch (const MissingArtifactError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
