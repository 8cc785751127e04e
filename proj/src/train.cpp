#include "mvit/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "mvit/lffm.hpp"
#include "mvit/rng.hpp"

namespace mvit {

std::vector<ExperimentSpec> experiment_matrix_presets() {
    return {
        {"Baseline1", "ViT", "MRI", ArchMode::VitMri, false, false, "-", "-"},
        {"Baseline2", "MultiViT", "MRI/FNC", ArchMode::MultiVit1, false, false, "No", "No"},
        {"Ablation1", "CNN/ViT", "MRI/FNC", ArchMode::Hybrid, false, true, "No", "Yes"},
        {"Ablation2", "CNN/ViT", "MRI/FNC", ArchMode::Hybrid, true, false, "Yes", "No"},
        {"MultiViT2", "MultiViT2", "MRI/FNC", ArchMode::Hybrid, true, true, "Yes", "Yes"},
    };
}

ExperimentSpec experiment_preset(const std::string& name) {
    for (const auto& s : experiment_matrix_presets())
        if (s.name == name) return s;
    if (name == "Baseline1-FNC")  // unimodal FNC control; not a grid row
        return {"Baseline1-FNC", "ViT", "FNC", ArchMode::VitFnc, false, false, "-", "-"};
    throw ConfigError("unknown experiment preset: " + name);
}

namespace {

struct FoldData {
    std::vector<const SubjectRecord*> train;
    std::vector<const SubjectRecord*> eval;
};

FoldData split_fold(const DatasetManifest& manifest, const FoldAssignment& folds,
                    int fold_idx, bool use_augmented) {
    if (fold_idx < 0 || fold_idx >= folds.k)
        throw ConfigError("train_one_fold: fold index out of range");
    FoldData fd;
    for (const auto& s : manifest.subjects) {
        if (s.provenance == Provenance::LdmAugmented) {
            bool tagged = std::find(s.train_folds.begin(), s.train_folds.end(), fold_idx) !=
                          s.train_folds.end();
            if (use_augmented && tagged) fd.train.push_back(&s);
            continue;
        }
        auto it = folds.fold_of.find(s.id);
        if (it == folds.fold_of.end())
            throw DataError("subject missing from fold assignment: " + s.id);
        if (it->second == fold_idx)
            fd.eval.push_back(&s);
        else
            fd.train.push_back(&s);
    }

    // leakage audit: hard assertions, not statistics
    std::set<std::string> train_ids, eval_ids;
    for (const auto* s : fd.train) train_ids.insert(s->id);
    for (const auto* s : fd.eval) {
        if (s->provenance == Provenance::LdmAugmented)
            throw DataError("leakage: augmented record in evaluation set: " + s->id);
        eval_ids.insert(s->id);
    }
    for (const auto& id : eval_ids)
        if (train_ids.count(id))
            throw DataError("leakage: subject in both training and evaluation: " + id);
    return fd;
}

// frozen-extractor latents, computed once per subject
std::map<std::string, Tensor> build_latent_cache(const std::vector<const SubjectRecord*>& all,
                                                 const AutoencoderModel& ae) {
    std::map<std::string, Tensor> cache;
    std::vector<const SubjectRecord*> todo(all.begin(), all.end());
    std::vector<Tensor> latents(todo.size());
    parallel_for(static_cast<int64_t>(todo.size()), [&](int64_t i) {
        latents[static_cast<size_t>(i)] =
            extract_latent(*todo[static_cast<size_t>(i)]->volume, ae);
    });
    for (size_t i = 0; i < todo.size(); ++i) cache[todo[i]->id] = std::move(latents[i]);
    return cache;
}

struct EvalOutcome {
    std::vector<std::array<double, 2>> probs;
    std::vector<int> labels;
    double mean_loss = 0.0;
};

EvalOutcome evaluate_subjects(const std::vector<const SubjectRecord*>& subjects,
                              const ClassifierModel& model, const AutoencoderModel* ae,
                              const std::map<std::string, Tensor>& latents) {
    EvalOutcome out;
    out.probs.resize(subjects.size());
    out.labels.resize(subjects.size());
    std::vector<double> losses(subjects.size());
    parallel_for(static_cast<int64_t>(subjects.size()), [&](int64_t i) {
        const auto* s = subjects[static_cast<size_t>(i)];
        const Tensor* cached = nullptr;
        auto it = latents.find(s->id);
        if (it != latents.end()) cached = &it->second;
        auto fr = classifier_forward(*s->volume, *s->fnc, model, ae, cached,
                                     /*want_attention=*/false);
        out.probs[static_cast<size_t>(i)] = fr.probs;
        out.labels[static_cast<size_t>(i)] = s->label;
        losses[static_cast<size_t>(i)] =
            ops::cross_entropy_logits(fr.logits, s->label)->value.value();
    });
    for (double l : losses) out.mean_loss += l;
    if (!subjects.empty()) out.mean_loss /= static_cast<double>(subjects.size());
    return out;
}

}  // namespace

FoldResult train_one_fold(const DatasetManifest& manifest, const FoldAssignment& folds,
                          int fold_idx, const ExperimentSpec& spec, const RunConfig& cfg,
                          const AutoencoderModel* ae, uint64_t seed) {
    VitDescriptor desc = cfg.vit_descriptor(spec.mode, spec.lffm);
    if (desc.needs_extractor() && !ae)
        throw MissingArtifactError("experiment " + spec.name +
                                   " needs a pretrained autoencoder (pretrain-ae)");

    FoldData fd = split_fold(manifest, folds, fold_idx, spec.augmented);
    if (fd.train.empty() || fd.eval.empty())
        throw DataError("train_one_fold: empty train or eval split");

    ClassifierModel model = make_classifier(desc, derive_seed(seed, "cls-init"));

    std::map<std::string, Tensor> latents;
    if (desc.needs_extractor() && !cfg.finetune_extractor) {
        std::vector<const SubjectRecord*> all = fd.train;
        all.insert(all.end(), fd.eval.begin(), fd.eval.end());
        latents = build_latent_cache(all, *ae);
    }

    LRState lrs = make_lr_state(cfg.base_lr, cfg.warmup_epochs, cfg.plateau.factor,
                                cfg.plateau.patience, cfg.plateau.threshold);
    AdamWHyper ah;
    ah.lr = cfg.base_lr;
    ah.weight_decay = cfg.cls_weight_decay;
    OptimizerState opt = make_optimizer(model.params, ah);

    Rng order_rng(derive_seed(seed, "cls-order"));
    double val_loss = 1e300;

    for (int epoch = 0; epoch < cfg.cls_epochs; ++epoch) {
        double lr = lr_at(epoch, val_loss, lrs);
        opt.hyper.lr = lr;

        std::vector<size_t> order(fd.train.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        order_rng.shuffle(order);

        double epoch_loss = 0.0;
        for (size_t start = 0; start < order.size();
             start += static_cast<size_t>(cfg.cls_batch)) {
            size_t bsz = std::min(static_cast<size_t>(cfg.cls_batch), order.size() - start);
            std::vector<std::vector<Tensor>> grads(bsz);
            std::vector<double> losses(bsz);
            parallel_for(static_cast<int64_t>(bsz), [&](int64_t bi) {
                const auto* s = fd.train[order[start + static_cast<size_t>(bi)]];
                const Tensor* cached = nullptr;
                auto it = latents.find(s->id);
                if (it != latents.end()) cached = &it->second;
                auto fr = classifier_forward(*s->volume, *s->fnc, model, ae, cached,
                                             /*want_attention=*/false);
                Var loss = ops::cross_entropy_logits(fr.logits, s->label);
                losses[bi] = loss->value.value();
                GradMap gm;
                backward(loss, gm);
                grads[bi] = gather_grads(model.params, gm);
            });
            std::vector<Tensor> total = std::move(grads[0]);
            for (size_t b = 1; b < bsz; ++b)
                for (size_t k = 0; k < total.size(); ++k) total[k].add_(grads[b][k]);
            double inv = 1.0 / static_cast<double>(bsz);
            for (auto& g : total) g.scale_(inv);
            double batch_loss = 0.0;
            for (double l : losses) batch_loss += l;
            batch_loss *= inv;
            if (!std::isfinite(batch_loss))
                throw NumericError("train_one_fold: loss diverged at epoch " +
                                   std::to_string(epoch));
            epoch_loss += batch_loss * static_cast<double>(bsz);
            adamw_step(model.params, total, opt);
        }
        (void)epoch_loss;
        val_loss = evaluate_subjects(fd.eval, model, ae, latents).mean_loss;
    }

    EvalOutcome ev = evaluate_subjects(fd.eval, model, ae, latents);
    std::vector<double> scores;
    scores.reserve(ev.probs.size());
    for (const auto& p : ev.probs) scores.push_back(p[1]);

    FoldResult res{std::move(model), {}};
    res.metrics.fold = fold_idx;
    res.metrics.accuracy = compute_accuracy(ev.probs, ev.labels);
    res.metrics.auc = compute_auc(scores, ev.labels);
    res.metrics.final_val_loss = ev.mean_loss;
    for (const auto* s : fd.eval) res.metrics.eval_ids.push_back(s->id);
    return res;
}

CvResult run_cv(const DatasetManifest& manifest, const FoldAssignment& folds,
                const ExperimentSpec& spec, const RunConfig& cfg,
                const AutoencoderModel* ae, uint64_t seed) {
    CvResult res;
    res.report.experiment = spec.name;
    res.report.k = folds.k;
    res.report.config_hash = config_hash(cfg);
    res.report.seed = seed;

    // CV partition sanity: evaluation sets must tile the real subjects
    std::set<std::string> assigned;
    int64_t real_count = 0;
    for (const auto& s : manifest.subjects)
        if (s.provenance != Provenance::LdmAugmented) ++real_count;
    for (const auto& [id, f] : folds.fold_of) {
        if (f < 0 || f >= folds.k) throw DataError("run_cv: fold index out of range");
        assigned.insert(id);
    }
    if (static_cast<int64_t>(assigned.size()) != real_count)
        throw DataError("run_cv: fold assignment does not cover the manifest");

    for (int f = 0; f < folds.k; ++f) {
        FoldResult fr = train_one_fold(manifest, folds, f, spec, cfg, ae,
                                       derive_seed(seed, static_cast<uint64_t>(f)));
        res.report.folds.push_back(fr.metrics);
        res.fold_models.push_back(std::move(fr.model));
        res.report.mean_accuracy += fr.metrics.accuracy;
        res.report.mean_auc += fr.metrics.auc;
    }
    res.report.mean_accuracy /= static_cast<double>(folds.k);
    res.report.mean_auc /= static_cast<double>(folds.k);
    return res;
}

namespace {
std::string fmt6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}
}  // namespace

std::string metrics_csv(const MetricsReport& report) {
    std::string out = "fold,accuracy,auc\n";
    for (const auto& f : report.folds)
        out += std::to_string(f.fold) + "," + fmt6(f.accuracy) + "," + fmt6(f.auc) + "\n";
    out += "mean," + fmt6(report.mean_accuracy) + "," + fmt6(report.mean_auc) + "\n";
    return out;
}

nlohmann::json metrics_json(const MetricsReport& report) {
    nlohmann::json j;
    j["experiment"] = report.experiment;
    j["k"] = report.k;
    j["config_hash"] = report.config_hash;
    j["seed"] = report.seed;
    j["mean_accuracy"] = report.mean_accuracy;
    j["mean_auc"] = report.mean_auc;
    j["folds"] = nlohmann::json::array();
    for (const auto& f : report.folds)
        j["folds"].push_back({{"fold", f.fold},
                              {"accuracy", f.accuracy},
                              {"auc", f.auc},
                              {"final_val_loss", f.final_val_loss},
                              {"eval_ids", f.eval_ids}});
    return j;
}

std::string matrix_csv(const MatrixResult& m) {
    std::string out = "Name,Main Model,Data,LFFM,Augmented,Accuracy,AUC\n";
    for (const auto& r : m.rows) {
        out += r.spec.name + "," + r.spec.main_model + "," + r.spec.data_label + "," +
               r.spec.lffm_flag + "," + r.spec.aug_flag + ",";
        if (r.ok)
            out += fmt6(r.accuracy) + "," + fmt6(r.auc);
        else
            out += "failed,failed";
        out += "\n";
    }
    return out;
}

nlohmann::json matrix_json(const MatrixResult& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : m.rows) {
        nlohmann::json row;
        row["Name"] = r.spec.name;
        row["Main Model"] = r.spec.main_model;
        row["Data"] = r.spec.data_label;
        row["LFFM"] = r.spec.lffm_flag;
        row["Augmented"] = r.spec.aug_flag;
        if (r.ok) {
            row["Accuracy"] = r.accuracy;
            row["AUC"] = r.auc;
        } else {
            row["Accuracy"] = nullptr;
            row["AUC"] = nullptr;
            row["error"] = r.error;
        }
        rows.push_back(std::move(row));
    }
    return nlohmann::json{{"rows", rows}};
}

}  // namespace mvit
