#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "mvit/autoencoder.hpp"
#include "mvit/data.hpp"
#include "mvit/diffusion.hpp"
#include "mvit/vit.hpp"

#include <json.hpp>

namespace mvit {

struct PlateauConfig {
    double factor = 0.5;
    int patience = 10;
    double threshold = 1e-4;
};

// One JSON document drives every stage. The "desk" preset targets
// minutes-scale CPU runs; "paper" keeps the published training constants
// (lr 3e-4, 150 epochs, 20-epoch warm-up).
struct RunConfig {
    std::string preset = "desk";

    // data
    std::array<int64_t, 3> dims{24, 28, 24};
    int64_t components = 16;  // FNC matrix size C
    GenMode gen_mode = GenMode::Additive;
    int64_t n_subjects = 200;
    GeneratorConfig generator;

    // autoencoder
    std::vector<int64_t> ae_channels{16, 32};
    int64_t latent_channels = 4;
    AeHyper ae;

    // diffusion
    int diffusion_T = 50;
    double beta_start = 0.0;  // 0 -> derived from T (1e-4 * 1000/T)
    double beta_end = 0.0;    // 0 -> derived from T (0.02 * 1000/T)
    int64_t denoiser_hidden = 16;
    int64_t time_embed_dim = 16;
    DiffusionHyper diffusion;

    // classifier
    int64_t embed_dim = 32;
    int64_t vit_layers = 2;
    int64_t heads = 4;
    int64_t mlp_hidden = 64;
    std::array<int64_t, 3> latent_patch{1, 2, 1};
    std::array<int64_t, 3> vol_patch{6, 7, 6};
    int cls_epochs = 30;
    int cls_batch = 16;
    double base_lr = 3e-4;
    int warmup_epochs = 5;
    PlateauConfig plateau;
    double cls_weight_decay = 1e-4;
    bool finetune_extractor = false;

    // augmentation
    double aug_ratio = 0.5;
    bool refit_per_fold = false;

    // evaluation
    int k_folds = 5;

    uint64_t seed = 7;
    std::string out_dir = "out";
    std::string experiment = "MultiViT2";  // row used by the train stage

    AeDescriptor ae_descriptor() const;
    DenoiserDescriptor denoiser_descriptor() const;
    NoiseSchedule schedule() const;
    VitDescriptor vit_descriptor(ArchMode mode, bool use_lffm) const;
    double effective_beta_start() const;
    double effective_beta_end() const;
};

RunConfig default_config(const std::string& preset = "desk");

// Parses a config document: the preset field selects the base profile and
// any present field overrides it. Unknown keys are rejected.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::string& path);
nlohmann::json config_json(const RunConfig& cfg);

// FNV-1a over the canonical JSON dump; embedded in every artifact.
std::string config_hash(const RunConfig& cfg);

}  // namespace mvit
