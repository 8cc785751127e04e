#include "mvit/config.hpp"

#include <set>

#include "mvit/io.hpp"

namespace mvit {

AeDescriptor RunConfig::ae_descriptor() const {
    AeDescriptor d;
    d.in_dims = dims;
    d.channels = ae_channels;
    d.latent_channels = latent_channels;
    return d;
}

DenoiserDescriptor RunConfig::denoiser_descriptor() const {
    DenoiserDescriptor d;
    d.latent_shape = ae_descriptor().latent_shape();
    d.hidden = denoiser_hidden;
    d.time_embed_dim = time_embed_dim;
    return d;
}

double RunConfig::effective_beta_start() const {
    if (beta_start > 0.0) return beta_start;
    return std::min(1e-4 * 1000.0 / static_cast<double>(diffusion_T), 0.999);
}

double RunConfig::effective_beta_end() const {
    if (beta_end > 0.0) return beta_end;
    return std::min(0.02 * 1000.0 / static_cast<double>(diffusion_T), 0.999);
}

NoiseSchedule RunConfig::schedule() const {
    return make_schedule(ScheduleKind::Linear, effective_beta_start(), effective_beta_end(),
                         diffusion_T);
}

VitDescriptor RunConfig::vit_descriptor(ArchMode mode, bool use_lffm) const {
    VitDescriptor d;
    d.mode = mode;
    d.use_lffm = use_lffm && mode == ArchMode::Hybrid;
    d.embed_dim = embed_dim;
    d.layers = vit_layers;
    d.heads = heads;
    d.mlp_hidden = mlp_hidden;
    d.latent_patch = latent_patch;
    d.vol_patch = vol_patch;
    d.ambient_dims = dims;
    d.fnc_c = components;
    d.latent_shape = ae_descriptor().latent_shape();
    return d;
}

RunConfig default_config(const std::string& preset) {
    RunConfig cfg;
    cfg.preset = preset;
    if (preset == "desk") {
        // defaults above are the desk profile
    } else if (preset == "paper") {
        cfg.cls_epochs = 150;
        cfg.warmup_epochs = 20;
        cfg.base_lr = 3e-4;
        cfg.ae.epochs = 30;
        cfg.diffusion.steps = 2000;
    } else {
        throw ConfigError("unknown preset: " + preset);
    }
    return cfg;
}

namespace {

template <class T>
void get_if(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void get_dims(const nlohmann::json& j, const char* key, std::array<int64_t, 3>& out) {
    if (!j.contains(key)) return;
    auto v = j.at(key).get<std::vector<int64_t>>();
    if (v.size() != 3) throw ConfigError(std::string(key) + " must have 3 entries");
    out = {v[0], v[1], v[2]};
}

const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "preset", "dims", "components", "gen_mode", "n_subjects", "generator",
        "ae_channels", "latent_channels", "ae_lambda_recon", "ae_lambda_kl", "ae_lr",
        "ae_weight_decay", "ae_epochs", "ae_batch", "diffusion_T", "beta_start",
        "beta_end", "denoiser_hidden", "time_embed_dim", "diffusion_steps",
        "diffusion_batch", "diffusion_lr", "diffusion_weight_decay", "embed_dim",
        "vit_layers", "heads", "mlp_hidden", "latent_patch", "vol_patch", "cls_epochs",
        "cls_batch", "base_lr", "warmup_epochs", "plateau_factor", "plateau_patience",
        "plateau_threshold", "cls_weight_decay", "finetune_extractor", "aug_ratio",
        "refit_per_fold", "k_folds", "seed", "out_dir", "experiment"};
    return keys;
}

}  // namespace

RunConfig config_from_json(const nlohmann::json& j) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known_keys().count(it.key()))
            throw ConfigError("unknown config key: " + it.key());

    RunConfig cfg = default_config(j.value("preset", "desk"));
    get_dims(j, "dims", cfg.dims);
    get_if(j, "components", cfg.components);
    if (j.contains("gen_mode")) cfg.gen_mode = gen_mode_from(j.at("gen_mode").get<std::string>());
    get_if(j, "n_subjects", cfg.n_subjects);
    if (j.contains("generator")) cfg.generator = generator_config_from_json(j.at("generator"));
    get_if(j, "ae_channels", cfg.ae_channels);
    get_if(j, "latent_channels", cfg.latent_channels);
    get_if(j, "ae_lambda_recon", cfg.ae.lambda_recon);
    get_if(j, "ae_lambda_kl", cfg.ae.lambda_kl);
    get_if(j, "ae_lr", cfg.ae.lr);
    get_if(j, "ae_weight_decay", cfg.ae.weight_decay);
    get_if(j, "ae_epochs", cfg.ae.epochs);
    get_if(j, "ae_batch", cfg.ae.batch_size);
    get_if(j, "diffusion_T", cfg.diffusion_T);
    get_if(j, "beta_start", cfg.beta_start);
    get_if(j, "beta_end", cfg.beta_end);
    get_if(j, "denoiser_hidden", cfg.denoiser_hidden);
    get_if(j, "time_embed_dim", cfg.time_embed_dim);
    get_if(j, "diffusion_steps", cfg.diffusion.steps);
    get_if(j, "diffusion_batch", cfg.diffusion.batch_size);
    get_if(j, "diffusion_lr", cfg.diffusion.lr);
    get_if(j, "diffusion_weight_decay", cfg.diffusion.weight_decay);
    get_if(j, "embed_dim", cfg.embed_dim);
    get_if(j, "vit_layers", cfg.vit_layers);
    get_if(j, "heads", cfg.heads);
    get_if(j, "mlp_hidden", cfg.mlp_hidden);
    get_dims(j, "latent_patch", cfg.latent_patch);
    get_dims(j, "vol_patch", cfg.vol_patch);
    get_if(j, "cls_epochs", cfg.cls_epochs);
    get_if(j, "cls_batch", cfg.cls_batch);
    get_if(j, "base_lr", cfg.base_lr);
    get_if(j, "warmup_epochs", cfg.warmup_epochs);
    get_if(j, "plateau_factor", cfg.plateau.factor);
    get_if(j, "plateau_patience", cfg.plateau.patience);
    get_if(j, "plateau_threshold", cfg.plateau.threshold);
    get_if(j, "cls_weight_decay", cfg.cls_weight_decay);
    get_if(j, "finetune_extractor", cfg.finetune_extractor);
    get_if(j, "aug_ratio", cfg.aug_ratio);
    get_if(j, "refit_per_fold", cfg.refit_per_fold);
    get_if(j, "k_folds", cfg.k_folds);
    get_if(j, "seed", cfg.seed);
    get_if(j, "out_dir", cfg.out_dir);
    get_if(j, "experiment", cfg.experiment);

    // validate every stage's preconditions up front
    if (cfg.n_subjects < 10 || cfg.n_subjects % 2)
        throw ConfigError("n_subjects must be even and >= 10");
    if (cfg.components < 4) throw ConfigError("components must be >= 4");
    if (cfg.diffusion_T < 1) throw ConfigError("diffusion_T must be >= 1");
    if (cfg.k_folds < 2) throw ConfigError("k_folds must be >= 2");
    if (cfg.aug_ratio < 0.0) throw ConfigError("aug_ratio must be >= 0");
    if (cfg.base_lr <= 0.0 || cfg.ae.lr <= 0.0 || cfg.diffusion.lr <= 0.0)
        throw ConfigError("learning rates must be positive");
    if (cfg.cls_epochs < 0 || cfg.ae.epochs < 0 || cfg.diffusion.steps < 0)
        throw ConfigError("epoch/step counts must be nonnegative");
    if (cfg.embed_dim % cfg.heads) throw ConfigError("embed_dim must be divisible by heads");
    cfg.generator.dims = cfg.dims;
    cfg.generator.c = cfg.components;
    cfg.generator.mode = cfg.gen_mode;
    cfg.ae_descriptor();        // throws on inconsistent dims
    cfg.vit_descriptor(ArchMode::Hybrid, true).primary_tokens();  // divisibility
    cfg.vit_descriptor(ArchMode::VitMri, false).primary_tokens();
    return cfg;
}

RunConfig load_config(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("bad config JSON in " + path + ": " + e.what());
    }
    return config_from_json(j);
}

nlohmann::json config_json(const RunConfig& cfg) {
    nlohmann::json j;
    j["preset"] = cfg.preset;
    j["dims"] = cfg.dims;
    j["components"] = cfg.components;
    j["gen_mode"] = gen_mode_name(cfg.gen_mode);
    j["n_subjects"] = cfg.n_subjects;
    j["generator"] = generator_config_json(cfg.generator);
    j["ae_channels"] = cfg.ae_channels;
    j["latent_channels"] = cfg.latent_channels;
    j["ae_lambda_recon"] = cfg.ae.lambda_recon;
    j["ae_lambda_kl"] = cfg.ae.lambda_kl;
    j["ae_lr"] = cfg.ae.lr;
    j["ae_weight_decay"] = cfg.ae.weight_decay;
    j["ae_epochs"] = cfg.ae.epochs;
    j["ae_batch"] = cfg.ae.batch_size;
    j["diffusion_T"] = cfg.diffusion_T;
    j["beta_start"] = cfg.beta_start;
    j["beta_end"] = cfg.beta_end;
    j["denoiser_hidden"] = cfg.denoiser_hidden;
    j["time_embed_dim"] = cfg.time_embed_dim;
    j["diffusion_steps"] = cfg.diffusion.steps;
    j["diffusion_batch"] = cfg.diffusion.batch_size;
    j["diffusion_lr"] = cfg.diffusion.lr;
    j["diffusion_weight_decay"] = cfg.diffusion.weight_decay;
    j["embed_dim"] = cfg.embed_dim;
    j["vit_layers"] = cfg.vit_layers;
    j["heads"] = cfg.heads;
    j["mlp_hidden"] = cfg.mlp_hidden;
    j["latent_patch"] = cfg.latent_patch;
    j["vol_patch"] = cfg.vol_patch;
    j["cls_epochs"] = cfg.cls_epochs;
    j["cls_batch"] = cfg.cls_batch;
    j["base_lr"] = cfg.base_lr;
    j["warmup_epochs"] = cfg.warmup_epochs;
    j["plateau_factor"] = cfg.plateau.factor;
    j["plateau_patience"] = cfg.plateau.patience;
    j["plateau_threshold"] = cfg.plateau.threshold;
    j["cls_weight_decay"] = cfg.cls_weight_decay;
    j["finetune_extractor"] = cfg.finetune_extractor;
    j["aug_ratio"] = cfg.aug_ratio;
    j["refit_per_fold"] = cfg.refit_per_fold;
    j["k_folds"] = cfg.k_folds;
    j["seed"] = cfg.seed;
    j["out_dir"] = cfg.out_dir;
    j["experiment"] = cfg.experiment;
    return j;
}

std::string config_hash(const RunConfig& cfg) {
    return hex64(fnv1a64(config_json(cfg).dump()));
}

}  // namespace mvit
