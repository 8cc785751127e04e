#include "mvit/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "mvit/common.hpp"
#include "mvit/io.hpp"
#include "mvit/optim.hpp"
#include "mvit/rng.hpp"

namespace mvit {

NoiseSchedule make_schedule(ScheduleKind kind, double beta_start, double beta_end, int T) {
    if (kind != ScheduleKind::Linear) throw ConfigError("make_schedule: unknown kind");
    if (T < 1) throw ConfigError("make_schedule: T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ConfigError("make_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.betas.resize(static_cast<size_t>(T));
    if (T == 1) {
        s.betas[0] = beta_start;
    } else {
        for (int t = 0; t < T; ++t)
            s.betas[static_cast<size_t>(t)] =
                beta_start + (beta_end - beta_start) * static_cast<double>(t) /
                                 static_cast<double>(T - 1);
    }
    s.alphas.resize(static_cast<size_t>(T));
    s.alpha_bars.resize(static_cast<size_t>(T));
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        s.alphas[static_cast<size_t>(t)] = 1.0 - s.betas[static_cast<size_t>(t)];
        prod *= s.alphas[static_cast<size_t>(t)];
        s.alpha_bars[static_cast<size_t>(t)] = prod;
    }
    return s;
}

NoiseSchedule default_schedule(int T) {
    double scale = 1000.0 / static_cast<double>(T);
    double bs = std::min(1e-4 * scale, 0.999);
    double be = std::min(0.02 * scale, 0.999);
    return make_schedule(ScheduleKind::Linear, bs, be, T);
}

DenoiserModel make_denoiser(const DenoiserDescriptor& desc, uint64_t seed) {
    if (desc.latent_shape.size() != 4) throw ConfigError("denoiser: latent must be rank 4");
    if (desc.time_embed_dim % 2) throw ConfigError("denoiser: time_embed_dim must be even");
    DenoiserModel model;
    model.desc = desc;
    Rng rng(derive_seed(seed, "denoiser-init"));
    auto& p = model.params;
    int64_t c = desc.latent_shape[0], h = desc.hidden, e = desc.time_embed_dim;
    p.add("time.w", glorot_uniform({e, h}, e, h, rng));
    p.add("time.b", Tensor::zeros({h}));
    p.add("conv_in.w", glorot_uniform({h, c, 3, 9}, c * 27, h * 27, rng));
    p.add("conv_in.b", Tensor::zeros({h}));
    p.add("conv_mid.w", glorot_uniform({h, h, 3, 9}, h * 27, h * 27, rng));
    p.add("conv_mid.b", Tensor::zeros({h}));
    p.add("conv_out.w", glorot_uniform({c, h, 3, 9}, h * 27, c * 27, rng));
    p.add("conv_out.b", Tensor::zeros({c}));
    return model;
}

Tensor sinusoidal_embedding(int t, int64_t dim) {
    Tensor e({dim});
    int64_t half = dim / 2;
    for (int64_t i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                               static_cast<double>(half));
        e[2 * i] = std::sin(t * freq);
        e[2 * i + 1] = std::cos(t * freq);
    }
    return e;
}

Tensor forward_step(const Tensor& z_prev, double beta_t, const Tensor& noise) {
    if (!z_prev.same_shape(noise)) throw ShapeError("forward_step: shape mismatch");
    if (beta_t < 0.0 || beta_t > 1.0) throw ConfigError("forward_step: beta out of [0,1]");
    Tensor out(z_prev.shape());
    double a = std::sqrt(1.0 - beta_t), b = std::sqrt(beta_t);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a * z_prev[i] + b * noise[i];
    return out;
}

Tensor forward_marginal(const Tensor& z0, int t, const NoiseSchedule& schedule,
                        const Tensor& noise) {
    if (t < 1 || t > schedule.T) throw ConfigError("forward_marginal: t out of range");
    if (!z0.same_shape(noise)) throw ShapeError("forward_marginal: shape mismatch");
    double ab = schedule.alpha_bar(t);
    double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Tensor out(z0.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a * z0[i] + b * noise[i];
    return out;
}

Var predict_noise_var(const Var& z_t, int t, const DenoiserModel& model) {
    if (z_t->value.shape() != model.desc.latent_shape)
        throw ShapeError("predict_noise: latent shape mismatch");
    const auto& p = model.params;
    Var emb = constant(sinusoidal_embedding(t, model.desc.time_embed_dim));
    // [1,E] x [E,H] -> [1,H] -> [H]
    Var tb = ops::reshape(
        ops::linear(ops::reshape(emb, {1, model.desc.time_embed_dim}), p.get("time.w"),
                    p.get("time.b")),
        {model.desc.hidden});
    Var h = ops::conv3d(z_t, p.get("conv_in.w"), p.get("conv_in.b"), 1, 1);
    h = ops::add_channel_bias(h, tb);
    h = ops::gelu(h);
    h = ops::gelu(ops::conv3d(h, p.get("conv_mid.w"), p.get("conv_mid.b"), 1, 1));
    h = ops::conv3d(h, p.get("conv_out.w"), p.get("conv_out.b"), 1, 1);
    if (!h->value.all_finite())
        throw NumericError("predict_noise: non-finite activation at t=" + std::to_string(t));
    return h;
}

Tensor predict_noise(const Tensor& z_t, int t, const DenoiserModel& model) {
    return predict_noise_var(constant(z_t), t, model)->value;
}

Tensor denoise_step(const Tensor& z_t, int t, const DenoiserModel& model,
                    const NoiseSchedule& schedule, const Tensor& noise) {
    if (t < 1 || t > schedule.T) throw ConfigError("denoise_step: t out of range");
    if (!z_t.same_shape(noise)) throw ShapeError("denoise_step: shape mismatch");
    Tensor eps = predict_noise(z_t, t, model);
    double beta = schedule.beta(t);
    double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha(t));
    double coef = beta / std::sqrt(1.0 - schedule.alpha_bar(t));
    double sigma = t > 1 ? std::sqrt(beta) : 0.0;
    Tensor out(z_t.shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        double mu = inv_sqrt_alpha * (z_t[i] - coef * eps[i]);
        out[i] = t > 1 ? mu + sigma * noise[i] : mu;
    }
    return out;
}

Tensor sample(const DenoiserModel& model, const NoiseSchedule& schedule, uint64_t seed) {
    Rng rng(derive_seed(seed, "ldm-sample"));
    Tensor z(model.desc.latent_shape);
    for (int64_t i = 0; i < z.numel(); ++i) z[i] = rng.normal();
    Tensor noise(model.desc.latent_shape);
    for (int t = schedule.T; t >= 1; --t) {
        if (t > 1)
            for (int64_t i = 0; i < noise.numel(); ++i) noise[i] = rng.normal();
        else
            noise.fill_(0.0);
        z = denoise_step(z, t, model, schedule, noise);
        if (!z.all_finite())
            throw NumericError("sample: non-finite latent at timestep " + std::to_string(t));
    }
    return z;
}

Var diffusion_train_loss_var(const DenoiserModel& model, const NoiseSchedule& schedule,
                             const Tensor& z0, int t, const Tensor& noise) {
    if (!z0.same_shape(noise)) throw ShapeError("diffusion_train_loss: shape mismatch");
    Tensor z_t = forward_marginal(z0, t, schedule, noise);
    Var eps_hat = predict_noise_var(constant(z_t), t, model);
    return ops::mse(constant(noise), eps_hat);
}

double diffusion_train_loss(const DenoiserModel& model, const NoiseSchedule& schedule,
                            const Tensor& z0, int t, const Tensor& noise) {
    return diffusion_train_loss_var(model, schedule, z0, t, noise)->value.value();
}

std::vector<double> train_denoiser(const std::vector<Tensor>& latent_corpus,
                                   DenoiserModel& model, const NoiseSchedule& schedule,
                                   const DiffusionHyper& hyper, uint64_t seed) {
    if (latent_corpus.empty()) throw DataError("train_denoiser: empty latent corpus");
    for (const auto& z : latent_corpus)
        if (z.shape() != model.desc.latent_shape)
            throw ShapeError("train_denoiser: corpus latent shape mismatch");

    AdamWHyper ah;
    ah.lr = hyper.lr;
    ah.weight_decay = hyper.weight_decay;
    OptimizerState opt = make_optimizer(model.params, ah);

    Rng pick_rng(derive_seed(seed, "ldm-pick"));
    uint64_t noise_root = derive_seed(seed, "ldm-noise");
    std::vector<double> curve;
    curve.reserve(static_cast<size_t>(hyper.steps));

    for (int step = 0; step < hyper.steps; ++step) {
        size_t bsz = static_cast<size_t>(hyper.batch_size);
        struct Draw {
            size_t idx;
            int t;
            uint64_t nseed;
        };
        std::vector<Draw> draws(bsz);
        for (size_t b = 0; b < bsz; ++b) {
            draws[b].idx = static_cast<size_t>(
                pick_rng.uniform_int(0, static_cast<int64_t>(latent_corpus.size()) - 1));
            draws[b].t = static_cast<int>(pick_rng.uniform_int(1, schedule.T));
            draws[b].nseed = derive_seed(
                noise_root, static_cast<uint64_t>(step) * 1000003ULL + b);
        }

        std::vector<std::vector<Tensor>> grads(bsz);
        std::vector<double> losses(bsz);
        parallel_for(static_cast<int64_t>(bsz), [&](int64_t bi) {
            const Draw& d = draws[static_cast<size_t>(bi)];
            Rng nrng(d.nseed);
            Tensor noise(model.desc.latent_shape);
            for (int64_t i = 0; i < noise.numel(); ++i) noise[i] = nrng.normal();
            Var loss =
                diffusion_train_loss_var(model, schedule, latent_corpus[d.idx], d.t, noise);
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
        double loss = 0.0;
        for (double l : losses) loss += l;
        loss *= inv;
        if (!std::isfinite(loss))
            throw NumericError("train_denoiser: loss diverged at step " + std::to_string(step));
        curve.push_back(loss);
        adamw_step(model.params, total, opt);
    }
    return curve;
}

void save_denoiser(const std::string& path, const DenoiserModel& model,
                   const NoiseSchedule& schedule, const std::string& config_hash,
                   int label) {
    Checkpoint ckpt;
    ckpt.header["kind"] = "denoiser";
    ckpt.header["config_hash"] = config_hash;
    ckpt.header["label"] = label;
    nlohmann::json d;
    d["latent_shape"] = model.desc.latent_shape;
    d["hidden"] = model.desc.hidden;
    d["time_embed_dim"] = model.desc.time_embed_dim;
    ckpt.header["descriptor"] = d;
    ckpt.header["schedule"] = {{"kind", "linear"},
                               {"T", schedule.T},
                               {"betas", schedule.betas}};
    nlohmann::json params = nlohmann::json::array();
    for (const auto& p : model.params.all())
        params.push_back({{"name", p->name}, {"shape", p->value.shape()}});
    ckpt.header["params"] = params;
    ckpt.payload = model.params.flatten_f32();
    write_checkpoint(path, ckpt);
}

DenoiserModel load_denoiser(const std::string& path, NoiseSchedule* schedule,
                            std::string* config_hash, int* label) {
    Checkpoint ckpt = read_checkpoint(path);
    if (ckpt.header.value("kind", "") != "denoiser")
        throw DataError("checkpoint is not a denoiser: " + path);
    DenoiserDescriptor desc;
    const auto& d = ckpt.header.at("descriptor");
    desc.latent_shape = d.at("latent_shape").get<std::vector<int64_t>>();
    desc.hidden = d.at("hidden").get<int64_t>();
    desc.time_embed_dim = d.at("time_embed_dim").get<int64_t>();
    DenoiserModel model = make_denoiser(desc, 0);
    model.params.load_flat_f32(ckpt.payload);
    if (schedule) {
        const auto& sj = ckpt.header.at("schedule");
        NoiseSchedule s;
        s.T = sj.at("T").get<int>();
        s.betas = sj.at("betas").get<std::vector<double>>();
        s.alphas.resize(s.betas.size());
        s.alpha_bars.resize(s.betas.size());
        double prod = 1.0;
        for (size_t i = 0; i < s.betas.size(); ++i) {
            s.alphas[i] = 1.0 - s.betas[i];
            prod *= s.alphas[i];
            s.alpha_bars[i] = prod;
        }
        *schedule = s;
    }
    if (config_hash) *config_hash = ckpt.header.value("config_hash", "");
    if (label) *label = ckpt.header.value("label", -1);
    return model;
}

}  // namespace mvit
