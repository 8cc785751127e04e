#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mvit/autodiff.hpp"
#include "mvit/tensor.hpp"

namespace mvit {

// beta/alpha/alpha_bar tables for T timesteps (1-based t in the API).
struct NoiseSchedule {
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;
    int T = 0;

    double beta(int t) const { return betas[static_cast<size_t>(t - 1)]; }
    double alpha(int t) const { return alphas[static_cast<size_t>(t - 1)]; }
    double alpha_bar(int t) const { return alpha_bars[static_cast<size_t>(t - 1)]; }
};

enum class ScheduleKind { Linear };

NoiseSchedule make_schedule(ScheduleKind kind, double beta_start, double beta_end, int T);

// Default linear schedule scaled so the total noise budget matches the
// common 1000-step convention at any T.
NoiseSchedule default_schedule(int T);

// Noise-prediction network over the latent grid: conv stack with an
// additive sinusoidal timestep embedding projected onto the hidden
// channels.
struct DenoiserDescriptor {
    std::vector<int64_t> latent_shape;  // {C_z, d_z, h_z, w_z}
    int64_t hidden = 16;
    int64_t time_embed_dim = 16;
};

struct DenoiserModel {
    DenoiserDescriptor desc;
    ParamStore params;
};

DenoiserModel make_denoiser(const DenoiserDescriptor& desc, uint64_t seed);

Tensor sinusoidal_embedding(int t, int64_t dim);

// forward process
// sqrt(1-beta_t)*z_prev + sqrt(beta_t)*noise
Tensor forward_step(const Tensor& z_prev, double beta_t, const Tensor& noise);
// sqrt(abar_t)*z0 + sqrt(1-abar_t)*noise
Tensor forward_marginal(const Tensor& z0, int t, const NoiseSchedule& schedule,
                        const Tensor& noise);

// reverse process
Var predict_noise_var(const Var& z_t, int t, const DenoiserModel& model);
Tensor predict_noise(const Tensor& z_t, int t, const DenoiserModel& model);
// mu = (z_t - beta_t/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t);
// adds sqrt(beta_t)*noise for t > 1, returns mu exactly at t == 1
Tensor denoise_step(const Tensor& z_t, int t, const DenoiserModel& model,
                    const NoiseSchedule& schedule, const Tensor& noise);
// ancestral sampler from z_T ~ N(0, I), deterministic given seed
Tensor sample(const DenoiserModel& model, const NoiseSchedule& schedule, uint64_t seed);

// eps-matching objective: mse(noise, eps_hat(forward_marginal(z0,t,noise), t))
Var diffusion_train_loss_var(const DenoiserModel& model, const NoiseSchedule& schedule,
                             const Tensor& z0, int t, const Tensor& noise);
double diffusion_train_loss(const DenoiserModel& model, const NoiseSchedule& schedule,
                            const Tensor& z0, int t, const Tensor& noise);

struct DiffusionHyper {
    int steps = 400;
    int batch_size = 16;
    double lr = 1e-3;
    double weight_decay = 1e-4;
};

// SGD over (latent, uniform t, noise) triples; returns the per-step loss
// curve. Deterministic given (corpus, hyper, seed).
std::vector<double> train_denoiser(const std::vector<Tensor>& latent_corpus,
                                   DenoiserModel& model, const NoiseSchedule& schedule,
                                   const DiffusionHyper& hyper, uint64_t seed);

void save_denoiser(const std::string& path, const DenoiserModel& model,
                   const NoiseSchedule& schedule, const std::string& config_hash,
                   int label);
DenoiserModel load_denoiser(const std::string& path, NoiseSchedule* schedule = nullptr,
                            std::string* config_hash = nullptr, int* label = nullptr);

}  // namespace mvit
