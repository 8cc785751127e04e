#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mvit/autodiff.hpp"
#include "mvit/data.hpp"
#include "mvit/tensor.hpp"

namespace mvit {

// KL-regularized 3D convolutional autoencoder. Encoder downsamples by 2 at
// each level (kernel 3, pad 1), the last level emitting 2*latent_channels
// maps split into posterior mean and log-variance. The decoder mirrors the
// chain with nearest-neighbor upsampling, cropping back to the exact shape
// recorded on the way down, and squashes the output to [0,1].
struct AeDescriptor {
    std::array<int64_t, 3> in_dims{24, 28, 24};
    std::vector<int64_t> channels{16, 32};  // widths of the hidden levels
    int64_t latent_channels = 4;

    int levels() const { return static_cast<int>(channels.size()) + 1; }
    // shape_chain[0] = in_dims, shape_chain[levels()] = latent spatial dims
    std::vector<std::array<int64_t, 3>> shape_chain() const;
    std::array<int64_t, 3> latent_spatial() const { return shape_chain().back(); }
    std::vector<int64_t> latent_shape() const;  // {C_z, d_z, h_z, w_z}
    int64_t latent_numel() const;
    int64_t ambient_numel() const { return in_dims[0] * in_dims[1] * in_dims[2]; }
};

struct GaussianPosterior {
    Tensor mu;       // latent-shaped
    Tensor log_var;  // latent-shaped
};

struct AutoencoderModel {
    AeDescriptor desc;
    ParamStore params;
};

AutoencoderModel make_autoencoder(const AeDescriptor& desc, uint64_t seed);

// graph-building forward passes (for training and gradient checks)
std::pair<Var, Var> encode_vars(const Var& x, const AutoencoderModel& model);
Var sample_latent_var(const Var& mu, const Var& log_var, const Var& noise);
Var decode_var(const Var& z, const AutoencoderModel& model);

// plain forwards
GaussianPosterior encode(const StructuralVolume& x, const AutoencoderModel& model);
GaussianPosterior encode(const Tensor& x, const AutoencoderModel& model);
// z = mu + exp(log_var / 2) * noise
Tensor sample_latent(const GaussianPosterior& p, const Tensor& noise);
Tensor decode_latent(const Tensor& z, const AutoencoderModel& model);  // [1,D,H,W]
StructuralVolume decode(const Tensor& z, const AutoencoderModel& model);

// losses (double precision closed forms)
double recon_loss(const Tensor& x, const Tensor& x_hat);        // mean squared error
double recon_loss(const StructuralVolume& x, const StructuralVolume& x_hat);
double kl_loss(const GaussianPosterior& p);                     // 1/2 sum(mu^2+s^2-log s^2-1)
double total_loss(double l_recon, double l_kl, double lambda_recon, double lambda_kl);

struct AeHyper {
    double lambda_recon = 1.0;
    double lambda_kl = 1e-2;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    int epochs = 10;
    int batch_size = 8;
};

// Trains on every non-augmented subject in the manifest. Returns the
// per-epoch mean total loss. Deterministic given (manifest, hyper, seed);
// aborts with NumericError naming the epoch if the loss stops being finite.
std::vector<double> train_autoencoder(const DatasetManifest& manifest, AutoencoderModel& model,
                                      const AeHyper& hyper, uint64_t seed);

// checkpoint container bindings
void save_autoencoder(const std::string& path, const AutoencoderModel& model,
                      const std::string& config_hash);
AutoencoderModel load_autoencoder(const std::string& path, std::string* config_hash = nullptr);

}  // namespace mvit
