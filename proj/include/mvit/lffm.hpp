#pragma once

#include <array>
#include <cstdint>

#include "mvit/autodiff.hpp"
#include "mvit/autoencoder.hpp"
#include "mvit/data.hpp"

namespace mvit {

// Latent feature fusion: the structural latent comes from the frozen
// pretrained encoder (posterior mean); the FNC matrix is resampled onto the
// latent's trailing spatial grid, lifted to the latent channel count, and
// fused back onto the structural latent through a residual 3D convolution.

// Posterior mean of the pretrained encoder; deterministic, no gradients.
Tensor extract_latent(const StructuralVolume& v, const AutoencoderModel& ae);
Tensor extract_latent(const Tensor& v, const AutoencoderModel& ae);

// Bilinear resample (align-corners) of a 2D matrix onto (h, w). Constant
// inputs stay constant; equal sizes reproduce the input exactly.
Tensor bilinear_resample(const Tensor& m, int64_t h, int64_t w);

// Registers lffm.* parameters into `store` (lift 1->C_z, residual fusion
// conv 2*C_z -> C_z).
void add_lffm_params(ParamStore& store, int64_t latent_channels, uint64_t seed);

// FNC matrix -> [C_z, h_z, w_z] latent: bilinear resample then 1x1 lift.
Var project_fnc_var(const Tensor& fnc, const std::array<int64_t, 3>& target,
                    const ParamStore& store);

// Z + Conv([Z ; broadcast_depth(Zp)]): returns a tensor with Z's shape;
// zero fusion weights give back Z exactly.
Var fuse_var(const Var& z, const Var& zp, const ParamStore& store);

// convenience plain wrappers
Tensor project_fnc(const FNCMatrix& f, const std::array<int64_t, 3>& target,
                   const ParamStore& store);
Tensor fuse(const Tensor& z, const Tensor& zp, const ParamStore& store);

}  // namespace mvit
