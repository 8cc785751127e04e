#include "mvit/lffm.hpp"

#include <cmath>

#include "mvit/rng.hpp"

namespace mvit {

Tensor extract_latent(const Tensor& v, const AutoencoderModel& ae) {
    return encode(v, ae).mu;
}

Tensor extract_latent(const StructuralVolume& v, const AutoencoderModel& ae) {
    return extract_latent(v.as_tensor(), ae);
}

namespace {

// Separable resampling weights for one axis. Upsampling (dst >= src) uses
// align-corners bilinear interpolation; downsampling uses the antialiased
// form (area-weighted box overlap), so every source cell contributes.
// Both branches are exactly the identity when dst == src and map constant
// inputs to the same constant.
std::vector<double> axis_weights(int64_t dst, int64_t src) {
    std::vector<double> w(static_cast<size_t>(dst * src), 0.0);
    if (dst >= src) {
        for (int64_t i = 0; i < dst; ++i) {
            double f = dst == 1 ? 0.0
                                : static_cast<double>(i) * static_cast<double>(src - 1) /
                                      static_cast<double>(dst - 1);
            int64_t lo = static_cast<int64_t>(f);
            int64_t hi = std::min(lo + 1, src - 1);
            double t = f - static_cast<double>(lo);
            w[static_cast<size_t>(i * src + lo)] += 1.0 - t;
            w[static_cast<size_t>(i * src + hi)] += t;
        }
    } else {
        double scale = static_cast<double>(src) / static_cast<double>(dst);
        for (int64_t i = 0; i < dst; ++i) {
            double a = static_cast<double>(i) * scale;
            double b = a + scale;
            for (int64_t s = static_cast<int64_t>(a); s < src && static_cast<double>(s) < b;
                 ++s) {
                double overlap = std::min(b, static_cast<double>(s + 1)) -
                                 std::max(a, static_cast<double>(s));
                if (overlap > 0.0)
                    w[static_cast<size_t>(i * src + s)] += overlap / scale;
            }
        }
    }
    return w;
}

}  // namespace

Tensor bilinear_resample(const Tensor& m, int64_t h, int64_t w) {
    if (m.rank() != 2) throw ShapeError("bilinear_resample: expected rank-2 input");
    if (h < 1 || w < 1) throw ShapeError("bilinear_resample: degenerate target dims");
    int64_t sh = m.dim(0), sw = m.dim(1);
    auto wy = axis_weights(h, sh);
    auto wx = axis_weights(w, sw);
    // rows first: [h, sw]
    Tensor rows({h, sw});
    for (int64_t i = 0; i < h; ++i)
        for (int64_t s = 0; s < sh; ++s) {
            double wv = wy[static_cast<size_t>(i * sh + s)];
            if (wv == 0.0) continue;
            for (int64_t j = 0; j < sw; ++j) rows.at(i, j) += wv * m.at(s, j);
        }
    Tensor out({h, w});
    for (int64_t j = 0; j < w; ++j)
        for (int64_t s = 0; s < sw; ++s) {
            double wv = wx[static_cast<size_t>(j * sw + s)];
            if (wv == 0.0) continue;
            for (int64_t i = 0; i < h; ++i) out.at(i, j) += wv * rows.at(i, s);
        }
    return out;
}

void add_lffm_params(ParamStore& store, int64_t latent_channels, uint64_t seed) {
    Rng rng(derive_seed(seed, "lffm-init"));
    store.add("lffm.lift.w", glorot_uniform({1, latent_channels}, 1, latent_channels, rng));
    store.add("lffm.lift.b", Tensor::zeros({latent_channels}));
    store.add("lffm.fuse.w",
              glorot_uniform({latent_channels, 2 * latent_channels, 3, 9},
                             2 * latent_channels * 27, latent_channels * 27, rng));
    store.add("lffm.fuse.b", Tensor::zeros({latent_channels}));
}

Var project_fnc_var(const Tensor& fnc, const std::array<int64_t, 3>& target,
                    const ParamStore& store) {
    if (fnc.rank() != 2 || fnc.dim(0) != fnc.dim(1))
        throw ShapeError("project_fnc: FNC matrix must be square");
    int64_t cz = target[0], h = target[1], w = target[2];
    if (cz < 1 || h < 1 || w < 1) throw ShapeError("project_fnc: degenerate target dims");
    Tensor resampled = bilinear_resample(fnc, h, w);
    // [h*w, 1] x [1, C_z] -> [h*w, C_z] -> [C_z, h*w] -> [C_z, h, w]
    Var flat = constant(Tensor::from({h * w, 1},
                                     std::vector<double>(resampled.data(),
                                                         resampled.data() + h * w)));
    Var lifted = ops::linear(flat, store.get("lffm.lift.w"), store.get("lffm.lift.b"));
    return ops::reshape(ops::transpose(lifted), {cz, h, w});
}

Var fuse_var(const Var& z, const Var& zp, const ParamStore& store) {
    const auto& zs = z->value.shape();
    const auto& ps = zp->value.shape();
    if (zs.size() != 4 || ps.size() != 3)
        throw ShapeError("fuse: expected Z rank 4 and Z' rank 3");
    if (ps[0] != zs[0] || ps[1] != zs[2] || ps[2] != zs[3])
        throw ShapeError("fuse: Z' dims " + zp->value.shape_str() +
                         " incompatible with Z " + z->value.shape_str());
    Var wide = ops::concat_channels(z, ops::broadcast_depth(zp, zs[1]));
    Var mixed = ops::conv3d(wide, store.get("lffm.fuse.w"), store.get("lffm.fuse.b"), 1, 1);
    return ops::add(z, mixed);
}

Tensor project_fnc(const FNCMatrix& f, const std::array<int64_t, 3>& target,
                   const ParamStore& store) {
    return project_fnc_var(f.as_tensor(), target, store)->value;
}

Tensor fuse(const Tensor& z, const Tensor& zp, const ParamStore& store) {
    return fuse_var(constant(z), constant(zp), store)->value;
}

}  // namespace mvit
