#include "mvit/autoencoder.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>

#include "mvit/io.hpp"
#include "mvit/optim.hpp"
#include "mvit/rng.hpp"

namespace mvit {

std::vector<std::array<int64_t, 3>> AeDescriptor::shape_chain() const {
    std::vector<std::array<int64_t, 3>> chain;
    chain.push_back(in_dims);
    for (int l = 0; l < levels(); ++l) {
        auto prev = chain.back();
        // conv k=3, pad=1, stride=2 -> ceil(n/2)
        chain.push_back({(prev[0] + 1) / 2, (prev[1] + 1) / 2, (prev[2] + 1) / 2});
    }
    return chain;
}

std::vector<int64_t> AeDescriptor::latent_shape() const {
    auto sp = latent_spatial();
    return {latent_channels, sp[0], sp[1], sp[2]};
}

int64_t AeDescriptor::latent_numel() const {
    auto sp = latent_spatial();
    return latent_channels * sp[0] * sp[1] * sp[2];
}

namespace {

Tensor conv_init(int64_t cout, int64_t cin, Rng& rng) {
    int64_t fan_in = cin * 27, fan_out = cout * 27;
    return glorot_uniform({cout, cin, 3, 9}, fan_in, fan_out, rng);
}

void check_finite(const Var& v, const std::string& stage, int layer) {
    if (!v->value.all_finite())
        throw NumericError(stage + ": non-finite activation at layer " +
                           std::to_string(layer));
}

}  // namespace

AutoencoderModel make_autoencoder(const AeDescriptor& desc, uint64_t seed) {
    if (desc.channels.empty()) throw ConfigError("autoencoder needs at least one hidden level");
    if (desc.latent_numel() >= desc.ambient_numel())
        throw ConfigError("autoencoder latent must be strictly smaller than the input");
    for (auto d : desc.in_dims)
        if (d < 8) throw ConfigError("autoencoder input dims too small for 3 downsamplings");

    AutoencoderModel model;
    model.desc = desc;
    Rng rng(derive_seed(seed, "autoencoder-init"));
    auto& p = model.params;
    const auto& ch = desc.channels;

    int64_t prev = 1;
    for (size_t i = 0; i < ch.size(); ++i) {
        p.add("enc.conv" + std::to_string(i) + ".w", conv_init(ch[i], prev, rng));
        p.add("enc.conv" + std::to_string(i) + ".b", Tensor::zeros({ch[i]}));
        prev = ch[i];
    }
    p.add("enc.conv" + std::to_string(ch.size()) + ".w",
          conv_init(2 * desc.latent_channels, prev, rng));
    p.add("enc.conv" + std::to_string(ch.size()) + ".b",
          Tensor::zeros({2 * desc.latent_channels}));

    // decoder mirrors the encoder widths
    std::vector<int64_t> dch;
    dch.push_back(desc.latent_channels);
    for (auto it = ch.rbegin(); it != ch.rend(); ++it) dch.push_back(*it);
    dch.push_back(dch.back());  // one conv per upsampling level
    for (size_t i = 0; i + 1 < dch.size(); ++i) {
        p.add("dec.conv" + std::to_string(i) + ".w", conv_init(dch[i + 1], dch[i], rng));
        p.add("dec.conv" + std::to_string(i) + ".b", Tensor::zeros({dch[i + 1]}));
    }
    p.add("dec.out.w", conv_init(1, dch.back(), rng));
    p.add("dec.out.b", Tensor::zeros({1}));
    return model;
}

std::pair<Var, Var> encode_vars(const Var& x, const AutoencoderModel& model) {
    const auto& desc = model.desc;
    const auto& s = x->value.shape();
    if (s.size() != 4 || s[0] != 1 || s[1] != desc.in_dims[0] || s[2] != desc.in_dims[1] ||
        s[3] != desc.in_dims[2])
        throw ShapeError("encode: input dims " + x->value.shape_str() +
                         " do not match descriptor");
    Var h = x;
    int n_conv = desc.levels();
    for (int i = 0; i < n_conv; ++i) {
        const auto& w = model.params.get("enc.conv" + std::to_string(i) + ".w");
        const auto& b = model.params.get("enc.conv" + std::to_string(i) + ".b");
        h = ops::conv3d(h, w, b, /*stride=*/2, /*pad=*/1);
        check_finite(h, "encoder", i);
        if (i + 1 < n_conv) h = ops::gelu(h);
    }
    Var mu = ops::slice_channels(h, 0, desc.latent_channels);
    Var log_var = ops::slice_channels(h, desc.latent_channels, desc.latent_channels);
    return {mu, log_var};
}

Var sample_latent_var(const Var& mu, const Var& log_var, const Var& noise) {
    if (!mu->value.same_shape(log_var->value) || !mu->value.same_shape(noise->value))
        throw ShapeError("sample_latent: shape mismatch");
    Var std_dev = ops::exp(ops::mul_scalar(log_var, 0.5));
    return ops::add(mu, ops::mul(std_dev, noise));
}

Var decode_var(const Var& z, const AutoencoderModel& model) {
    const auto& desc = model.desc;
    auto latent = desc.latent_shape();
    if (z->value.shape() != latent)
        throw ShapeError("decode: latent shape " + z->value.shape_str() +
                         " does not match descriptor");
    auto chain = desc.shape_chain();
    Var h = z;
    int n_levels = desc.levels();
    for (int i = 0; i < n_levels; ++i) {
        const auto& w = model.params.get("dec.conv" + std::to_string(i) + ".w");
        const auto& b = model.params.get("dec.conv" + std::to_string(i) + ".b");
        h = ops::gelu(ops::conv3d(h, w, b, 1, 1));
        check_finite(h, "decoder", i);
        h = ops::upsample_nearest2(h);
        const auto& target = chain[static_cast<size_t>(n_levels - 1 - i)];
        h = ops::crop3d(h, target[0], target[1], target[2]);
    }
    h = ops::conv3d(h, model.params.get("dec.out.w"), model.params.get("dec.out.b"), 1, 1);
    check_finite(h, "decoder", n_levels);
    return ops::sigmoid(h);
}

GaussianPosterior encode(const Tensor& x, const AutoencoderModel& model) {
    auto [mu, log_var] = encode_vars(constant(x), model);
    return {mu->value, log_var->value};
}

GaussianPosterior encode(const StructuralVolume& x, const AutoencoderModel& model) {
    return encode(x.as_tensor(), model);
}

Tensor sample_latent(const GaussianPosterior& p, const Tensor& noise) {
    if (!p.mu.same_shape(p.log_var) || !p.mu.same_shape(noise))
        throw ShapeError("sample_latent: shape mismatch");
    Tensor z = p.mu;
    for (int64_t i = 0; i < z.numel(); ++i)
        z[i] += std::exp(0.5 * p.log_var[i]) * noise[i];
    return z;
}

Tensor decode_latent(const Tensor& z, const AutoencoderModel& model) {
    return decode_var(constant(z), model)->value;
}

StructuralVolume decode(const Tensor& z, const AutoencoderModel& model) {
    Tensor out = decode_latent(z, model);
    StructuralVolume v;
    v.dims = model.desc.in_dims;
    v.spacing = {1.5, 1.5, 1.5};
    v.voxels.resize(static_cast<size_t>(v.numel()));
    for (int64_t i = 0; i < out.numel(); ++i)
        v.voxels[static_cast<size_t>(i)] =
            std::clamp(static_cast<float>(out[i]), 0.0f, 1.0f);
    return v;
}

double recon_loss(const Tensor& x, const Tensor& x_hat) {
    if (!x.same_shape(x_hat)) throw ShapeError("recon_loss: shape mismatch");
    double acc = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        double d = x[i] - x_hat[i];
        acc += d * d;
    }
    return acc / static_cast<double>(x.numel());
}

double recon_loss(const StructuralVolume& x, const StructuralVolume& x_hat) {
    if (x.dims != x_hat.dims) throw ShapeError("recon_loss: volume dims mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < x.voxels.size(); ++i) {
        double d = static_cast<double>(x.voxels[i]) - static_cast<double>(x_hat.voxels[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(x.voxels.size());
}

double kl_loss(const GaussianPosterior& p) {
    if (!p.mu.same_shape(p.log_var)) throw ShapeError("kl_loss: shape mismatch");
    if (!p.mu.all_finite() || !p.log_var.all_finite())
        throw NumericError("kl_loss: non-finite posterior");
    double acc = 0.0;
    for (int64_t i = 0; i < p.mu.numel(); ++i) {
        double mu = p.mu[i];
        double lv = p.log_var[i];
        acc += mu * mu + std::exp(lv) - lv - 1.0;
    }
    return 0.5 * acc;
}

double total_loss(double l_recon, double l_kl, double lambda_recon, double lambda_kl) {
    if (lambda_recon < 0.0 || lambda_kl < 0.0)
        throw ConfigError("total_loss: loss weights must be nonnegative");
    return lambda_recon * l_recon + lambda_kl * l_kl;
}

namespace {

// graph version of the KL closed form: 1/2 sum(mu^2 + exp(lv) - lv - 1)
Var kl_loss_var(const Var& mu, const Var& log_var) {
    Var term = ops::add(ops::mul(mu, mu), ops::exp(log_var));
    term = ops::sub(term, log_var);
    term = ops::add_scalar(term, -1.0);
    return ops::mul_scalar(ops::sum_all(term), 0.5);
}

}  // namespace

std::vector<double> train_autoencoder(const DatasetManifest& manifest, AutoencoderModel& model,
                                      const AeHyper& hyper, uint64_t seed) {
    if (hyper.lambda_recon < 0.0 || hyper.lambda_kl < 0.0)
        throw ConfigError("train_autoencoder: loss weights must be nonnegative");
    std::vector<const SubjectRecord*> corpus;
    for (const auto& s : manifest.subjects)
        if (s.provenance != Provenance::LdmAugmented) corpus.push_back(&s);
    if (corpus.empty()) throw DataError("train_autoencoder: empty manifest");

    AdamWHyper ah;
    ah.lr = hyper.lr;
    ah.weight_decay = hyper.weight_decay;
    OptimizerState opt = make_optimizer(model.params, ah);

    std::vector<Tensor> inputs;
    inputs.reserve(corpus.size());
    for (const auto* s : corpus) inputs.push_back(s->volume->as_tensor());

    auto latent = model.desc.latent_shape();
    std::vector<double> curve;
    uint64_t noise_root = derive_seed(seed, "ae-noise");
    Rng order_rng(derive_seed(seed, "ae-order"));

    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        std::vector<size_t> order(inputs.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        order_rng.shuffle(order);

        double epoch_loss = 0.0;
        for (size_t start = 0; start < order.size();
             start += static_cast<size_t>(hyper.batch_size)) {
            size_t bsz = std::min(static_cast<size_t>(hyper.batch_size),
                                  order.size() - start);
            std::vector<std::vector<Tensor>> grads(bsz);
            std::vector<double> losses(bsz);
            parallel_for(static_cast<int64_t>(bsz), [&](int64_t bi) {
                size_t pos = start + static_cast<size_t>(bi);
                const Tensor& x = inputs[order[pos]];
                Rng nrng(derive_seed(noise_root,
                                     static_cast<uint64_t>(epoch) * 1000003ULL + pos));
                Tensor noise(latent);
                for (int64_t i = 0; i < noise.numel(); ++i) noise[i] = nrng.normal();

                Var xv = constant(x);
                auto [mu, log_var] = encode_vars(xv, model);
                Var z = sample_latent_var(mu, log_var, constant(noise));
                Var xhat = decode_var(z, model);
                Var loss = ops::add(ops::mul_scalar(ops::mse(xv, xhat), hyper.lambda_recon),
                                    ops::mul_scalar(kl_loss_var(mu, log_var), hyper.lambda_kl));
                losses[bi] = loss->value.value();
                GradMap gm;
                backward(loss, gm);
                grads[bi] = gather_grads(model.params, gm);
            });

            std::vector<Tensor> total = std::move(grads[0]);
            for (size_t bi = 1; bi < bsz; ++bi)
                for (size_t k = 0; k < total.size(); ++k) total[k].add_(grads[bi][k]);
            double inv = 1.0 / static_cast<double>(bsz);
            for (auto& g : total) g.scale_(inv);

            double batch_loss = 0.0;
            for (double l : losses) batch_loss += l;
            batch_loss *= inv;
            if (!std::isfinite(batch_loss))
                throw NumericError("train_autoencoder: loss diverged at epoch " +
                                   std::to_string(epoch));
            epoch_loss += batch_loss * static_cast<double>(bsz);

            opt.hyper.lr = hyper.lr;
            adamw_step(model.params, total, opt);
        }
        curve.push_back(epoch_loss / static_cast<double>(inputs.size()));
    }
    return curve;
}

void save_autoencoder(const std::string& path, const AutoencoderModel& model,
                      const std::string& config_hash) {
    Checkpoint ckpt;
    ckpt.header["kind"] = "autoencoder";
    ckpt.header["config_hash"] = config_hash;
    nlohmann::json d;
    d["in_dims"] = model.desc.in_dims;
    d["channels"] = model.desc.channels;
    d["latent_channels"] = model.desc.latent_channels;
    ckpt.header["descriptor"] = d;
    nlohmann::json params = nlohmann::json::array();
    for (const auto& p : model.params.all())
        params.push_back({{"name", p->name}, {"shape", p->value.shape()}});
    ckpt.header["params"] = params;
    ckpt.payload = model.params.flatten_f32();
    write_checkpoint(path, ckpt);
}

AutoencoderModel load_autoencoder(const std::string& path, std::string* config_hash) {
    Checkpoint ckpt = read_checkpoint(path);
    if (ckpt.header.value("kind", "") != "autoencoder")
        throw DataError("checkpoint is not an autoencoder: " + path);
    AeDescriptor desc;
    const auto& d = ckpt.header.at("descriptor");
    auto dims = d.at("in_dims").get<std::vector<int64_t>>();
    desc.in_dims = {dims[0], dims[1], dims[2]};
    desc.channels = d.at("channels").get<std::vector<int64_t>>();
    desc.latent_channels = d.at("latent_channels").get<int64_t>();
    AutoencoderModel model = make_autoencoder(desc, /*seed=*/0);
    model.params.load_flat_f32(ckpt.payload);
    if (config_hash) *config_hash = ckpt.header.value("config_hash", "");
    return model;
}

}  // namespace mvit
