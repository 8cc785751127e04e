#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fd_check.hpp"
#include "mvit/autoencoder.hpp"
#include "mvit/data.hpp"
#include "mvit/io.hpp"
#include "mvit/rng.hpp"

#include <filesystem>

using namespace mvit;

namespace {

AeDescriptor tiny_desc() {
    AeDescriptor d;
    d.in_dims = {8, 8, 8};
    d.channels = {2, 3};
    d.latent_channels = 2;
    return d;
}

Tensor random_input(const AeDescriptor& d, uint64_t seed) {
    Rng rng(seed);
    Tensor x({1, d.in_dims[0], d.in_dims[1], d.in_dims[2]});
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform01();
    return x;
}

}  // namespace

TEST_CASE("descriptor shape chain and compression") {
    AeDescriptor d;
    d.in_dims = {24, 28, 24};
    d.channels = {16, 32};
    d.latent_channels = 4;
    auto chain = d.shape_chain();
    CHECK(chain.size() == 4);
    CHECK(chain[1] == std::array<int64_t, 3>{12, 14, 12});
    CHECK(chain[2] == std::array<int64_t, 3>{6, 7, 6});
    CHECK(chain[3] == std::array<int64_t, 3>{3, 4, 3});
    CHECK(d.latent_shape() == std::vector<int64_t>{4, 3, 4, 3});
    CHECK(d.latent_numel() < d.ambient_numel());  // strict compression
}

TEST_CASE("encode produces latent-shaped posterior, deterministic") {
    auto d = tiny_desc();
    auto model = make_autoencoder(d, 42);
    Tensor x = random_input(d, 1);
    auto p = encode(x, model);
    CHECK(p.mu.shape() == d.latent_shape());
    CHECK(p.log_var.shape() == d.latent_shape());
    auto p2 = encode(x, model);
    for (int64_t i = 0; i < p.mu.numel(); ++i) {
        CHECK(p.mu[i] == p2.mu[i]);
        CHECK(p.log_var[i] == p2.log_var[i]);
    }
    Tensor wrong({1, 7, 8, 8});
    CHECK_THROWS_AS(encode(wrong, model), ShapeError);
}

TEST_CASE("encode distinguishes a spatially translated copy") {
    auto d = tiny_desc();
    auto model = make_autoencoder(d, 42);
    Tensor x = random_input(d, 2);
    Tensor shifted({1, 8, 8, 8});
    for (int64_t z = 0; z < 8; ++z)
        for (int64_t y = 0; y < 8; ++y)
            for (int64_t xx = 0; xx < 8; ++xx)
                shifted[((0 * 8 + z) * 8 + y) * 8 + xx] =
                    x[((0 * 8 + (z + 2) % 8) * 8 + y) * 8 + xx];
    auto pa = encode(x, model);
    auto pb = encode(shifted, model);
    double diff = 0.0;
    for (int64_t i = 0; i < pa.mu.numel(); ++i) diff += std::fabs(pa.mu[i] - pb.mu[i]);
    CHECK(diff > 1e-6);
}

TEST_CASE("sample_latent closed form") {
    GaussianPosterior p;
    p.mu = Tensor::full({1, 1, 1, 1}, 1.0);
    p.log_var = Tensor::full({1, 1, 1, 1}, std::log(4.0));
    Tensor noise = Tensor::full({1, 1, 1, 1}, 0.5);
    // z = 1 + 2 * 0.5 = 2
    CHECK(sample_latent(p, noise)[0] == doctest::Approx(2.0).epsilon(1e-12));

    Tensor zero = Tensor::zeros({1, 1, 1, 1});
    CHECK(sample_latent(p, zero)[0] == doctest::Approx(1.0));

    p.log_var.fill_(0.0);
    Tensor n2 = Tensor::full({1, 1, 1, 1}, 0.7);
    CHECK(sample_latent(p, n2)[0] == doctest::Approx(1.7));

    Tensor bad({2, 1, 1, 1});
    CHECK_THROWS_AS(sample_latent(p, bad), ShapeError);
}

TEST_CASE("decode maps latent to bounded ambient volume") {
    auto d = tiny_desc();
    auto model = make_autoencoder(d, 9);
    Rng rng(3);
    Tensor z(d.latent_shape());
    for (int64_t i = 0; i < z.numel(); ++i) z[i] = rng.normal(0.0, 2.0);
    Tensor out = decode_latent(z, model);
    CHECK(out.shape() == std::vector<int64_t>{1, 8, 8, 8});
    for (int64_t i = 0; i < out.numel(); ++i) {
        CHECK(out[i] >= 0.0);
        CHECK(out[i] <= 1.0);
    }
    Tensor bad({1, 1, 1, 1});
    CHECK_THROWS_AS(decode_latent(bad, model), ShapeError);
}

TEST_CASE("recon_loss closed forms") {
    Tensor x = Tensor::zeros({2, 2});
    Tensor y = Tensor::full({2, 2}, 1.0);
    CHECK(recon_loss(x, x) == 0.0);
    CHECK(recon_loss(x, y) == doctest::Approx(1.0).epsilon(1e-12));
    Tensor a = Tensor::from({2}, {0.0, 1.0});
    Tensor b = Tensor::from({2}, {0.5, 0.5});
    CHECK(recon_loss(a, b) == doctest::Approx(0.25).epsilon(1e-12));
    Tensor c({3});
    CHECK_THROWS_AS(recon_loss(a, c), ShapeError);
}

TEST_CASE("kl_loss closed forms") {
    GaussianPosterior p;
    p.mu = Tensor::zeros({2, 1, 1, 1});
    p.log_var = Tensor::zeros({2, 1, 1, 1});
    CHECK(kl_loss(p) == 0.0);  // prior match

    GaussianPosterior q;
    q.mu = Tensor::full({1}, 1.0);
    q.log_var = Tensor::zeros({1});
    CHECK(kl_loss(q) == doctest::Approx(0.5).epsilon(1e-12));

    GaussianPosterior r;
    r.mu = Tensor::zeros({1});
    r.log_var = Tensor::full({1}, 1.0);  // sigma^2 = e
    CHECK(kl_loss(r) == doctest::Approx((std::exp(1.0) - 2.0) / 2.0).epsilon(1e-12));
}

TEST_CASE("kl_loss is nonnegative on 1000 random posteriors") {
    Rng rng(77);
    for (int trial = 0; trial < 1000; ++trial) {
        GaussianPosterior p;
        p.mu = Tensor({4});
        p.log_var = Tensor({4});
        for (int64_t i = 0; i < 4; ++i) {
            p.mu[i] = rng.normal(0.0, 3.0);
            p.log_var[i] = rng.normal(0.0, 2.0);
        }
        CHECK(kl_loss(p) >= 0.0);
    }
}

TEST_CASE("total_loss combination and weight validation") {
    CHECK(total_loss(0.7, 123.0, 1.0, 0.0) == doctest::Approx(0.7));
    CHECK(total_loss(0.7, 123.0, 0.0, 0.0) == 0.0);
    CHECK(total_loss(0.25, 0.5, 1.0, 1e-2) == doctest::Approx(0.255).epsilon(1e-12));
    CHECK_THROWS_AS(total_loss(1.0, 1.0, -1.0, 0.0), ConfigError);
}

TEST_CASE("gradient exactness through encoder and decoder") {
    auto d = tiny_desc();
    auto model = make_autoencoder(d, 5);
    Tensor x = random_input(d, 7);
    Rng nrng(8);
    Tensor noise(d.latent_shape());
    for (int64_t i = 0; i < noise.numel(); ++i) noise[i] = nrng.normal();

    auto loss_fn = [&]() {
        Var xv = constant(x);
        auto [mu, log_var] = encode_vars(xv, model);
        Var z = sample_latent_var(mu, log_var, constant(noise));
        Var xhat = decode_var(z, model);
        Var recon = ops::mse(xv, xhat);
        Var kl_term = ops::mul_scalar(
            ops::sum_all(ops::add_scalar(
                ops::sub(ops::add(ops::mul(mu, mu), ops::exp(log_var)), log_var), -1.0)),
            0.5);
        return ops::add(recon, ops::mul_scalar(kl_term, 1e-2));
    };
    auto res = fdcheck::check_param_grads(model.params, loss_fn, 1e-5, 12);
    INFO("worst: ", res.worst);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("train_autoencoder: zero epochs leaves parameters untouched") {
    auto d = tiny_desc();
    auto model = make_autoencoder(d, 1);
    auto before = model.params.flatten();
    auto manifest = synthesize_dataset(10, GenMode::Additive, {8, 8, 8}, 8, 2);
    AeHyper hyper;
    hyper.epochs = 0;
    auto curve = train_autoencoder(manifest, model, hyper, 3);
    CHECK(curve.empty());
    CHECK(model.params.flatten() == before);
}

TEST_CASE("train_autoencoder learns and is deterministic") {
    AeDescriptor d;
    d.in_dims = {12, 12, 12};
    d.channels = {4, 8};
    d.latent_channels = 2;
    auto manifest = synthesize_dataset(20, GenMode::Additive, {12, 12, 12}, 8, 4);

    AeHyper hyper;
    hyper.epochs = 50;
    hyper.batch_size = 8;
    hyper.lr = 2e-3;

    auto model = make_autoencoder(d, 10);
    // untrained reconstruction error baseline (posterior mean path)
    double untrained_mse = 0.0;
    for (int i = 0; i < 5; ++i) {
        Tensor x = manifest.subjects[static_cast<size_t>(i)].volume->as_tensor();
        Tensor xhat = decode_latent(encode(x, model).mu, model);
        untrained_mse += recon_loss(x, xhat);
    }

    auto curve = train_autoencoder(manifest, model, hyper, 11);
    CHECK(curve.size() == 50);
    CHECK(curve.back() <= 0.5 * curve.front());

    double trained_mse = 0.0;
    for (int i = 0; i < 5; ++i) {
        Tensor x = manifest.subjects[static_cast<size_t>(i)].volume->as_tensor();
        Tensor xhat = decode_latent(encode(x, model).mu, model);
        trained_mse += recon_loss(x, xhat);
    }
    CHECK(trained_mse < untrained_mse);

    // identical seeds give identical loss curves
    auto model2 = make_autoencoder(d, 10);
    auto curve2 = train_autoencoder(manifest, model2, hyper, 11);
    CHECK(curve == curve2);
    CHECK(model.params.flatten() == model2.params.flatten());
}

TEST_CASE("autoencoder checkpoint round trip") {
    namespace fs = std::filesystem;
    auto d = tiny_desc();
    auto model = make_autoencoder(d, 21);
    fs::path dir = fs::temp_directory_path() / "mvit_ae_ckpt";
    fs::create_directories(dir);
    std::string path = (dir / "ae.ckpt").string();
    save_autoencoder(path, model, "cafe1234");
    std::string hash;
    auto back = load_autoencoder(path, &hash);
    CHECK(hash == "cafe1234");
    CHECK(back.desc.in_dims == d.in_dims);
    CHECK(back.params.flatten_f32() == model.params.flatten_f32());
    // float32 payload round trip keeps forward outputs identical
    Tensor x = random_input(d, 30);
    auto pa = encode(x, back);
    model.params.load_flat_f32(model.params.flatten_f32());
    auto pb = encode(x, model);
    for (int64_t i = 0; i < pa.mu.numel(); ++i) CHECK(pa.mu[i] == pb.mu[i]);
}
