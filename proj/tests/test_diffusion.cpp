#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "fd_check.hpp"
#include "mvit/diffusion.hpp"
#include "mvit/rng.hpp"

using namespace mvit;

namespace {

DenoiserDescriptor tiny_desc() {
    DenoiserDescriptor d;
    d.latent_shape = {2, 2, 3, 2};
    d.hidden = 4;
    d.time_embed_dim = 8;
    return d;
}

Tensor random_latent(const std::vector<int64_t>& shape, uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    Tensor t(shape);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, scale);
    return t;
}

void zero_output_layer(DenoiserModel& model) {
    model.params.get("conv_out.w")->value.fill_(0.0);
    model.params.get("conv_out.b")->value.fill_(0.0);
}

}  // namespace

TEST_CASE("make_schedule basics and hand-derived alpha bars") {
    auto s1 = make_schedule(ScheduleKind::Linear, 0.05, 0.2, 1);
    CHECK(s1.betas == std::vector<double>{0.05});

    auto s3 = make_schedule(ScheduleKind::Linear, 0.1, 0.1, 3);
    CHECK(s3.alpha_bars[0] == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(s3.alpha_bars[1] == doctest::Approx(0.81).epsilon(1e-12));
    CHECK(s3.alpha_bars[2] == doctest::Approx(0.729).epsilon(1e-12));

    auto lin = make_schedule(ScheduleKind::Linear, 0.01, 0.3, 5);
    CHECK(lin.betas.front() == doctest::Approx(0.01));
    CHECK(lin.betas.back() == doctest::Approx(0.3));

    CHECK_THROWS_AS(make_schedule(ScheduleKind::Linear, 0.0, 0.1, 3), ConfigError);
    CHECK_THROWS_AS(make_schedule(ScheduleKind::Linear, 0.2, 0.1, 3), ConfigError);
    CHECK_THROWS_AS(make_schedule(ScheduleKind::Linear, 0.1, 1.0, 3), ConfigError);
    CHECK_THROWS_AS(make_schedule(ScheduleKind::Linear, 0.1, 0.2, 0), ConfigError);
}

TEST_CASE("alpha_bars strictly decrease for any legal schedule") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        double bs = rng.uniform(1e-5, 0.4);
        double be = rng.uniform(bs, 0.9);
        int t_steps = static_cast<int>(rng.uniform_int(1, 40));
        auto s = make_schedule(ScheduleKind::Linear, bs, be, t_steps);
        for (size_t i = 1; i < s.alpha_bars.size(); ++i)
            CHECK(s.alpha_bars[i] < s.alpha_bars[i - 1]);
        CHECK(s.alpha_bars.back() <= s.alpha_bars.front());
    }
}

TEST_CASE("default schedule preserves the 1000-step noise budget") {
    auto s = default_schedule(50);
    CHECK(s.T == 50);
    CHECK(s.betas.front() == doctest::Approx(1e-4 * 20.0));
    CHECK(s.betas.back() == doctest::Approx(0.02 * 20.0));
}

TEST_CASE("forward_step closed forms") {
    Tensor z = Tensor::full({1, 1, 1, 1}, 2.0);
    Tensor n = Tensor::full({1, 1, 1, 1}, 1.0);
    CHECK(forward_step(z, 0.0, n)[0] == doctest::Approx(2.0));  // beta -> 0 limit
    CHECK(forward_step(z, 1.0, n)[0] == doctest::Approx(1.0));  // pure noise
    CHECK(forward_step(z, 0.75, n)[0] ==
          doctest::Approx(0.5 * 2.0 + std::sqrt(0.75)).epsilon(1e-12));
    Tensor bad({2, 1, 1, 1});
    CHECK_THROWS_AS(forward_step(z, 0.5, bad), ShapeError);
}

TEST_CASE("forward_marginal closed forms") {
    auto s = make_schedule(ScheduleKind::Linear, 0.1, 0.1, 3);
    Tensor z0 = Tensor::full({1}, 1.0);
    Tensor zero = Tensor::zeros({1});
    CHECK(forward_marginal(z0, 2, s, zero)[0] == doctest::Approx(0.9).epsilon(1e-12));
    CHECK_THROWS_AS(forward_marginal(z0, 0, s, zero), ConfigError);
    CHECK_THROWS_AS(forward_marginal(z0, 4, s, zero), ConfigError);

    // hypothetical beta = 0 prefix: alpha_bar = 1 keeps z0 unchanged
    NoiseSchedule degenerate;
    degenerate.T = 1;
    degenerate.betas = {0.0};
    degenerate.alphas = {1.0};
    degenerate.alpha_bars = {1.0};
    CHECK(forward_marginal(z0, 1, degenerate, zero)[0] == doctest::Approx(1.0));
}

TEST_CASE("iterated forward_step matches forward_marginal in distribution") {
    // Monte-Carlo oracle: mean and std agreement within 3 standard errors
    const int64_t n_chains = 10000;
    Rng meta(123);
    for (int probe = 0; probe < 3; ++probe) {
        double bs = meta.uniform(0.005, 0.02);
        double be = meta.uniform(0.05, 0.3);
        int t_max = static_cast<int>(meta.uniform_int(3, 12));
        auto sched = make_schedule(ScheduleKind::Linear, bs, be, t_max);
        int t = static_cast<int>(meta.uniform_int(2, t_max));
        std::vector<int64_t> shape{2, 1, 2, 1};
        Tensor z0 = random_latent(shape, 1000 + static_cast<uint64_t>(probe));

        // iterate the single-step kernel across chains
        std::vector<double> sums(4, 0.0), sqs(4, 0.0);
        Rng rng(derive_seed(55, static_cast<uint64_t>(probe)));
        Tensor noise(shape);
        for (int64_t chain = 0; chain < n_chains; ++chain) {
            Tensor z = z0;
            for (int step = 1; step <= t; ++step) {
                for (int64_t i = 0; i < noise.numel(); ++i) noise[i] = rng.normal();
                z = forward_step(z, sched.beta(step), noise);
            }
            for (int64_t i = 0; i < 4; ++i) {
                sums[static_cast<size_t>(i)] += z[i];
                sqs[static_cast<size_t>(i)] += z[i] * z[i];
            }
        }
        double ab = sched.alpha_bar(t);
        double expect_std = std::sqrt(1.0 - ab);
        for (int64_t i = 0; i < 4; ++i) {
            double mean = sums[static_cast<size_t>(i)] / n_chains;
            double var = sqs[static_cast<size_t>(i)] / n_chains - mean * mean;
            double sd = std::sqrt(var);
            double expect_mean = std::sqrt(ab) * z0[i];
            double se_mean = expect_std / std::sqrt(static_cast<double>(n_chains));
            double se_std = expect_std / std::sqrt(2.0 * static_cast<double>(n_chains));
            CHECK(std::fabs(mean - expect_mean) < 3.0 * se_mean);
            CHECK(std::fabs(sd - expect_std) < 3.0 * se_std);
        }
    }
}

TEST_CASE("variance preservation bound: |E z_t| <= sqrt(alpha_bar)*B") {
    auto sched = default_schedule(20);
    Rng rng(9);
    Tensor z0({2, 2, 2, 2});
    double bound = 1.5;
    for (int64_t i = 0; i < z0.numel(); ++i) z0[i] = rng.uniform(-bound, bound);
    Tensor zero = Tensor::zeros(z0.shape());
    for (int t = 1; t <= 20; ++t) {
        Tensor mean = forward_marginal(z0, t, sched, zero);
        for (int64_t i = 0; i < mean.numel(); ++i)
            CHECK(std::fabs(mean[i]) <= std::sqrt(sched.alpha_bar(t)) * bound + 1e-12);
    }
}

TEST_CASE("predict_noise: shape, determinism, timestep sensitivity") {
    auto model = make_denoiser(tiny_desc(), 31);
    Tensor z = random_latent(model.desc.latent_shape, 4);
    Tensor a = predict_noise(z, 1, model);
    CHECK(a.shape() == model.desc.latent_shape);
    Tensor b = predict_noise(z, 1, model);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
    Tensor c = predict_noise(z, 7, model);
    double diff = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) diff += std::fabs(a[i] - c[i]);
    CHECK(diff > 1e-8);  // the embedding is live
}

TEST_CASE("denoise_step: mu formula and t=1 determinism") {
    auto model = make_denoiser(tiny_desc(), 8);
    zero_output_layer(model);  // eps_hat == 0
    auto sched = make_schedule(ScheduleKind::Linear, 0.04, 0.3, 6);
    Tensor z = random_latent(model.desc.latent_shape, 5);
    Tensor zero = Tensor::zeros(z.shape());

    // eps = 0, noise = 0 -> z / sqrt(alpha_t)
    Tensor out = denoise_step(z, 3, model, sched, zero);
    for (int64_t i = 0; i < z.numel(); ++i)
        CHECK(out[i] == doctest::Approx(z[i] / std::sqrt(sched.alpha(3))).epsilon(1e-12));

    // at t = 1 injected noise is ignored entirely
    Tensor big_noise = Tensor::full(z.shape(), 100.0);
    Tensor a = denoise_step(z, 1, model, sched, big_noise);
    Tensor b = denoise_step(z, 1, model, sched, zero);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);

    CHECK(out.shape() == z.shape());
    CHECK_THROWS_AS(denoise_step(z, 0, model, sched, zero), ConfigError);
    CHECK_THROWS_AS(denoise_step(z, 7, model, sched, zero), ConfigError);
}

TEST_CASE("ancestral sampler: determinism, T=1 closed form, shape") {
    auto model = make_denoiser(tiny_desc(), 12);
    auto sched = default_schedule(8);
    Tensor s1 = sample(model, sched, 99);
    Tensor s2 = sample(model, sched, 99);
    CHECK(s1.shape() == model.desc.latent_shape);
    for (int64_t i = 0; i < s1.numel(); ++i) CHECK(s1[i] == s2[i]);
    Tensor s3 = sample(model, sched, 100);
    double diff = 0.0;
    for (int64_t i = 0; i < s1.numel(); ++i) diff += std::fabs(s1[i] - s3[i]);
    CHECK(diff > 1e-8);

    // T=1 with eps == 0: sample = z_T / sqrt(alpha_1), z_T the seeded draw
    zero_output_layer(model);
    auto sched1 = make_schedule(ScheduleKind::Linear, 0.19, 0.19, 1);
    Tensor out = sample(model, sched1, 7);
    Rng replay(derive_seed(7, "ldm-sample"));
    for (int64_t i = 0; i < out.numel(); ++i) {
        double z_t = replay.normal();
        CHECK(out[i] == doctest::Approx(z_t / std::sqrt(1.0 - 0.19)).epsilon(1e-12));
    }
}

TEST_CASE("diffusion_train_loss identity cases") {
    auto model = make_denoiser(tiny_desc(), 3);
    auto sched = default_schedule(5);
    Tensor z0 = random_latent(model.desc.latent_shape, 21);

    // constant predictor that exactly matches a constant noise field
    zero_output_layer(model);
    model.params.get("conv_out.b")->value.fill_(0.37);
    Tensor noise = Tensor::full(model.desc.latent_shape, 0.37);
    CHECK(diffusion_train_loss(model, sched, z0, 2, noise) ==
          doctest::Approx(0.0).epsilon(1e-15));

    // eps == 0 vs all-ones noise -> mean squared error 1
    model.params.get("conv_out.b")->value.fill_(0.0);
    Tensor ones = Tensor::full(model.desc.latent_shape, 1.0);
    CHECK(diffusion_train_loss(model, sched, z0, 2, ones) ==
          doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("gradient exactness of the diffusion training loss") {
    auto model = make_denoiser(tiny_desc(), 17);
    auto sched = default_schedule(6);
    Tensor z0 = random_latent(model.desc.latent_shape, 31);
    Rng nrng(32);
    Tensor noise(model.desc.latent_shape);
    for (int64_t i = 0; i < noise.numel(); ++i) noise[i] = nrng.normal();
    auto loss_fn = [&]() { return diffusion_train_loss_var(model, sched, z0, 4, noise); };
    auto res = fdcheck::check_param_grads(model.params, loss_fn, 1e-5, 16);
    INFO("worst: ", res.worst);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("train_denoiser: zero steps no-op, learning, determinism") {
    auto desc = tiny_desc();
    std::vector<Tensor> corpus;
    // blob latents: smooth structured targets
    for (int i = 0; i < 50; ++i) corpus.push_back(random_latent(desc.latent_shape,
                                                                static_cast<uint64_t>(i), 0.5));
    auto sched = default_schedule(50);

    auto model = make_denoiser(desc, 41);
    auto before = model.params.flatten();
    DiffusionHyper h0;
    h0.steps = 0;
    CHECK(train_denoiser(corpus, model, sched, h0, 5).empty());
    CHECK(model.params.flatten() == before);

    DiffusionHyper h;
    h.steps = 200;
    h.batch_size = 8;
    h.lr = 2e-3;
    auto curve = train_denoiser(corpus, model, sched, h, 5);
    CHECK(curve.size() == 200);
    auto smooth = [&](size_t from, size_t to) {
        double s = 0.0;
        for (size_t i = from; i < to; ++i) s += curve[i];
        return s / static_cast<double>(to - from);
    };
    CHECK(smooth(180, 200) < smooth(0, 20));

    auto model2 = make_denoiser(desc, 41);
    auto curve2 = train_denoiser(corpus, model2, sched, h, 5);
    CHECK(curve == curve2);
}

TEST_CASE("denoiser checkpoint round trip with schedule") {
    namespace fs = std::filesystem;
    auto model = make_denoiser(tiny_desc(), 61);
    auto sched = default_schedule(12);
    fs::path dir = fs::temp_directory_path() / "mvit_ldm_ckpt";
    fs::create_directories(dir);
    std::string path = (dir / "ldm.ckpt").string();
    save_denoiser(path, model, sched, "beef5678", 1);
    NoiseSchedule back_sched;
    std::string hash;
    int label = -1;
    auto back = load_denoiser(path, &back_sched, &hash, &label);
    CHECK(hash == "beef5678");
    CHECK(label == 1);
    CHECK(back_sched.T == 12);
    CHECK(back_sched.betas == sched.betas);
    CHECK(back_sched.alpha_bars == sched.alpha_bars);
    CHECK(back.params.flatten_f32() == model.params.flatten_f32());
}
