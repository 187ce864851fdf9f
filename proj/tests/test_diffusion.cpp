#include "doctest.h"

#include "kstone/diffusion.hpp"
#include "kstone/error.hpp"
#include "test_util.hpp"

#include <cmath>

using namespace kstone;
using namespace kstone::diffusion;

TEST_CASE("pyramid level count follows the closed form") {
    // independent evaluation: floor(log_f(min(H,W)/min_size)) + 1
    const double f = 4.0 / 3.0;
    const int expected = static_cast<int>(std::floor(std::log(200.0 / 32.0) / std::log(f))) + 1;
    REQUIRE(expected == 7);
    const auto dims = pyramid_dims({200, 264}, f, 32);
    CHECK(dims.size() == 7);
    CHECK(dims.front() == Size{36, 47});
    CHECK(dims.back() == Size{200, 264});
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        CHECK(dims[i].width == std::lround(dims[i + 1].width / f));
        CHECK(dims[i].height == std::lround(dims[i + 1].height / f));
        CHECK(dims[i].width >= 32);
    }
}

TEST_CASE("pyramid enumerations") {
    const auto p = build_pyramid(testing::smooth_image(256, 256, 1), 2.0, 32);
    REQUIRE(p.levels.size() == 4);
    const int expect[] = {32, 64, 128, 256};
    for (int i = 0; i < 4; ++i) {
        CHECK(p.levels[i].width == expect[i]);
        CHECK(p.levels[i].height == expect[i]);
    }
    CHECK(build_pyramid(testing::smooth_image(32, 40, 2), 4.0 / 3.0, 32).levels.size() == 1);
    CHECK_THROWS_AS(build_pyramid(testing::smooth_image(31, 40, 2), 4.0 / 3.0, 32), DimensionError);
}

TEST_CASE("make_schedule") {
    const auto one = make_schedule(1, 0.01, 0.01);
    REQUIRE(one.alpha_bar.size() == 1);
    CHECK(one.alpha_bar[0] == doctest::Approx(0.99).epsilon(1e-15));

    const auto s = make_schedule(100, 1e-4, 0.02);
    // brute-force product oracle, recomputed from first principles
    double prod = 1.0;
    for (int t = 0; t < 100; ++t) prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * t / 99.0);
    CHECK(std::abs(s.alpha_bar[99] - prod) < 1e-12);
    CHECK(s.beta.front() == doctest::Approx(1e-4));
    CHECK(s.beta.back() == doctest::Approx(0.02));
    CHECK(s.alpha_bar[0] >= 0.99);
    for (int t = 0; t + 1 < 100; ++t) CHECK(s.alpha_bar[t + 1] < s.alpha_bar[t]);

    CHECK_THROWS_AS(make_schedule(10, 1e-4, 1.5), ParameterError);
    CHECK_THROWS_AS(make_schedule(0, 1e-4, 0.02), ParameterError);
    CHECK_THROWS_AS(make_schedule(10, 0.1, 0.01), ParameterError);
}

TEST_CASE("forward_diffuse") {
    const auto s = make_schedule(100, 1e-4, 0.02);
    SUBCASE("no-noise limit") {
        NoiseSchedule ident = s;
        ident.alpha_bar[0] = 1.0;
        Rng rng(1);
        const Tensor x0 = to_tensor(testing::random_image(8, 8, 2));
        CHECK(forward_diffuse(x0, 0, ident, rng).x_t == x0);
    }
    SUBCASE("Monte Carlo marginal") {
        const int t = 37;
        Rng rng(3);
        const Tensor zero({1, 3, 183, 183});
        REQUIRE(zero.numel() >= 100000);
        const auto d = forward_diffuse(zero, t, s, rng);
        double sum = 0, sq = 0;
        for (float v : d.x_t.data) {
            sum += v;
            sq += static_cast<double>(v) * v;
        }
        const double n = static_cast<double>(d.x_t.numel());
        const double mean = sum / n;
        const double sd = std::sqrt(sq / n - mean * mean);
        const double expect = std::sqrt(1.0 - s.alpha_bar[t]);
        CHECK(std::abs(sd - expect) / expect < 0.01);
        CHECK(std::abs(mean) < 0.01 * expect);
    }
    SUBCASE("shifted mean on a constant image") {
        Rng rng(4);
        Tensor c({1, 3, 183, 183}, 0.5f);
        const int t = 60;
        const auto d = forward_diffuse(c, t, s, rng);
        double sum = 0;
        for (float v : d.x_t.data) sum += v;
        const double mean = sum / static_cast<double>(d.x_t.numel());
        const double expect = std::sqrt(s.alpha_bar[t]) * 0.5;
        CHECK(std::abs(mean - expect) < 0.01 * std::sqrt(1 - s.alpha_bar[t]));
    }
    SUBCASE("determinism and range errors") {
        const Tensor x0 = to_tensor(testing::random_image(6, 5, 5));
        Rng a(9), b(9);
        const auto da = forward_diffuse(x0, 10, s, a);
        const auto db = forward_diffuse(x0, 10, s, b);
        CHECK(da.x_t == db.x_t);
        CHECK(da.eps == db.eps);
        CHECK_THROWS_AS(forward_diffuse(x0, 100, s, a), IndexError);
        CHECK_THROWS_AS(forward_diffuse(x0, -1, s, a), IndexError);
    }
}

TEST_CASE("reverse process with the plug-in oracle denoiser") {
    const auto s = make_schedule(100, 1e-4, 0.02);
    const Tensor x0 = to_tensor(testing::smooth_image(32, 32, 6));
    Rng rng(7);
    const auto d = forward_diffuse(x0, 99, s, rng);
    const Tensor eps = d.eps;
    EpsPredictor oracle = [&](const Tensor&, const Tensor&, const std::vector<int>&, int) { return eps; };
    const Tensor cond(x0.shape);
    const Tensor rec = reverse_diffuse(d.x_t, 99, cond, 0, s, oracle, 0.0, rng);
    double max_err = 0;
    for (std::size_t i = 0; i < rec.numel(); ++i) max_err = std::max(max_err, std::abs(double(rec.data[i]) - x0.data[i]));
    CHECK(max_err < 1e-3);

    // one deterministic reverse step inverts one forward step
    for (int t : {1, 25, 80}) {
        Rng r1(11), r2(11);
        const auto at_t = forward_diffuse(x0, t, s, r1);
        const auto at_prev = forward_diffuse(x0, t - 1, s, r2); // same eps draw
        REQUIRE(at_t.eps == at_prev.eps);
        const Tensor back = reverse_step(at_t.x_t, at_t.eps, t, s, 0.0, r1);
        for (std::size_t i = 0; i < back.numel(); i += 7)
            CHECK(back.data[i] == doctest::Approx(at_prev.x_t.data[i]).epsilon(1e-5));
    }
    // with noise, the residual is exactly the injected noise, whose std is the posterior sigma
    {
        const int t = 50;
        Rng r1(12), r2(12);
        const auto at_t = forward_diffuse(x0, t, s, r1);
        const auto at_prev = forward_diffuse(x0, t - 1, s, r2);
        Rng noise(13);
        const Tensor back = reverse_step(at_t.x_t, at_t.eps, t, s, 1.0, noise);
        const double ab = s.alpha_bar[t], abp = s.alpha_bar[t - 1];
        const double sigma = std::sqrt((1 - abp) / (1 - ab) * (1 - ab / abp));
        const double dir = std::sqrt(1 - abp - sigma * sigma);
        Rng replay(13);
        for (std::size_t i = 0; i < back.numel(); ++i) {
            const double expect = std::sqrt(abp) * x0.data[i] + dir * at_t.eps.data[i] + sigma * replay.normal();
            CHECK(back.data[i] == doctest::Approx(expect).epsilon(1e-4));
            if (i > 50) break;
        }
    }
}

TEST_CASE("denoiser config validation and shapes") {
    CHECK_THROWS_AS(Denoiser({64, 1, 32}, 0), ParameterError);
    CHECK_THROWS_AS(Denoiser({4, 4, 32}, 0), ParameterError);
    Denoiser net({8, 3, 16}, 1);
    const Tensor x({2, 3, 9, 7});
    const Tensor out = net.predict(x, x, {3, 50}, 1, false);
    CHECK(out.shape == std::vector<int>{2, 3, 9, 7});
}

TEST_CASE("training edge cases") {
    const auto s = make_schedule(20, 1e-4, 0.05);
    TrainOptions opts;
    opts.epochs = 0;
    opts.train_size = Size{32, 32};
    opts.min_size = 16;
    const Image img = testing::smooth_image(40, 40, 3);
    const auto m = train_model({img}, {8, 2, 8}, s, opts);
    CHECK(m.epochs_done == 0);
    CHECK(m.losses.empty());
    CHECK(m.probe_losses.size() == 1);
    CHECK(m.levels() == 3);
    CHECK_THROWS_AS(train_model({}, {8, 2, 8}, s, opts), ParameterError);
    opts.train_size.reset();
    CHECK_THROWS_AS(train_model({img, testing::smooth_image(40, 41, 1)}, {8, 2, 8}, s, opts), DimensionError);
}

TEST_CASE("training on a uniform gray image") {
    const auto s = make_schedule(100, 1e-4, 0.02);
    Image gray(32, 32, 3, 0.5f);
    TrainOptions opts;
    opts.epochs = 40;
    opts.steps_per_epoch = 25;
    opts.batch = 4;
    opts.learning_rate = 3e-3;
    opts.train_size.reset();
    opts.min_size = 32;
    opts.probe_samples = 32;
    opts.seed = 5;
    const auto m = train_model({gray}, {16, 3, 16}, s, opts);
    MESSAGE("probe loss " << m.probe_losses.front() << " -> best " << m.best_probe_losses.back());
    CHECK(m.best_probe_losses.back() <= 0.1 * m.probe_losses.front());
    for (std::size_t i = 1; i < m.best_probe_losses.size(); ++i)
        CHECK(m.best_probe_losses[i] <= m.best_probe_losses[i - 1]);
}

TEST_CASE("checkpoint round trip and resume") {
    testing::TempDir dir("diff_ckpt");
    const auto s = make_schedule(30, 1e-4, 0.05);
    const Image img = testing::smooth_image(24, 24, 8);
    TrainOptions opts;
    opts.epochs = 2;
    opts.steps_per_epoch = 3;
    opts.batch = 2;
    opts.train_size.reset();
    opts.min_size = 16;
    opts.seed = 3;
    const auto full = train_model({img}, {8, 2, 8}, s, opts);

    TrainOptions half = opts;
    half.epochs = 1;
    half.checkpoint = dir / "m.ckpt";
    train_model({img}, {8, 2, 8}, s, half);
    auto loaded = load_checkpoint(dir / "m.ckpt");
    CHECK(loaded.epochs_done == 1);
    CHECK(loaded.schedule.alpha_bar == s.alpha_bar);
    const auto resumed = train_model({img}, {8, 2, 8}, s, opts, std::move(loaded));
    CHECK(resumed.epochs_done == 2);
    CHECK(resumed.probe_losses == full.probe_losses);

    Rng a(1), b(1);
    auto m1 = full;
    auto m2 = resumed;
    CHECK(sample(m1, {24, 24}, a) == sample(m2, {24, 24}, b));
}

TEST_CASE("sampling is reproducible and sized") {
    const auto s = make_schedule(10, 1e-3, 0.1);
    TrainOptions opts;
    opts.epochs = 0;
    opts.train_size = Size{264, 200};
    opts.min_size = 32;
    auto m = init_model({8, 2, 8}, s, {264, 200}, opts);
    Rng a(3), b(3);
    const Image x = sample(m, {264, 200}, a);
    CHECK(x.width == 264);
    CHECK(x.height == 200);
    CHECK(x == sample(m, {264, 200}, b));
    for (float v : x.data) CHECK((v >= 0.f && v <= 1.f));
}

TEST_CASE("generate_dataset tags and counts") {
    testing::TempDir dir("diff_gen");
    const auto s = make_schedule(5, 1e-3, 0.1);
    TrainOptions opts;
    opts.train_size = Size{16, 16};
    opts.min_size = 12;
    std::vector<DiffusionModelState> models;
    for (View v : kViews)
        for (const auto& code : family_codes(Taxonomy::CCD_FAMILY)) {
            auto m = init_model({8, 2, 8}, s, {16, 16}, opts);
            m.stone_class = make_class(code, Taxonomy::CCD_FAMILY);
            m.view = v;
            models.push_back(std::move(m));
        }
    REQUIRE(models.size() == 12);
    const auto man = generate_dataset(models, 1, 42, dir / "a");
    CHECK(man.records.size() == 12);
    CHECK(man.with_view(View::SUR).size() == 6);
    const auto again = generate_dataset(models, 1, 42, dir / "b");
    for (std::size_t i = 0; i < man.records.size(); ++i) {
        CHECK(man.records[i].id == again.records[i].id);
        CHECK(load_image(man.records[i].path) == load_image(again.records[i].path));
        CHECK(man.records[i].source == Source::SYNTHETIC);
    }
    const auto loaded = load_manifest(dir / "a" / "manifest.txt");
    CHECK(loaded.records.size() == 12);
    CHECK_THROWS_AS(generate_dataset(models, 0, 1, dir / "c"), ParameterError);
}
