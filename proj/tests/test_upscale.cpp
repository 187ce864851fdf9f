#include "doctest.h"
#include "test_util.hpp"

#include "kstone/error.hpp"
#include "kstone/upscale.hpp"

#include "kstone/rng.hpp"

#include <algorithm>
#include <cmath>

using namespace kstone;
using namespace kstone::upscale;

namespace {

double mae(const Image& a, const Image& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) s += std::abs(a.data[i] - b.data[i]);
    return s / a.data.size();
}

// 1D Catmull-Rom weight, written out independently of the library kernel.
double cr(double x) {
    x = std::abs(x);
    if (x < 1) return 1.5 * x * x * x - 2.5 * x * x + 1;
    if (x < 2) return -0.5 * x * x * x + 2.5 * x * x - 4 * x + 2;
    return 0;
}

// Piecewise-constant 8x8 colour blocks: hard edges that bicubic blurs.
Image block_image(int w, int h, std::uint64_t seed) {
    Rng rng(seed);
    Image img(w, h, 3);
    std::vector<float> cols((w / 8 + 1) * (h / 8 + 1) * 3);
    for (auto& c : cols) c = static_cast<float>(rng.uniform());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(x, y, c) = cols[((y / 8) * (w / 8 + 1) + x / 8) * 3 + c];
    return img;
}

} // namespace

TEST_CASE("bicubic upscale produces the requested size") {
    Image img = testing::random_image(264, 200, 3);
    Image up = bicubic_upscale(img, 4);
    CHECK(up.width == 1056);
    CHECK(up.height == 800);
    CHECK_THROWS_AS(bicubic_upscale(img, 0), ParameterError);
}

TEST_CASE("bicubic upscale matches a direct Catmull-Rom evaluation") {
    Image img = testing::random_image(9, 7, 11);
    const int f = 4;
    Image up = bicubic_upscale(img, f);
    double worst = 0;
    for (int y = 0; y < up.height; ++y)
        for (int x = 0; x < up.width; ++x)
            for (int c = 0; c < 3; ++c) {
                const double sx = (x + 0.5) / f - 0.5, sy = (y + 0.5) / f - 0.5;
                const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
                double acc = 0;
                for (int j = y0 - 1; j <= y0 + 2; ++j)
                    for (int i = x0 - 1; i <= x0 + 2; ++i) {
                        const int ci = std::clamp(i, 0, img.width - 1), cj = std::clamp(j, 0, img.height - 1);
                        acc += cr(sx - i) * cr(sy - j) * img.at(ci, cj, c);
                    }
                acc = std::clamp(acc, 0.0, 1.0);
                worst = std::max(worst, std::abs(acc - up.at(x, y, c)));
            }
    CHECK(worst < 1e-5);
}

TEST_CASE("downscale then upscale round trip stays close on smooth content") {
    Image img = testing::smooth_image(256, 192, 2);
    Image small = box_downscale(img, 4);
    Image back = upscale_x4(small, Upscaler{});
    REQUIRE(back.size() == img.size());
    CHECK(mae(back, img) < 0.05);
}

TEST_CASE("fuse is convex and validates inputs") {
    Image a(4, 4, 3), b(4, 4, 3);
    std::fill(a.data.begin(), a.data.end(), 1.f);
    std::fill(b.data.begin(), b.data.end(), 0.2f);
    Image m = fuse(a, b, 0.25);
    for (float v : m.data) CHECK(v == doctest::Approx(0.4).epsilon(1e-6));
    CHECK(fuse(a, b, 0.0).data == b.data);
    CHECK(fuse(a, b, 1.0).data == a.data);
    CHECK_THROWS_AS(fuse(a, b, 1.5), ParameterError);
    CHECK_THROWS_AS(fuse(a, Image(3, 4, 3), 0.5), DimensionError);
}

TEST_CASE("untrained learned branch is an identity over bicubic") {
    Image img = testing::random_image(16, 12, 4);
    Upscaler learned{UpscalerKind::LEARNED, 4, std::make_shared<ResidualSR>(8, 3, 1)};
    Image a = upscale_x4(img, learned, 0.5);
    Image b = upscale_x4(img, Upscaler{});
    CHECK(mae(a, b) < 1e-6);
    CHECK_THROWS_AS(upscale_x4(img, Upscaler{UpscalerKind::LEARNED, 4, nullptr}), ConfigError);
    CHECK_THROWS_AS(upscale_x4(img, Upscaler{UpscalerKind::BICUBIC, 2, nullptr}), ConfigError);
}

TEST_CASE("training the residual branch lowers held-out error and weights round trip") {
    std::vector<Image> imgs{block_image(96, 96, 8), block_image(96, 96, 9)};
    const Image held = block_image(64, 64, 21);
    const Image held_small = resize_bicubic(held, 16, 16, true);
    auto net = std::make_shared<ResidualSR>(8, 3, 2);
    Upscaler a{UpscalerKind::LEARNED, 4, net};
    const double before = mae(upscale_x4(held_small, a, 1.0), held);
    SrTrainOptions o;
    o.epochs = 12;
    o.steps_per_epoch = 40;
    o.crop = 32;
    o.batch = 2;
    o.learning_rate = 2e-3;
    auto losses = train_residual_sr(*net, imgs, 4, o);
    REQUIRE(losses.size() == 12);
    const double after = mae(upscale_x4(held_small, a, 1.0), held);
    MESSAGE("held-out MAE " << before << " -> " << after);
    CHECK(after < before);

    testing::TempDir dir("sr");
    save_weights(*net, dir / "sr.bin");
    Upscaler b{UpscalerKind::LEARNED, 4, load_weights(dir / "sr.bin")};
    CHECK(upscale_x4(held_small, a).data == upscale_x4(held_small, b).data);
    CHECK_THROWS_AS(load_weights(dir / "missing.bin"), ConfigError);
}
