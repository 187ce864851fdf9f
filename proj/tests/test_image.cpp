#include "doctest.h"

#include "kstone/error.hpp"
#include "kstone/image.hpp"
#include "test_util.hpp"

using namespace kstone;

TEST_CASE("parse_size accepts WxH and the multiplication sign") {
    CHECK(parse_size("4288x2848") == Size{4288, 2848});
    CHECK(parse_size("264\xC3\x97" "200") == Size{264, 200});
    CHECK_THROWS_AS(parse_size("12"), ParameterError);
    CHECK_THROWS_AS(parse_size("0x5"), ParameterError);
    CHECK_THROWS_AS(parse_size("5xa"), ParameterError);
}

TEST_CASE("hex colors") {
    const Rgb c = parse_hex_color("#ff8000");
    CHECK(c.r == doctest::Approx(1.0));
    CHECK(c.g == doctest::Approx(128.0 / 255));
    CHECK(c.b == 0.f);
    CHECK_THROWS_AS(parse_hex_color("#12345"), ParameterError);
}

TEST_CASE("resize to the same size is the identity") {
    const Image img = testing::random_image(17, 9, 3);
    CHECK(resize_bicubic(img, 17, 9) == img);
}

TEST_CASE("cubic resampling preserves constants") {
    Image img(13, 7, 3);
    for (std::size_t i = 0; i < img.pixel_count(); ++i) {
        img.data[3 * i] = 0.25f;
        img.data[3 * i + 1] = 0.5f;
        img.data[3 * i + 2] = 0.75f;
    }
    for (const auto& [w, h] : {std::pair{52, 28}, std::pair{5, 3}, std::pair{20, 11}}) {
        const Image r = resize_bicubic(img, w, h);
        for (std::size_t i = 0; i < r.pixel_count(); ++i) {
            CHECK(r.data[3 * i] == doctest::Approx(0.25).epsilon(1e-6));
            CHECK(r.data[3 * i + 1] == doctest::Approx(0.5).epsilon(1e-6));
            CHECK(r.data[3 * i + 2] == doctest::Approx(0.75).epsilon(1e-6));
        }
    }
}

TEST_CASE("png round trip is exact on the 8-bit grid") {
    testing::TempDir dir("image_io");
    const Image img = quantize8(testing::random_image(11, 6, 9));
    save_png(img, dir / "a.png");
    const Image back = load_image(dir / "a.png");
    REQUIRE(back.size() == img.size());
    for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(back.data[i] == doctest::Approx(img.data[i]).epsilon(1e-7));
    CHECK(probe_image_size(dir / "a.png") == Size{11, 6});
}

TEST_CASE("crop and box downscale") {
    const Image img = testing::random_image(8, 8, 1);
    const Image c = crop(img, 2, 3, 4, 2);
    CHECK(c.at(0, 0, 1) == img.at(2, 3, 1));
    CHECK(c.at(3, 1, 2) == img.at(5, 4, 2));
    CHECK_THROWS_AS(crop(img, 6, 0, 4, 1), DimensionError);
    const Image b = box_downscale(img, 2);
    CHECK(b.width == 4);
    const double expect = (img.at(0, 0, 0) + img.at(1, 0, 0) + img.at(0, 1, 0) + img.at(1, 1, 0)) / 4.0;
    CHECK(b.at(0, 0, 0) == doctest::Approx(expect));
}
