#include "kstone/toy.hpp"

#include "kstone/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace kstone::toy {

namespace fs = std::filesystem;

namespace {

constexpr double kPi = 3.14159265358979323846;

struct ClassStyle {
    double angle, freq, freq2;
    Rgb c1, c2;
};

ClassStyle style(int cls) {
    static const ClassStyle s[6] = {
        {0.0, 0.10, 0.00, {0.85f, 0.75f, 0.45f}, {0.55f, 0.40f, 0.20f}},
        {0.5, 0.22, 0.05, {0.70f, 0.55f, 0.35f}, {0.90f, 0.85f, 0.70f}},
        {1.0, 0.14, 0.11, {0.60f, 0.45f, 0.30f}, {0.35f, 0.25f, 0.15f}},
        {1.6, 0.30, 0.00, {0.80f, 0.65f, 0.55f}, {0.45f, 0.35f, 0.30f}},
        {2.2, 0.07, 0.18, {0.75f, 0.70f, 0.60f}, {0.50f, 0.30f, 0.25f}},
        {2.7, 0.18, 0.26, {0.65f, 0.60f, 0.40f}, {0.85f, 0.70f, 0.50f}},
    };
    if (cls < 0 || cls >= 6) throw ParameterError("toy class index must be in 0..5");
    return s[cls];
}

std::string image_id(const std::string& prefix, const std::string& code, View v, int i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%s_%s_%02d", prefix.c_str(), code.c_str(), to_string(v).c_str(), i);
    return buf;
}

} // namespace

Image texture(int cls, View view, Size size, Rng& rng, double noise) {
    const ClassStyle st = style(cls);
    const double angle = st.angle + rng.uniform(-0.15, 0.15);
    const double freq = st.freq * rng.uniform(0.9, 1.1);
    const double ph1 = rng.uniform(0, 2 * kPi), ph2 = rng.uniform(0, 2 * kPi);
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double cx = rng.uniform(0.3, 0.7) * size.width, cy = rng.uniform(0.3, 0.7) * size.height;
    const float tint = static_cast<float>(rng.uniform(-0.05, 0.05));
    Image img(size.width, size.height, 3);
    for (int y = 0; y < size.height; ++y)
        for (int x = 0; x < size.width; ++x) {
            const double u = ca * x + sa * y, v = -sa * x + ca * y;
            double f = std::sin(2 * kPi * freq * u + ph1);
            if (st.freq2 > 0) f = 0.6 * f + 0.4 * std::sin(2 * kPi * st.freq2 * v + ph2);
            if (view == View::SEC) {
                const double r = std::hypot(x - cx, y - cy);
                f = 0.5 * f + 0.5 * std::sin(2 * kPi * 0.09 * r);
            }
            const double t = 0.5 + 0.5 * f;
            const float c1[3] = {st.c1.r, st.c1.g, st.c1.b}, c2[3] = {st.c2.r, st.c2.g, st.c2.b};
            for (int c = 0; c < 3; ++c) {
                const double val = c1[c] + (c2[c] - c1[c]) * t + tint + noise * rng.normal();
                img.at(x, y, c) = static_cast<float>(std::clamp(val, 0.0, 1.0));
            }
        }
    return img;
}

Image gaussian_blur(const Image& img, double sigma) {
    if (sigma <= 0) return img;
    const int r = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
    std::vector<double> k(2 * r + 1);
    double sum = 0;
    for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& v : k) v /= sum;
    Image mid(img.width, img.height, img.channels), out(img.width, img.height, img.channels);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) {
                double acc = 0;
                for (int i = -r; i <= r; ++i) acc += k[i + r] * img.at(std::clamp(x + i, 0, img.width - 1), y, c);
                mid.at(x, y, c) = static_cast<float>(acc);
            }
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) {
                double acc = 0;
                for (int i = -r; i <= r; ++i) acc += k[i + r] * mid.at(x, std::clamp(y + i, 0, img.height - 1), c);
                out.at(x, y, c) = static_cast<float>(acc);
            }
    return out;
}

Image ccd_variant(const Image& target_like, Rng& rng, double blur_sigma) {
    Image img = gaussian_blur(target_like, blur_sigma);
    const float gain[3] = {1.12f, 0.95f, 0.85f};
    const double gamma = rng.uniform(0.85, 1.0);
    for (std::size_t i = 0; i < img.pixel_count(); ++i)
        for (int c = 0; c < 3; ++c) {
            float& v = img.data[3 * i + c];
            v = std::clamp(static_cast<float>(std::pow(std::max(0.f, v * gain[c]), gamma)), 0.f, 1.f);
        }
    // elliptical stone on black
    const double ax = img.width * rng.uniform(0.47, 0.5), ay = img.height * rng.uniform(0.47, 0.5);
    const double cx = img.width / 2.0, cy = img.height / 2.0;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double dx = (x + 0.5 - cx) / ax, dy = (y + 0.5 - cy) / ay;
            if (dx * dx + dy * dy > 1.0)
                for (int c = 0; c < 3; ++c) img.at(x, y, c) = 0.f;
            else
                for (int c = 0; c < 3; ++c) img.at(x, y, c) = std::max(img.at(x, y, c), 0.08f);
        }
    return img;
}

ToyCorpus make_toy_corpus(const fs::path& dir, const ToyOptions& opts) {
    if (opts.per_cell < 1) throw ParameterError("toy corpus needs at least one image per cell");
    ToyCorpus out;
    out.ccd_manifest = dir / "ccd" / "manifest.txt";
    out.endo_manifest = dir / "endo" / "manifest.txt";
    fs::create_directories(dir / "ccd" / "images");
    fs::create_directories(dir / "endo" / "images");
    DatasetManifest ccd, endo;
    ccd.name = "toy_ccd";
    ccd.canvas = opts.ccd_size;
    endo.name = "toy_endo";
    for (int k = 0; k < 6; ++k)
        for (View v : kViews)
            for (int i = 0; i < opts.per_cell; ++i) {
                Rng rng(mix_seed(opts.seed, static_cast<std::uint64_t>((k * 2 + (v == View::SEC)) * 1000 + i)));
                {
                    const Size sz{opts.ccd_size.width - 2 * static_cast<int>(rng.below(6)),
                                  opts.ccd_size.height - 2 * static_cast<int>(rng.below(6))};
                    ImageRecord r;
                    r.stone_class = make_class(family_codes(Taxonomy::CCD_FAMILY)[k], Taxonomy::CCD_FAMILY);
                    r.id = image_id("ccd", r.stone_class.code, v, i);
                    r.path = dir / "ccd" / "images" / (r.id + ".png");
                    r.view = v;
                    r.source = Source::CCD;
                    const Image img = ccd_variant(texture(k, v, sz, rng, opts.noise), rng, opts.blur_sigma);
                    save_png(img, r.path);
                    r.width = img.width;
                    r.height = img.height;
                    ccd.records.push_back(r);
                }
                {
                    ImageRecord r;
                    r.stone_class = make_class(family_codes(Taxonomy::ENDO_FAMILY)[k], Taxonomy::ENDO_FAMILY);
                    r.id = image_id("endo", r.stone_class.code, v, i);
                    r.path = dir / "endo" / "images" / (r.id + ".png");
                    r.view = v;
                    r.source = Source::ENDOSCOPIC;
                    const Image img = texture(k, v, opts.endo_size, rng, opts.noise);
                    save_png(img, r.path);
                    r.width = img.width;
                    r.height = img.height;
                    endo.records.push_back(r);
                }
            }
    save_manifest(ccd, out.ccd_manifest);
    save_manifest(endo, out.endo_manifest);
    return out;
}

} // namespace kstone::toy
