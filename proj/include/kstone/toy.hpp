#pragma once

#include "kstone/dataset.hpp"
#include "kstone/image.hpp"
#include "kstone/rng.hpp"

#include <filesystem>

namespace kstone::toy {

/// Procedural stand-in for the stone corpora. Class k is a texture with its
/// own orientation, frequency and palette; SEC views add radial banding.
/// The "ccd" domain shows a blurred, recoloured version of the texture on an
/// elliptical stone over a black background (sizes vary, so padding matters);
/// the "endo" domain fills the whole frame.
struct ToyOptions {
    int per_cell = 4;
    Size ccd_size{160, 120};  // largest CCD image; canvas of the ccd manifest
    Size endo_size{96, 72};
    double noise = 0.06;
    double blur_sigma = 1.2;
    std::uint64_t seed = 0;
};

Image texture(int cls, View view, Size size, Rng& rng, double noise);
Image ccd_variant(const Image& target_like, Rng& rng, double blur_sigma);
Image gaussian_blur(const Image& img, double sigma);

struct ToyCorpus {
    std::filesystem::path ccd_manifest;
    std::filesystem::path endo_manifest;
};

ToyCorpus make_toy_corpus(const std::filesystem::path& dir, const ToyOptions& opts);

} // namespace kstone::toy
