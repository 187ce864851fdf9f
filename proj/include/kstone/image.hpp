#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

namespace kstone {

struct Size {
    int width = 0;
    int height = 0;
    bool operator==(const Size&) const = default;
};

/// Parses "WxH" (also accepts the multiplication sign). Throws ParameterError.
Size parse_size(const std::string& text);
std::string format_size(Size s);

struct Rgb {
    float r = 0.f, g = 0.f, b = 0.f;
};

/// Parses "#rrggbb" into normalized [0,1] components.
Rgb parse_hex_color(const std::string& text);

/// Interleaved (HWC) float image, values nominally in [0, 1].
struct Image {
    int width = 0;
    int height = 0;
    int channels = 3;
    std::vector<float> data;

    Image() = default;
    Image(int w, int h, int c = 3, float fill = 0.f)
        : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

    Size size() const { return {width, height}; }
    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
    bool empty() const { return data.empty(); }

    float& at(int x, int y, int c = 0) {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    float at(int x, int y, int c = 0) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }

    bool operator==(const Image&) const = default;
};

/// Rec. 601 luma of an RGB pixel.
inline float luma(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

/// Single-channel luma image.
Image to_luma(const Image& rgb);

Image load_image(const std::filesystem::path& path);
/// Reads only the dimensions of an image file.
Size probe_image_size(const std::filesystem::path& path);
/// Writes 8-bit PNG (1 or 3 channels). Values clamped to [0,1] and rounded.
void save_png(const Image& img, const std::filesystem::path& path);

/// Quantizes to the 8-bit grid that save_png would write.
Image quantize8(const Image& img);

Image crop(const Image& img, int x, int y, int w, int h);
Image clamp01(Image img);

/// Separable cubic resampling with the Catmull-Rom kernel (a = -0.5).
/// When `antialias` is set and the image shrinks, the kernel is stretched by the
/// scale ratio so the resampler acts as a low-pass filter. Borders replicate.
Image resize_bicubic(const Image& img, int out_w, int out_h, bool antialias = true);

/// Mean over non-overlapping factor x factor blocks.
Image box_downscale(const Image& img, int factor);

} // namespace kstone
