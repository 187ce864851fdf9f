#include "kstone/image.hpp"

#include "kstone/error.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace kstone {

Size parse_size(const std::string& text) {
    std::string s = text;
    // accept "×" (U+00D7) as separator
    const std::string times = "\xC3\x97";
    if (auto pos = s.find(times); pos != std::string::npos) s.replace(pos, times.size(), "x");
    const auto pos = s.find_first_of("xX");
    if (pos == std::string::npos) throw ParameterError("size must be WxH: '" + text + "'");
    try {
        std::size_t used = 0;
        Size out{std::stoi(s.substr(0, pos), &used), 0};
        if (used != pos) throw ParameterError("bad width in '" + text + "'");
        const std::string hs = s.substr(pos + 1);
        out.height = std::stoi(hs, &used);
        if (used != hs.size()) throw ParameterError("bad height in '" + text + "'");
        if (out.width <= 0 || out.height <= 0) throw ParameterError("size must be positive: '" + text + "'");
        return out;
    } catch (const std::logic_error&) {
        throw ParameterError("size must be WxH: '" + text + "'");
    }
}

std::string format_size(Size s) { return std::to_string(s.width) + "x" + std::to_string(s.height); }

Rgb parse_hex_color(const std::string& text) {
    std::string s = text;
    if (!s.empty() && s[0] == '#') s = s.substr(1);
    if (s.size() != 6 || s.find_first_not_of("0123456789abcdefABCDEF") != std::string::npos)
        throw ParameterError("color must be #rrggbb: '" + text + "'");
    auto channel = [&](int i) { return static_cast<float>(std::stoi(s.substr(i, 2), nullptr, 16)) / 255.f; };
    return {channel(0), channel(2), channel(4)};
}

Image to_luma(const Image& rgb) {
    if (rgb.channels == 1) return rgb;
    Image out(rgb.width, rgb.height, 1);
    for (std::size_t i = 0; i < rgb.pixel_count(); ++i) {
        const float* p = &rgb.data[i * rgb.channels];
        out.data[i] = luma(p[0], p[1], p[2]);
    }
    return out;
}

Image load_image(const std::filesystem::path& path) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (m.empty()) throw IoError("cannot read image: " + path.string());
    Image out(m.cols, m.rows, 3);
    for (int y = 0; y < m.rows; ++y) {
        const auto* row = m.ptr<cv::Vec3b>(y);
        for (int x = 0; x < m.cols; ++x) {
            out.at(x, y, 0) = row[x][2] / 255.f;
            out.at(x, y, 1) = row[x][1] / 255.f;
            out.at(x, y, 2) = row[x][0] / 255.f;
        }
    }
    return out;
}

namespace {

std::uint32_t be32(const unsigned char* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) | p[3];
}

} // namespace

Size probe_image_size(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open image: " + path.string());
    unsigned char head[24] = {};
    in.read(reinterpret_cast<char*>(head), sizeof head);
    static const unsigned char png_sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
    if (in.gcount() == 24 && std::equal(png_sig, png_sig + 8, head))
        return {static_cast<int>(be32(head + 16)), static_cast<int>(be32(head + 20))};
    const Image img = load_image(path);
    return img.size();
}

Image quantize8(const Image& img) {
    Image out = img;
    for (auto& v : out.data) v = std::round(std::clamp(v, 0.f, 1.f) * 255.f) / 255.f;
    return out;
}

void save_png(const Image& img, const std::filesystem::path& path) {
    if (img.channels != 1 && img.channels != 3) throw ParameterError("save_png: 1 or 3 channels required");
    cv::Mat m(img.height, img.width, img.channels == 3 ? CV_8UC3 : CV_8UC1);
    auto q = [](float v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f)); };
    for (int y = 0; y < img.height; ++y) {
        auto* row = m.ptr<unsigned char>(y);
        for (int x = 0; x < img.width; ++x) {
            if (img.channels == 3) {
                row[3 * x + 0] = q(img.at(x, y, 2));
                row[3 * x + 1] = q(img.at(x, y, 1));
                row[3 * x + 2] = q(img.at(x, y, 0));
            } else {
                row[x] = q(img.at(x, y, 0));
            }
        }
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), m)) throw IoError("cannot write image: " + path.string());
}

Image crop(const Image& img, int x, int y, int w, int h) {
    if (x < 0 || y < 0 || w < 0 || h < 0 || x + w > img.width || y + h > img.height)
        throw DimensionError("crop window outside image");
    Image out(w, h, img.channels);
    const std::size_t row_len = static_cast<std::size_t>(w) * img.channels;
    for (int r = 0; r < h; ++r) {
        const float* src = &img.data[(static_cast<std::size_t>(y + r) * img.width + x) * img.channels];
        std::copy(src, src + row_len, &out.data[static_cast<std::size_t>(r) * row_len]);
    }
    return out;
}

Image clamp01(Image img) {
    for (auto& v : img.data) v = std::clamp(v, 0.f, 1.f);
    return img;
}

namespace {

double catmull_rom(double x) {
    constexpr double a = -0.5;
    x = std::abs(x);
    if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
    return 0.0;
}

struct Taps {
    int first = 0;
    std::vector<double> weights;
};

// Per-output-sample contributions along one axis.
std::vector<Taps> axis_taps(int in_len, int out_len, bool antialias) {
    const double scale = static_cast<double>(in_len) / out_len;
    const double stretch = (antialias && scale > 1.0) ? scale : 1.0;
    const double support = 2.0 * stretch;
    std::vector<Taps> taps(out_len);
    for (int o = 0; o < out_len; ++o) {
        const double center = (o + 0.5) * scale - 0.5;
        const int lo = static_cast<int>(std::floor(center - support)) + 1;
        const int hi = static_cast<int>(std::ceil(center + support)) - 1;
        Taps& t = taps[o];
        t.first = lo;
        double sum = 0.0;
        for (int i = lo; i <= hi; ++i) {
            const double w = catmull_rom((i - center) / stretch);
            t.weights.push_back(w);
            sum += w;
        }
        for (auto& w : t.weights) w /= sum;
    }
    return taps;
}

} // namespace

Image resize_bicubic(const Image& img, int out_w, int out_h, bool antialias) {
    if (out_w <= 0 || out_h <= 0) throw DimensionError("resize target must be positive");
    if (img.empty()) throw DimensionError("resize of empty image");
    if (out_w == img.width && out_h == img.height) return img;
    const int ch = img.channels;
    const auto tx = axis_taps(img.width, out_w, antialias);
    const auto ty = axis_taps(img.height, out_h, antialias);

    // horizontal pass
    Image mid(out_w, img.height, ch);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < out_w; ++x) {
            const Taps& t = tx[x];
            for (int c = 0; c < ch; ++c) {
                double acc = 0.0;
                for (std::size_t k = 0; k < t.weights.size(); ++k) {
                    const int sx = std::clamp(t.first + static_cast<int>(k), 0, img.width - 1);
                    acc += t.weights[k] * img.at(sx, y, c);
                }
                mid.at(x, y, c) = static_cast<float>(acc);
            }
        }
    }
    // vertical pass
    Image out(out_w, out_h, ch);
    for (int y = 0; y < out_h; ++y) {
        const Taps& t = ty[y];
        for (int x = 0; x < out_w; ++x) {
            for (int c = 0; c < ch; ++c) {
                double acc = 0.0;
                for (std::size_t k = 0; k < t.weights.size(); ++k) {
                    const int sy = std::clamp(t.first + static_cast<int>(k), 0, img.height - 1);
                    acc += t.weights[k] * mid.at(x, sy, c);
                }
                out.at(x, y, c) = static_cast<float>(acc);
            }
        }
    }
    return out;
}

Image box_downscale(const Image& img, int factor) {
    if (factor < 1) throw ParameterError("box_downscale factor must be >= 1");
    const int w = img.width / factor, h = img.height / factor;
    Image out(w, h, img.channels);
    const double norm = 1.0 / (factor * factor);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < img.channels; ++c) {
                double acc = 0.0;
                for (int dy = 0; dy < factor; ++dy)
                    for (int dx = 0; dx < factor; ++dx) acc += img.at(x * factor + dx, y * factor + dy, c);
                out.at(x, y, c) = static_cast<float>(acc * norm);
            }
    return out;
}

} // namespace kstone
