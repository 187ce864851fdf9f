#pragma once

#include "kstone/image.hpp"
#include "kstone/rng.hpp"

#include <filesystem>
#include <string>
#include <unistd.h>
#include <cmath>

namespace kstone::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("kstone_" + tag + "_" + std::to_string(Rng(std::hash<std::string>{}(tag)).next_u64() ^
                                                         static_cast<std::uint64_t>(::getpid())));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

private:
    std::filesystem::path path_;
};

inline Image random_image(int w, int h, std::uint64_t seed) {
    Rng rng(seed);
    Image img(w, h, 3);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform());
    return img;
}

/// Smooth test image: low-frequency sinusoids per channel.
inline Image smooth_image(int w, int h, std::uint64_t seed) {
    Rng rng(seed);
    Image img(w, h, 3);
    double fx[3], fy[3], ph[3];
    for (int c = 0; c < 3; ++c) {
        fx[c] = rng.uniform(0.5, 2.0) * 2 * M_PI / w;
        fy[c] = rng.uniform(0.5, 2.0) * 2 * M_PI / h;
        ph[c] = rng.uniform(0, 2 * M_PI);
    }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(x, y, c) = static_cast<float>(0.5 + 0.4 * std::sin(fx[c] * x + ph[c]) * std::cos(fy[c] * y));
    return img;
}

} // namespace kstone::testing
