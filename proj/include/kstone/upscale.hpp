#pragma once

#include "kstone/image.hpp"
#include "kstone/nn/layers.hpp"

#include <filesystem>
#include <memory>
#include <optional>

namespace kstone::upscale {

enum class UpscalerKind { BICUBIC, LEARNED };

/// Small residual CNN refining a bicubic upscale: out = bicubic + f(bicubic).
class ResidualSR : public nn::Module {
public:
    ResidualSR(int channels, int depth, std::uint64_t seed);
    nn::Tensor forward(const nn::Tensor& x, bool train) override;
    nn::Tensor backward(const nn::Tensor& grad) override;
    void collect(const std::string& prefix, std::vector<nn::ParamRef>& params,
                 std::vector<nn::BufferRef>& buffers) override;
    int channels() const { return channels_; }
    int depth() const { return depth_; }

private:
    int channels_, depth_;
    nn::Sequential body_;
};

struct Upscaler {
    UpscalerKind kind = UpscalerKind::BICUBIC;
    int factor = 4;
    std::shared_ptr<ResidualSR> weights; // LEARNED only
};

/// Catmull-Rom upscale by an integer factor, clamped to [0,1].
Image bicubic_upscale(const Image& image, int factor);

/// weight * learned + (1 - weight) * bicubic, clamped.
Image fuse(const Image& learned, const Image& bicubic, double weight);

/// Runs the learned branch on an already bicubic-upscaled image.
Image learned_refine(ResidualSR& net, const Image& bicubic);

Image upscale_x4(const Image& image, const Upscaler& upscaler, double fuse_weight = 0.5);

struct SrTrainOptions {
    int epochs = 10;
    int steps_per_epoch = 20;
    int crop = 48;      // high-resolution crop side
    int batch = 4;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
};

/// Fits the residual branch on (downscale-then-bicubic, original) crops.
std::vector<double> train_residual_sr(ResidualSR& net, const std::vector<Image>& images, int factor,
                                      const SrTrainOptions& opts);

void save_weights(const ResidualSR& net, const std::filesystem::path& path);
std::shared_ptr<ResidualSR> load_weights(const std::filesystem::path& path);

/// Upscales every PNG/JPEG in `in_dir` into `out_dir` (same file stems, PNG).
/// If `in_dir` holds a manifest.txt, a rewritten manifest is emitted too.
void upscale_directory(const std::filesystem::path& in_dir, const std::filesystem::path& out_dir,
                       const Upscaler& upscaler, double fuse_weight);

} // namespace kstone::upscale
