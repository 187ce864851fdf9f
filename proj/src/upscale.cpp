#include "kstone/upscale.hpp"

#include "kstone/dataset.hpp"
#include "kstone/diffusion.hpp"
#include "kstone/error.hpp"
#include "kstone/nn/optim.hpp"
#include "kstone/nn/serialize.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>

namespace kstone::upscale {

using nn::Tensor;

ResidualSR::ResidualSR(int channels, int depth, std::uint64_t seed) : channels_(channels), depth_(depth) {
    if (depth < 2 || channels < 1) throw ParameterError("ResidualSR needs depth >= 2 and channels >= 1");
    Rng rng(seed);
    for (int l = 0; l < depth; ++l) {
        const int in = l == 0 ? 3 : channels;
        const int out = l == depth - 1 ? 3 : channels;
        auto& conv = body_.add<nn::Conv2d>(in, out, 3, 1, 1, true, rng);
        if (l == depth - 1) {
            // start as an exact identity over the bicubic input
            std::fill(conv.weight.value.data.begin(), conv.weight.value.data.end(), 0.f);
            std::fill(conv.bias.value.data.begin(), conv.bias.value.data.end(), 0.f);
        } else {
            body_.add<nn::ReLU>();
        }
    }
}

Tensor ResidualSR::forward(const Tensor& x, bool train) {
    Tensor r = body_.forward(x, train);
    for (std::size_t i = 0; i < r.numel(); ++i) r.data[i] += x.data[i];
    return r;
}

Tensor ResidualSR::backward(const Tensor& grad) {
    Tensor dx = body_.backward(grad);
    for (std::size_t i = 0; i < dx.numel(); ++i) dx.data[i] += grad.data[i];
    return dx;
}

void ResidualSR::collect(const std::string& prefix, std::vector<nn::ParamRef>& params,
                         std::vector<nn::BufferRef>& buffers) {
    body_.collect(prefix + "body.", params, buffers);
}

Image bicubic_upscale(const Image& image, int factor) {
    if (factor < 1) throw ParameterError("upscale factor must be >= 1");
    if (factor == 1) return image;
    return clamp01(resize_bicubic(image, image.width * factor, image.height * factor, false));
}

Image fuse(const Image& learned, const Image& bicubic, double weight) {
    if (learned.size() != bicubic.size() || learned.channels != bicubic.channels)
        throw DimensionError("fuse: branch outputs differ in size");
    if (!(weight >= 0.0 && weight <= 1.0)) throw ParameterError("fuse weight must lie in [0,1]");
    if (weight == 0.0) return bicubic;
    if (weight == 1.0) return learned;
    Image out(bicubic.width, bicubic.height, bicubic.channels);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = std::clamp(static_cast<float>(weight * learned.data[i] + (1.0 - weight) * bicubic.data[i]),
                                 0.f, 1.f);
    return out;
}

Image learned_refine(ResidualSR& net, const Image& bicubic) {
    const Tensor out = net.forward(diffusion::to_tensor(bicubic), false);
    return diffusion::to_image(out);
}

Image upscale_x4(const Image& image, const Upscaler& upscaler, double fuse_weight) {
    if (upscaler.factor != 4) throw ConfigError("upscale_x4 requires an upscaler with factor 4");
    const Image base = bicubic_upscale(image, 4);
    if (upscaler.kind == UpscalerKind::BICUBIC) return base;
    if (!upscaler.weights) throw ConfigError("LEARNED upscaler has no weights loaded");
    if (fuse_weight == 0.0) return base;
    return fuse(learned_refine(*upscaler.weights, base), base, fuse_weight);
}

std::vector<double> train_residual_sr(ResidualSR& net, const std::vector<Image>& images, int factor,
                                      const SrTrainOptions& opts) {
    if (images.empty()) throw ParameterError("train_residual_sr needs images");
    const int crop_side = opts.crop - opts.crop % factor;
    for (const auto& img : images)
        if (img.width < crop_side || img.height < crop_side)
            throw DimensionError("training image smaller than the SR crop");
    auto params = nn::parameters(net);
    nn::Adam adam(params, opts.learning_rate);
    Rng rng(opts.seed);
    std::vector<double> epoch_loss;
    for (int e = 0; e < opts.epochs; ++e) {
        double acc = 0.0;
        for (int s = 0; s < opts.steps_per_epoch; ++s) {
            Tensor in({opts.batch, 3, crop_side, crop_side}), target({opts.batch, 3, crop_side, crop_side});
            const std::size_t per = in.numel() / opts.batch;
            for (int b = 0; b < opts.batch; ++b) {
                const Image& img = images[rng.below(images.size())];
                const int x = static_cast<int>(rng.below(img.width - crop_side + 1));
                const int y = static_cast<int>(rng.below(img.height - crop_side + 1));
                const Image hr = crop(img, x, y, crop_side, crop_side);
                const Image lr = resize_bicubic(hr, crop_side / factor, crop_side / factor, true);
                const Tensor ti = diffusion::to_tensor(bicubic_upscale(lr, factor));
                const Tensor tt = diffusion::to_tensor(hr);
                std::copy(ti.data.begin(), ti.data.end(), in.data.begin() + b * per);
                std::copy(tt.data.begin(), tt.data.end(), target.data.begin() + b * per);
            }
            adam.zero_grad();
            Tensor grad;
            acc += nn::mse_loss(net.forward(in, true), target, grad);
            net.backward(grad);
            adam.step();
        }
        epoch_loss.push_back(acc / opts.steps_per_epoch);
    }
    return epoch_loss;
}

void save_weights(const ResidualSR& net, const std::filesystem::path& path) {
    auto& mut = const_cast<ResidualSR&>(net);
    nn::BlobFile f;
    f.magic = "KSSR";
    f.version = 1;
    f.header = nlohmann::json{{"channels", net.channels()}, {"depth", net.depth()}}.dump();
    f.blobs.push_back(nn::flatten_state(mut));
    nn::write_blob_file(f, path);
}

std::shared_ptr<ResidualSR> load_weights(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("SR weights not found: " + path.string());
    const auto f = nn::read_blob_file(path, "KSSR");
    const auto meta = nlohmann::json::parse(f.header);
    auto net = std::make_shared<ResidualSR>(meta["channels"].get<int>(), meta["depth"].get<int>(), 0);
    if (f.blobs.empty()) throw IoError(path.string() + ": no parameter blob");
    nn::restore_state(*net, f.blobs[0]);
    return net;
}

void upscale_directory(const std::filesystem::path& in_dir, const std::filesystem::path& out_dir,
                       const Upscaler& upscaler, double fuse_weight) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir / "images");
    const fs::path manifest = in_dir / "manifest.txt";
    if (fs::exists(manifest)) {
        DatasetManifest m = load_manifest(manifest);
        for (auto& r : m.records) {
            const Image up = upscale_x4(load_image(r.path), upscaler, fuse_weight);
            r.path = out_dir / "images" / (r.id + ".png");
            r.width = up.width;
            r.height = up.height;
            save_png(up, r.path);
        }
        m.name += "_x4";
        save_manifest(m, out_dir / "manifest.txt");
        return;
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(in_dir)) {
        auto ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
        if (e.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files)
        save_png(upscale_x4(load_image(f), upscaler, fuse_weight), out_dir / "images" / (f.stem().string() + ".png"));
}

} // namespace kstone::upscale
