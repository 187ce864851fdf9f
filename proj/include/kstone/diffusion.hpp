#pragma once

#include "kstone/dataset.hpp"
#include "kstone/error.hpp"
#include "kstone/image.hpp"
#include "kstone/nn/layers.hpp"
#include "kstone/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace kstone::diffusion {

using nn::Tensor;

struct NoiseSchedule {
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
    int steps() const { return static_cast<int>(beta.size()); }
};

/// Linear beta schedule; alpha_bar is the running product of alpha.
NoiseSchedule make_schedule(int steps, double beta_min, double beta_max);

struct ScalePyramid {
    std::vector<Image> levels; // coarsest first
    double scale_factor = 4.0 / 3.0;
    std::string source_id;
};

int pyramid_level_count(Size finest, double scale_factor, int min_size);
/// Level dimensions, coarsest first. Each level is the next finer one divided by
/// the factor and rounded, never going below `min_size`.
std::vector<Size> pyramid_dims(Size finest, double scale_factor, int min_size);
/// Same, with the level count fixed (used when sampling at a new size).
std::vector<Size> pyramid_dims_with_levels(Size finest, double scale_factor, int levels);
ScalePyramid build_pyramid(const Image& image, double scale_factor, int min_size, std::string source_id = {});

/// [0,1] HWC image <-> [-1,1] 1x3xHxW tensor.
Tensor to_tensor(const Image& img);
Image to_image(const Tensor& t, int index = 0);
/// Bicubic resize of every image in an NCHW batch.
Tensor resize_tensor(const Tensor& t, Size out);

struct Diffused {
    Tensor x_t;
    Tensor eps;
};

/// x_t = sqrt(alpha_bar[t]) x0 + sqrt(1 - alpha_bar[t]) eps, eps ~ N(0, I).
Diffused forward_diffuse(const Tensor& x0, int t, const NoiseSchedule& schedule, Rng& rng);

/// Noise prediction for a batch: (x_t, cond, per-sample timesteps, scale index).
using EpsPredictor = std::function<Tensor(const Tensor& x_t, const Tensor& cond, const std::vector<int>& t, int scale)>;

/// One reverse step from t to t-1. `eta` scales the injected noise: 1 gives
/// ancestral sampling with the posterior variance, 0 is deterministic. At t = 0
/// returns the clean estimate.
Tensor reverse_step(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& schedule, double eta,
                    Rng& rng, bool clip_x0 = true);

/// Runs reverse steps t_start, t_start-1, ..., 0.
Tensor reverse_diffuse(Tensor x, int t_start, const Tensor& cond, int scale, const NoiseSchedule& schedule,
                       const EpsPredictor& predictor, double eta, Rng& rng);

struct DenoiserConfig {
    int channels = 64;
    int depth = 4;
    int embed_dim = 32;
};

/// Fully convolutional noise predictor. Input is the noisy image concatenated
/// with the conditioning image (the upsampled coarser scale, zero at the
/// coarsest). Sinusoidal embeddings of t and the scale index are projected and
/// added per channel after every hidden convolution.
class Denoiser : public nn::Module {
public:
    Denoiser(const DenoiserConfig& cfg, std::uint64_t seed);

    Tensor predict(const Tensor& x_t, const Tensor& cond, const std::vector<int>& t, int scale, bool train);
    Tensor forward(const Tensor& x, bool train) override; // x = concat(x_t, cond); uses last set embedding
    Tensor backward(const Tensor& grad) override;
    void collect(const std::string& prefix, std::vector<nn::ParamRef>& params,
                 std::vector<nn::BufferRef>& buffers) override;

    const DenoiserConfig& config() const { return cfg_; }
    void set_embedding(const std::vector<int>& t, int scale);

private:
    DenoiserConfig cfg_;
    std::vector<std::unique_ptr<nn::Conv2d>> convs_;
    std::vector<std::unique_ptr<nn::Linear>> embeds_;
    std::vector<nn::SiLU> acts_;
    Tensor embedding_; // [N, embed_dim]
};

std::vector<float> sinusoidal_embedding(int value, int dim);

struct LossRecord {
    int epoch = 0;
    int scale = 0;
    double loss = 0.0;
};

struct TrainOptions {
    int epochs = 20;
    int steps_per_epoch = 50;
    int batch = 4;
    double learning_rate = 1e-3;
    double scale_factor = 4.0 / 3.0;
    int min_size = 32;
    /// Finest-scale training size; images are resized to it. Unset keeps native size.
    std::optional<Size> train_size = Size{264, 200};
    double truncate_fraction = 0.4;
    std::uint64_t seed = 0;
    int probe_samples = 8;
    double grad_clip = 1.0;
    std::optional<std::filesystem::path> checkpoint; // written after every finite epoch
    std::function<void(const LossRecord&)> on_loss;
};

struct DiffusionModelState {
    DenoiserConfig config;
    std::shared_ptr<Denoiser> net;
    NoiseSchedule schedule;
    double beta_min = 1e-4, beta_max = 0.02;
    std::vector<Size> pyramid_meta; // coarsest first
    double scale_factor = 4.0 / 3.0;
    double truncate_fraction = 0.4;
    StoneClass stone_class;
    View view = View::SUR;
    std::uint64_t rng_seed = 0;
    int epochs_done = 0;
    long long optimizer_steps = 0;
    std::vector<std::vector<float>> adam_m, adam_v;
    std::vector<LossRecord> losses;     // training-step means per (epoch, scale)
    std::vector<double> probe_losses;   // fixed-probe loss, index 0 = before training
    std::vector<double> best_probe_losses; // running minimum of probe_losses

    int levels() const { return static_cast<int>(pyramid_meta.size()); }
    /// First timestep of the truncated reverse process at finer scales.
    int truncated_start() const;
};

class DivergenceError : public TrainingError {
public:
    DivergenceError(const std::string& what, std::shared_ptr<DiffusionModelState> last)
        : TrainingError(what), last_finite(std::move(last)) {}
    std::shared_ptr<DiffusionModelState> last_finite;
};

DiffusionModelState init_model(const DenoiserConfig& cfg, const NoiseSchedule& schedule, Size finest,
                               const TrainOptions& opts);

/// Trains (or resumes, when `resume` is given) a per-(class, view) model on
/// images that all share one size.
DiffusionModelState train_model(const std::vector<Image>& images, const DenoiserConfig& cfg,
                                const NoiseSchedule& schedule, const TrainOptions& opts,
                                std::optional<DiffusionModelState> resume = std::nullopt);

/// Mean eps-prediction MSE on a fixed set of (image, scale, t, noise) draws.
double probe_loss(DiffusionModelState& model, const std::vector<ScalePyramid>& pyramids, int samples,
                  std::uint64_t seed);

void save_checkpoint(const DiffusionModelState& model, const std::filesystem::path& path);
DiffusionModelState load_checkpoint(const std::filesystem::path& path);

void write_loss_log(const std::vector<LossRecord>& losses, const std::filesystem::path& path);

/// Coarse-to-fine sampling: full reverse diffusion at the coarsest scale,
/// then upsample + partial re-noising + truncated reverse diffusion per scale.
Image sample(DiffusionModelState& model, Size out_size, Rng& rng, double eta = 1.0);
Image sample(DiffusionModelState& model, Size out_size, Rng& rng, const EpsPredictor& predictor, double eta);

EpsPredictor predictor_for(DiffusionModelState& model);

/// Samples `n_per_model` images from every model and writes them with a
/// SYNTHETIC manifest into `out_dir`.
DatasetManifest generate_dataset(std::vector<DiffusionModelState>& models, int n_per_model, std::uint64_t seed,
                                 const std::filesystem::path& out_dir, std::optional<Size> out_size = std::nullopt);

} // namespace kstone::diffusion
