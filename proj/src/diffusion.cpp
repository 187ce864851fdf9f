#include "kstone/diffusion.hpp"

#include "kstone/error.hpp"
#include "kstone/nn/optim.hpp"
#include "kstone/nn/serialize.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace kstone::diffusion {

using nlohmann::json;

// Schedule and pyramid ---------------------------------------------------------

NoiseSchedule make_schedule(int steps, double beta_min, double beta_max) {
    if (steps < 1) throw ParameterError("schedule needs at least one timestep");
    if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0))
        throw ParameterError("schedule bounds must satisfy 0 < beta_min <= beta_max < 1");
    NoiseSchedule s;
    s.beta.resize(steps);
    s.alpha.resize(steps);
    s.alpha_bar.resize(steps);
    double prod = 1.0;
    for (int t = 0; t < steps; ++t) {
        s.beta[t] = steps == 1 ? beta_min : beta_min + (beta_max - beta_min) * t / (steps - 1);
        s.alpha[t] = 1.0 - s.beta[t];
        prod *= s.alpha[t];
        s.alpha_bar[t] = prod;
    }
    return s;
}

int pyramid_level_count(Size finest, double scale_factor, int min_size) {
    if (!(scale_factor > 1.0)) throw ParameterError("scale factor must exceed 1");
    if (min_size < 1) throw ParameterError("min_size must be positive");
    const int shortest = std::min(finest.width, finest.height);
    if (shortest < min_size)
        throw DimensionError("image " + format_size(finest) + " is smaller than min_size " + std::to_string(min_size));
    // small epsilon so exact powers of the factor land on the right side of floor()
    const double ratio = std::log(static_cast<double>(shortest) / min_size) / std::log(scale_factor);
    return static_cast<int>(std::floor(ratio + 1e-9)) + 1;
}

std::vector<Size> pyramid_dims_with_levels(Size finest, double scale_factor, int levels) {
    if (levels < 1) throw ParameterError("pyramid needs at least one level");
    std::vector<Size> dims{finest};
    for (int i = 1; i < levels; ++i) {
        const Size prev = dims.back();
        dims.push_back({std::max(1, static_cast<int>(std::lround(prev.width / scale_factor))),
                        std::max(1, static_cast<int>(std::lround(prev.height / scale_factor)))});
    }
    std::reverse(dims.begin(), dims.end());
    return dims;
}

std::vector<Size> pyramid_dims(Size finest, double scale_factor, int min_size) {
    auto dims = pyramid_dims_with_levels(finest, scale_factor, pyramid_level_count(finest, scale_factor, min_size));
    for (auto& d : dims) {
        d.width = std::max(d.width, std::min(min_size, finest.width));
        d.height = std::max(d.height, std::min(min_size, finest.height));
    }
    return dims;
}

ScalePyramid build_pyramid(const Image& image, double scale_factor, int min_size, std::string source_id) {
    ScalePyramid p;
    p.scale_factor = scale_factor;
    p.source_id = std::move(source_id);
    for (const Size d : pyramid_dims(image.size(), scale_factor, min_size))
        p.levels.push_back(resize_bicubic(image, d.width, d.height, true));
    return p;
}

// Tensor helpers ---------------------------------------------------------------

Tensor to_tensor(const Image& img) {
    Tensor t({1, img.channels, img.height, img.width});
    const std::size_t plane = img.pixel_count();
    for (std::size_t i = 0; i < plane; ++i)
        for (int c = 0; c < img.channels; ++c) t.data[c * plane + i] = img.data[i * img.channels + c] * 2.f - 1.f;
    return t;
}

Image to_image(const Tensor& t, int index) {
    const int C = t.dim(1), H = t.dim(2), W = t.dim(3);
    Image img(W, H, C);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const float* base = t.ptr() + static_cast<std::size_t>(index) * C * plane;
    for (std::size_t i = 0; i < plane; ++i)
        for (int c = 0; c < C; ++c)
            img.data[i * C + c] = std::clamp((base[c * plane + i] + 1.f) * 0.5f, 0.f, 1.f);
    return img;
}

Tensor resize_tensor(const Tensor& t, Size out) {
    const int N = t.dim(0), C = t.dim(1), H = t.dim(2), W = t.dim(3);
    Tensor r({N, C, out.height, out.width});
    const std::size_t in_plane = static_cast<std::size_t>(H) * W;
    const std::size_t out_plane = static_cast<std::size_t>(out.height) * out.width;
    for (int n = 0; n < N; ++n) {
        Image img(W, H, C);
        const float* base = t.ptr() + static_cast<std::size_t>(n) * C * in_plane;
        for (std::size_t i = 0; i < in_plane; ++i)
            for (int c = 0; c < C; ++c) img.data[i * C + c] = base[c * in_plane + i];
        const Image res = resize_bicubic(img, out.width, out.height, true);
        float* dst = r.ptr() + static_cast<std::size_t>(n) * C * out_plane;
        for (std::size_t i = 0; i < out_plane; ++i)
            for (int c = 0; c < C; ++c) dst[c * out_plane + i] = res.data[i * C + c];
    }
    return r;
}

// Forward / reverse process ----------------------------------------------------

Diffused forward_diffuse(const Tensor& x0, int t, const NoiseSchedule& schedule, Rng& rng) {
    if (t < 0 || t >= schedule.steps())
        throw IndexError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(schedule.steps()) + ")");
    Diffused d{Tensor(x0.shape), Tensor(x0.shape)};
    const double a = std::sqrt(schedule.alpha_bar[t]);
    const double b = std::sqrt(1.0 - schedule.alpha_bar[t]);
    for (std::size_t i = 0; i < x0.numel(); ++i) {
        const double e = rng.normal();
        d.eps.data[i] = static_cast<float>(e);
        d.x_t.data[i] = static_cast<float>(a * x0.data[i] + b * e);
    }
    return d;
}

Tensor reverse_step(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& schedule, double eta,
                    Rng& rng, bool clip_x0) {
    if (t < 0 || t >= schedule.steps()) throw IndexError("reverse_step: timestep out of range");
    const double ab = schedule.alpha_bar[t];
    const double ab_prev = t > 0 ? schedule.alpha_bar[t - 1] : 1.0;
    const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    const std::size_t n = x_t.numel();
    Tensor x0(x_t.shape);
    std::vector<double> eps(n);
    for (std::size_t i = 0; i < n; ++i) {
        double e = eps_hat.data[i];
        double v = (x_t.data[i] - sb * e) / sa;
        if (clip_x0 && (v > 1.0 || v < -1.0)) {
            v = std::clamp(v, -1.0, 1.0);
            e = (x_t.data[i] - sa * v) / sb;
        }
        x0.data[i] = static_cast<float>(v);
        eps[i] = e;
    }
    if (t == 0) return x0;
    const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev));
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    const double sp = std::sqrt(ab_prev);
    Tensor out(x_t.shape);
    for (std::size_t i = 0; i < n; ++i) {
        double v = sp * x0.data[i] + dir * eps[i];
        if (sigma > 0.0) v += sigma * rng.normal();
        out.data[i] = static_cast<float>(v);
    }
    return out;
}

Tensor reverse_diffuse(Tensor x, int t_start, const Tensor& cond, int scale, const NoiseSchedule& schedule,
                       const EpsPredictor& predictor, double eta, Rng& rng) {
    const std::vector<int> dummy(static_cast<std::size_t>(x.dim(0)), 0);
    for (int t = t_start; t >= 0; --t) {
        std::vector<int> ts(dummy.size(), t);
        const Tensor eps = predictor(x, cond, ts, scale);
        x = reverse_step(x, eps, t, schedule, eta, rng);
    }
    return x;
}

// Denoiser ---------------------------------------------------------------------

std::vector<float> sinusoidal_embedding(int value, int dim) {
    std::vector<float> e(dim, 0.f);
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half));
        e[i] = static_cast<float>(std::sin(value * freq));
        e[half + i] = static_cast<float>(std::cos(value * freq));
    }
    return e;
}

Denoiser::Denoiser(const DenoiserConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.depth < 2) throw ParameterError("denoiser depth must be >= 2");
    if (cfg.channels < 8) throw ParameterError("denoiser needs >= 8 channels");
    if (cfg.embed_dim < 4 || cfg.embed_dim % 4 != 0) throw ParameterError("embed_dim must be a positive multiple of 4");
    Rng rng(seed);
    for (int l = 0; l < cfg.depth; ++l) {
        const int in = l == 0 ? 6 : cfg.channels;
        const int out = l == cfg.depth - 1 ? 3 : cfg.channels;
        convs_.push_back(std::make_unique<nn::Conv2d>(in, out, 3, 1, 1, true, rng));
        if (l < cfg.depth - 1) embeds_.push_back(std::make_unique<nn::Linear>(cfg.embed_dim, cfg.channels, rng));
    }
    acts_.resize(cfg.depth - 1);
}

void Denoiser::collect(const std::string& prefix, std::vector<nn::ParamRef>& params,
                       std::vector<nn::BufferRef>& buffers) {
    for (std::size_t l = 0; l < convs_.size(); ++l) {
        convs_[l]->collect(prefix + "conv" + std::to_string(l) + ".", params, buffers);
        if (l < embeds_.size()) embeds_[l]->collect(prefix + "embed" + std::to_string(l) + ".", params, buffers);
    }
}

void Denoiser::set_embedding(const std::vector<int>& t, int scale) {
    const int half = cfg_.embed_dim / 2;
    embedding_ = Tensor({static_cast<int>(t.size()), cfg_.embed_dim});
    const auto se = sinusoidal_embedding(scale, half);
    for (std::size_t n = 0; n < t.size(); ++n) {
        const auto te = sinusoidal_embedding(t[n], half);
        std::copy(te.begin(), te.end(), embedding_.ptr() + n * cfg_.embed_dim);
        std::copy(se.begin(), se.end(), embedding_.ptr() + n * cfg_.embed_dim + half);
    }
}

Tensor Denoiser::predict(const Tensor& x_t, const Tensor& cond, const std::vector<int>& t, int scale, bool train) {
    if (static_cast<int>(t.size()) != x_t.dim(0)) throw DimensionError("one timestep per batch item required");
    set_embedding(t, scale);
    return forward(nn::concat_channels(x_t, cond), train);
}

Tensor Denoiser::forward(const Tensor& x, bool train) {
    Tensor h = x;
    const int N = x.dim(0);
    for (std::size_t l = 0; l < convs_.size(); ++l) {
        h = convs_[l]->forward(h, train);
        if (l + 1 == convs_.size()) break;
        const Tensor e = embeds_[l]->forward(embedding_, train);
        const int C = h.dim(1);
        const std::size_t plane = static_cast<std::size_t>(h.dim(2)) * h.dim(3);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                float* p = h.ptr() + (static_cast<std::size_t>(n) * C + c) * plane;
                const float b = e.data[static_cast<std::size_t>(n) * C + c];
                for (std::size_t i = 0; i < plane; ++i) p[i] += b;
            }
        h = acts_[l].forward(h, train);
    }
    return h;
}

Tensor Denoiser::backward(const Tensor& grad) {
    Tensor g = convs_.back()->backward(grad);
    for (int l = static_cast<int>(convs_.size()) - 2; l >= 0; --l) {
        g = acts_[l].backward(g);
        const int N = g.dim(0), C = g.dim(1);
        const std::size_t plane = static_cast<std::size_t>(g.dim(2)) * g.dim(3);
        Tensor ge({N, C});
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const float* p = g.ptr() + (static_cast<std::size_t>(n) * C + c) * plane;
                double acc = 0.0;
                for (std::size_t i = 0; i < plane; ++i) acc += p[i];
                ge.data[static_cast<std::size_t>(n) * C + c] = static_cast<float>(acc);
            }
        embeds_[l]->backward(ge);
        g = convs_[l]->backward(g);
    }
    return g;
}

// Model state ------------------------------------------------------------------

int DiffusionModelState::truncated_start() const {
    const int T = schedule.steps();
    return std::clamp(static_cast<int>(std::lround(truncate_fraction * T)), 0, T - 1);
}

namespace {

std::shared_ptr<DiffusionModelState> clone_state(const DiffusionModelState& s) {
    auto c = std::make_shared<DiffusionModelState>(s);
    c->net = std::make_shared<Denoiser>(s.config, 0);
    nn::restore_state(*c->net, nn::flatten_state(*s.net));
    return c;
}

struct ScaleData {
    Tensor x0;   // 1x3xHxW
    Tensor cond; // 1x3xHxW
};

std::vector<std::vector<ScaleData>> prepare(const std::vector<ScalePyramid>& pyramids) {
    std::vector<std::vector<ScaleData>> out;
    for (const auto& p : pyramids) {
        std::vector<ScaleData> scales;
        for (std::size_t s = 0; s < p.levels.size(); ++s) {
            ScaleData d;
            d.x0 = to_tensor(p.levels[s]);
            if (s == 0) {
                d.cond = Tensor(d.x0.shape);
            } else {
                const Image up = resize_bicubic(p.levels[s - 1], p.levels[s].width, p.levels[s].height, true);
                d.cond = to_tensor(up);
            }
            scales.push_back(std::move(d));
        }
        out.push_back(std::move(scales));
    }
    return out;
}

Tensor repeat_batch(const Tensor& t, int n) {
    Tensor r({n, t.dim(1), t.dim(2), t.dim(3)});
    for (int i = 0; i < n; ++i) std::copy(t.data.begin(), t.data.end(), r.data.begin() + i * t.numel());
    return r;
}

int draw_timestep(int scale, const DiffusionModelState& m, Rng& rng) {
    const int limit = scale == 0 ? m.schedule.steps() : m.truncated_start() + 1;
    return static_cast<int>(rng.below(static_cast<std::uint64_t>(limit)));
}

std::vector<ScalePyramid> make_pyramids(const std::vector<Image>& images, const TrainOptions& opts, Size& finest) {
    if (images.empty()) throw ParameterError("train_model needs at least one image");
    std::vector<ScalePyramid> pyramids;
    finest = opts.train_size ? *opts.train_size : images.front().size();
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (!opts.train_size && images[i].size() != finest)
            throw DimensionError("training images must share one size (pad first)");
        const Image img = opts.train_size ? resize_bicubic(images[i], finest.width, finest.height, true) : images[i];
        pyramids.push_back(build_pyramid(img, opts.scale_factor, opts.min_size, std::to_string(i)));
    }
    return pyramids;
}

} // namespace

DiffusionModelState init_model(const DenoiserConfig& cfg, const NoiseSchedule& schedule, Size finest,
                               const TrainOptions& opts) {
    DiffusionModelState m;
    m.config = cfg;
    m.net = std::make_shared<Denoiser>(cfg, mix_seed(opts.seed, 0xD1FF));
    m.schedule = schedule;
    m.beta_min = schedule.beta.front();
    m.beta_max = schedule.beta.back();
    m.pyramid_meta = pyramid_dims(finest, opts.scale_factor, opts.min_size);
    m.scale_factor = opts.scale_factor;
    m.truncate_fraction = opts.truncate_fraction;
    m.rng_seed = opts.seed;
    return m;
}

double probe_loss(DiffusionModelState& model, const std::vector<ScalePyramid>& pyramids, int samples,
                  std::uint64_t seed) {
    const auto data = prepare(pyramids);
    Rng rng(seed);
    double total = 0.0;
    for (int k = 0; k < samples; ++k) {
        const auto& scales = data[rng.below(data.size())];
        const int s = static_cast<int>(rng.below(scales.size()));
        const int t = draw_timestep(s, model, rng);
        const auto d = forward_diffuse(scales[s].x0, t, model.schedule, rng);
        const Tensor pred = model.net->predict(d.x_t, scales[s].cond, {t}, s, false);
        Tensor g;
        total += nn::mse_loss(pred, d.eps, g);
    }
    return total / samples;
}

DiffusionModelState train_model(const std::vector<Image>& images, const DenoiserConfig& cfg,
                                const NoiseSchedule& schedule, const TrainOptions& opts,
                                std::optional<DiffusionModelState> resume) {
    Size finest;
    const auto pyramids = make_pyramids(images, opts, finest);
    DiffusionModelState m = resume ? std::move(*resume) : init_model(cfg, schedule, finest, opts);
    if (resume && m.pyramid_meta != pyramid_dims(finest, opts.scale_factor, opts.min_size))
        throw ParameterError("resumed checkpoint has a different pyramid geometry");
    const auto data = prepare(pyramids);
    const std::uint64_t probe_seed = mix_seed(m.rng_seed, 0x9B0BE);

    auto params = nn::parameters(*m.net);
    nn::Adam adam(params, opts.learning_rate);
    if (!m.adam_m.empty()) {
        adam.m = m.adam_m;
        adam.v = m.adam_v;
        adam.t = m.optimizer_steps;
    }
    if (m.probe_losses.empty()) {
        m.probe_losses.push_back(probe_loss(m, pyramids, opts.probe_samples, probe_seed));
        m.best_probe_losses.push_back(m.probe_losses.back());
    }

    const int levels = m.levels();
    for (int epoch = m.epochs_done; epoch < opts.epochs; ++epoch) {
        Rng rng(mix_seed(m.rng_seed, static_cast<std::uint64_t>(epoch) + 1));
        const auto last_finite = clone_state(m);
        std::vector<double> sum(levels, 0.0);
        std::vector<int> count(levels, 0);
        for (int step = 0; step < opts.steps_per_epoch; ++step) {
            const auto& scales = data[rng.below(data.size())];
            const int s = static_cast<int>(rng.below(static_cast<std::uint64_t>(levels)));
            const int B = std::max(1, opts.batch);
            std::vector<int> ts(B);
            for (auto& t : ts) t = draw_timestep(s, m, rng);
            const Tensor x0 = repeat_batch(scales[s].x0, B);
            const Tensor cond = repeat_batch(scales[s].cond, B);
            Tensor xt(x0.shape), eps(x0.shape);
            const std::size_t per = scales[s].x0.numel();
            for (int b = 0; b < B; ++b) {
                const double a = std::sqrt(m.schedule.alpha_bar[ts[b]]);
                const double c = std::sqrt(1.0 - m.schedule.alpha_bar[ts[b]]);
                for (std::size_t i = 0; i < per; ++i) {
                    const double e = rng.normal();
                    eps.data[b * per + i] = static_cast<float>(e);
                    xt.data[b * per + i] = static_cast<float>(a * x0.data[b * per + i] + c * e);
                }
            }
            adam.zero_grad();
            const Tensor pred = m.net->predict(xt, cond, ts, s, true);
            Tensor grad;
            const double loss = nn::mse_loss(pred, eps, grad);
            if (!std::isfinite(loss))
                throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                          std::to_string(step) + "; last finite checkpoint retained",
                                      last_finite);
            m.net->backward(grad);
            if (opts.grad_clip > 0.0) nn::clip_grad_norm(params, opts.grad_clip);
            adam.step();
            sum[s] += loss;
            ++count[s];
        }
        for (int s = 0; s < levels; ++s) {
            if (count[s] == 0) continue;
            LossRecord rec{epoch, s, sum[s] / count[s]};
            m.losses.push_back(rec);
            if (opts.on_loss) opts.on_loss(rec);
        }
        const double probe = probe_loss(m, pyramids, opts.probe_samples, probe_seed);
        if (!std::isfinite(probe))
            throw DivergenceError("non-finite probe loss after epoch " + std::to_string(epoch), last_finite);
        m.probe_losses.push_back(probe);
        m.best_probe_losses.push_back(std::min(probe, m.best_probe_losses.back()));
        m.epochs_done = epoch + 1;
        m.optimizer_steps = adam.t;
        m.adam_m = adam.m;
        m.adam_v = adam.v;
        if (opts.checkpoint) save_checkpoint(m, *opts.checkpoint);
    }
    m.optimizer_steps = adam.t;
    m.adam_m = adam.m;
    m.adam_v = adam.v;
    return m;
}

// Checkpoints ------------------------------------------------------------------

namespace {

constexpr const char* kMagic = "KSDIFF";
constexpr std::uint32_t kVersion = 1;

std::vector<float> concat(const std::vector<std::vector<float>>& parts) {
    std::vector<float> out;
    for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
    return out;
}

} // namespace

void save_checkpoint(const DiffusionModelState& m, const std::filesystem::path& path) {
    json meta;
    meta["config"] = {{"channels", m.config.channels}, {"depth", m.config.depth}, {"embed_dim", m.config.embed_dim}};
    meta["schedule"] = {{"steps", m.schedule.steps()},
                        {"beta_min", m.beta_min},
                        {"beta_max", m.beta_max},
                        {"beta", m.schedule.beta},
                        {"alpha_bar", m.schedule.alpha_bar}};
    json dims = json::array();
    for (const auto& d : m.pyramid_meta) dims.push_back({d.width, d.height});
    meta["pyramid"] = dims;
    meta["scale_factor"] = m.scale_factor;
    meta["truncate_fraction"] = m.truncate_fraction;
    meta["class"] = m.stone_class.code;
    meta["taxonomy"] = to_string(m.stone_class.taxonomy);
    meta["view"] = to_string(m.view);
    meta["seed"] = m.rng_seed;
    meta["epochs_done"] = m.epochs_done;
    meta["optimizer_steps"] = m.optimizer_steps;
    json losses = json::array();
    for (const auto& l : m.losses) losses.push_back({l.epoch, l.scale, l.loss});
    meta["losses"] = losses;
    meta["probe_losses"] = m.probe_losses;
    meta["best_probe_losses"] = m.best_probe_losses;

    nn::BlobFile f;
    f.magic = kMagic;
    f.version = kVersion;
    f.header = meta.dump();
    f.blobs.push_back(nn::flatten_state(*m.net));
    f.blobs.push_back(concat(m.adam_m));
    f.blobs.push_back(concat(m.adam_v));
    nn::write_blob_file(f, path);
}

DiffusionModelState load_checkpoint(const std::filesystem::path& path) {
    const nn::BlobFile f = nn::read_blob_file(path, kMagic);
    if (f.version != kVersion) throw IoError(path.string() + ": unsupported checkpoint version");
    const json meta = json::parse(f.header);
    DiffusionModelState m;
    m.config = {meta["config"]["channels"], meta["config"]["depth"], meta["config"]["embed_dim"]};
    m.net = std::make_shared<Denoiser>(m.config, 0);
    if (f.blobs.size() != 3) throw IoError(path.string() + ": malformed checkpoint");
    nn::restore_state(*m.net, f.blobs[0]);
    m.beta_min = meta["schedule"]["beta_min"];
    m.beta_max = meta["schedule"]["beta_max"];
    m.schedule = make_schedule(meta["schedule"]["steps"], m.beta_min, m.beta_max);
    for (const auto& d : meta["pyramid"]) m.pyramid_meta.push_back({d[0], d[1]});
    m.scale_factor = meta["scale_factor"];
    m.truncate_fraction = meta["truncate_fraction"];
    const std::string code = meta["class"];
    const std::string tax = meta["taxonomy"];
    if (!code.empty()) m.stone_class = make_class(code, tax == "ENDO_FAMILY" ? Taxonomy::ENDO_FAMILY : Taxonomy::CCD_FAMILY);
    m.view = parse_view(meta["view"]);
    m.rng_seed = meta["seed"];
    m.epochs_done = meta["epochs_done"];
    m.optimizer_steps = meta["optimizer_steps"];
    for (const auto& l : meta["losses"]) m.losses.push_back({l[0], l[1], l[2]});
    m.probe_losses = meta["probe_losses"].get<std::vector<double>>();
    m.best_probe_losses = meta["best_probe_losses"].get<std::vector<double>>();
    if (!f.blobs[1].empty()) {
        std::size_t off = 0;
        for (auto& [name, p] : nn::parameters(*m.net)) {
            const std::size_t n = p->value.numel();
            m.adam_m.emplace_back(f.blobs[1].begin() + off, f.blobs[1].begin() + off + n);
            m.adam_v.emplace_back(f.blobs[2].begin() + off, f.blobs[2].begin() + off + n);
            off += n;
        }
    }
    return m;
}

void write_loss_log(const std::vector<LossRecord>& losses, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    for (const auto& l : losses) out << json{{"epoch", l.epoch}, {"scale", l.scale}, {"loss", l.loss}}.dump() << "\n";
}

// Sampling ---------------------------------------------------------------------

EpsPredictor predictor_for(DiffusionModelState& model) {
    auto net = model.net;
    return [net](const Tensor& x, const Tensor& cond, const std::vector<int>& t, int scale) {
        return net->predict(x, cond, t, scale, false);
    };
}

Image sample(DiffusionModelState& model, Size out_size, Rng& rng, double eta) {
    return sample(model, out_size, rng, predictor_for(model), eta);
}

Image sample(DiffusionModelState& model, Size out_size, Rng& rng, const EpsPredictor& predictor, double eta) {
    if (model.levels() < 1) throw ParameterError("model has no pyramid geometry");
    const auto dims = pyramid_dims_with_levels(out_size, model.scale_factor, model.levels());
    if (dims.front().width < 4 || dims.front().height < 4)
        throw ParameterError("output size " + format_size(out_size) + " too small for a " +
                             std::to_string(model.levels()) + "-level pyramid");
    const int T = model.schedule.steps();
    Tensor x({1, 3, dims[0].height, dims[0].width});
    for (auto& v : x.data) v = static_cast<float>(rng.normal());
    Tensor zero(x.shape);
    x = reverse_diffuse(std::move(x), T - 1, zero, 0, model.schedule, predictor, eta, rng);
    const int t_start = model.truncated_start();
    for (int s = 1; s < model.levels(); ++s) {
        Tensor up = resize_tensor(x, dims[s]);
        for (auto& v : up.data) v = std::clamp(v, -1.f, 1.f);
        Tensor noisy = forward_diffuse(up, t_start, model.schedule, rng).x_t;
        x = reverse_diffuse(std::move(noisy), t_start, up, s, model.schedule, predictor, eta, rng);
    }
    return to_image(x);
}

DatasetManifest generate_dataset(std::vector<DiffusionModelState>& models, int n_per_model, std::uint64_t seed,
                                 const std::filesystem::path& out_dir, std::optional<Size> out_size) {
    if (n_per_model < 1) throw ParameterError("n_per_model must be >= 1");
    DatasetManifest m;
    m.name = "synthetic";
    std::filesystem::create_directories(out_dir / "images");
    for (std::size_t k = 0; k < models.size(); ++k) {
        auto& model = models[k];
        const Size size = out_size ? *out_size : model.pyramid_meta.back();
        for (int i = 0; i < n_per_model; ++i) {
            Rng rng(mix_seed(seed, k * 1000003ULL + static_cast<std::uint64_t>(i)));
            const Image img = sample(model, size, rng);
            std::ostringstream id;
            id << "syn_" << model.stone_class.code << "_" << to_string(model.view) << "_" << std::setw(3)
               << std::setfill('0') << i;
            ImageRecord r;
            r.id = id.str();
            r.path = out_dir / "images" / (r.id + ".png");
            r.stone_class = make_class(model.stone_class.code, Taxonomy::CCD_FAMILY);
            r.view = model.view;
            r.width = size.width;
            r.height = size.height;
            r.source = Source::SYNTHETIC;
            try {
                save_png(img, r.path);
            } catch (const IoError& e) {
                std::string done;
                for (const auto& rec : m.records) done += " " + rec.id;
                throw IoError(std::string(e.what()) + "; completed records:" + (done.empty() ? " none" : done));
            }
            m.records.push_back(std::move(r));
        }
    }
    save_manifest(m, out_dir / "manifest.txt");
    return m;
}

} // namespace kstone::diffusion
