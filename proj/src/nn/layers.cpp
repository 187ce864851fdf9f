#include "kstone/nn/layers.hpp"

#include "kstone/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

namespace kstone::nn {

namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

void init_uniform(Tensor& t, double bound, Rng& rng) {
    for (auto& v : t.data) v = static_cast<float>(rng.uniform(-bound, bound));
}

void require_rank(const Tensor& x, int rank, const char* who) {
    if (x.rank() != rank) throw DimensionError(std::string(who) + ": unexpected input rank");
}

void im2col(const float* img, int C, int H, int W, int k, int s, int p, int Ho, int Wo, float* col) {
    const std::size_t plane = static_cast<std::size_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                float* dst = col + (static_cast<std::size_t>(c * k + ki) * k + kj) * plane;
                const float* src = img + static_cast<std::size_t>(c) * H * W;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * s - p + ki;
                    float* drow = dst + static_cast<std::size_t>(oy) * Wo;
                    if (iy < 0 || iy >= H) {
                        std::fill(drow, drow + Wo, 0.f);
                        continue;
                    }
                    const float* srow = src + static_cast<std::size_t>(iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * s - p + kj;
                        drow[ox] = (ix >= 0 && ix < W) ? srow[ix] : 0.f;
                    }
                }
            }
}

void col2im(const float* col, int C, int H, int W, int k, int s, int p, int Ho, int Wo, float* img) {
    const std::size_t plane = static_cast<std::size_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                const float* src = col + (static_cast<std::size_t>(c * k + ki) * k + kj) * plane;
                float* dst = img + static_cast<std::size_t>(c) * H * W;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * s - p + ki;
                    if (iy < 0 || iy >= H) continue;
                    const float* srow = src + static_cast<std::size_t>(oy) * Wo;
                    float* drow = dst + static_cast<std::size_t>(iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * s - p + kj;
                        if (ix >= 0 && ix < W) drow[ix] += srow[ox];
                    }
                }
            }
}

} // namespace

std::vector<ParamRef> parameters(Module& m) {
    std::vector<ParamRef> p;
    std::vector<BufferRef> b;
    m.collect("", p, b);
    return p;
}

std::vector<BufferRef> buffers(Module& m) {
    std::vector<ParamRef> p;
    std::vector<BufferRef> b;
    m.collect("", p, b);
    return b;
}

void zero_grad(Module& m) {
    for (auto& [name, p] : parameters(m)) p->zero_grad();
}

// Conv2d -----------------------------------------------------------------------

Conv2d::Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, bool with_bias, Rng& rng)
    : weight({out_ch, in_ch * kernel * kernel}), bias(with_bias ? std::vector<int>{out_ch} : std::vector<int>{0}),
      in_ch(in_ch), out_ch(out_ch), kernel(kernel), stride(stride), pad(pad) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch * kernel * kernel));
    init_uniform(weight.value, bound, rng);
    init_uniform(bias.value, bound, rng);
}

void Conv2d::collect(const std::string& prefix, std::vector<ParamRef>& params, std::vector<BufferRef>&) {
    params.emplace_back(prefix + "weight", &weight);
    if (bias.value.numel() > 0) params.emplace_back(prefix + "bias", &bias);
}

Tensor Conv2d::forward(const Tensor& x, bool) {
    require_rank(x, 4, "Conv2d");
    if (x.dim(1) != in_ch) throw DimensionError("Conv2d: channel mismatch");
    input_ = x;
    const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    const int Ho = (H + 2 * pad - kernel) / stride + 1;
    const int Wo = (W + 2 * pad - kernel) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw DimensionError("Conv2d: input smaller than kernel");
    const int ckk = in_ch * kernel * kernel;
    const std::size_t plane = static_cast<std::size_t>(Ho) * Wo;
    Tensor out({N, out_ch, Ho, Wo});
    const bool direct = kernel == 1 && stride == 1 && pad == 0;
    FloatBuffer col(direct ? 0 : static_cast<std::size_t>(ckk) * plane);
    CMapM w(weight.value.ptr(), out_ch, ckk);
    for (int n = 0; n < N; ++n) {
        const float* xn = x.ptr() + static_cast<std::size_t>(n) * in_ch * H * W;
        if (!direct) im2col(xn, in_ch, H, W, kernel, stride, pad, Ho, Wo, col.data());
        CMapM c(direct ? xn : col.data(), ckk, static_cast<Eigen::Index>(plane));
        MapM o(out.ptr() + static_cast<std::size_t>(n) * out_ch * plane, out_ch, static_cast<Eigen::Index>(plane));
        o.noalias() = w * c;
        if (bias.value.numel() > 0)
            for (int oc = 0; oc < out_ch; ++oc) o.row(oc).array() += bias.value.data[oc];
    }
    return out;
}

Tensor Conv2d::backward(const Tensor& grad) {
    const Tensor& x = input_;
    const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    const int Ho = grad.dim(2), Wo = grad.dim(3);
    const int ckk = in_ch * kernel * kernel;
    const std::size_t plane = static_cast<std::size_t>(Ho) * Wo;
    const bool direct = kernel == 1 && stride == 1 && pad == 0;
    Tensor dx(x.shape);
    FloatBuffer col(direct ? 0 : static_cast<std::size_t>(ckk) * plane);
    FloatBuffer dcol(static_cast<std::size_t>(ckk) * plane);
    CMapM w(weight.value.ptr(), out_ch, ckk);
    MapM dw(weight.grad.ptr(), out_ch, ckk);
    for (int n = 0; n < N; ++n) {
        const float* xn = x.ptr() + static_cast<std::size_t>(n) * in_ch * H * W;
        if (!direct) im2col(xn, in_ch, H, W, kernel, stride, pad, Ho, Wo, col.data());
        CMapM c(direct ? xn : col.data(), ckk, static_cast<Eigen::Index>(plane));
        CMapM g(grad.ptr() + static_cast<std::size_t>(n) * out_ch * plane, out_ch, static_cast<Eigen::Index>(plane));
        dw.noalias() += g * c.transpose();
        if (bias.value.numel() > 0)
            for (int oc = 0; oc < out_ch; ++oc) bias.grad.data[oc] += g.row(oc).sum();
        float* dxn = dx.ptr() + static_cast<std::size_t>(n) * in_ch * H * W;
        if (direct) {
            MapM d(dxn, ckk, static_cast<Eigen::Index>(plane));
            d.noalias() = w.transpose() * g;
        } else {
            MapM d(dcol.data(), ckk, static_cast<Eigen::Index>(plane));
            d.noalias() = w.transpose() * g;
            col2im(dcol.data(), in_ch, H, W, kernel, stride, pad, Ho, Wo, dxn);
        }
    }
    return dx;
}

// Linear -----------------------------------------------------------------------

Linear::Linear(int in, int out, Rng& rng) : weight({out, in}), bias({out}), in(in), out(out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    init_uniform(weight.value, bound, rng);
    init_uniform(bias.value, bound, rng);
}

void Linear::collect(const std::string& prefix, std::vector<ParamRef>& params, std::vector<BufferRef>&) {
    params.emplace_back(prefix + "weight", &weight);
    params.emplace_back(prefix + "bias", &bias);
}

Tensor Linear::forward(const Tensor& x, bool) {
    require_rank(x, 2, "Linear");
    if (x.dim(1) != in) throw DimensionError("Linear: feature mismatch");
    input_ = x;
    const int N = x.dim(0);
    Tensor y({N, out});
    CMapM xm(x.ptr(), N, in);
    CMapM w(weight.value.ptr(), out, in);
    MapM ym(y.ptr(), N, out);
    ym.noalias() = xm * w.transpose();
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < out; ++o) ym(n, o) += bias.value.data[o];
    return y;
}

Tensor Linear::backward(const Tensor& grad) {
    const int N = input_.dim(0);
    CMapM g(grad.ptr(), N, out);
    CMapM xm(input_.ptr(), N, in);
    CMapM w(weight.value.ptr(), out, in);
    MapM dw(weight.grad.ptr(), out, in);
    dw.noalias() += g.transpose() * xm;
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < out; ++o) bias.grad.data[o] += g(n, o);
    Tensor dx({N, in});
    MapM d(dx.ptr(), N, in);
    d.noalias() = g * w;
    return dx;
}

// Activations ------------------------------------------------------------------

Tensor ReLU::forward(const Tensor& x, bool) {
    output_ = x;
    for (auto& v : output_.data) v = v > 0.f ? v : 0.f;
    return output_;
}

Tensor ReLU::backward(const Tensor& grad) {
    Tensor dx = grad;
    for (std::size_t i = 0; i < dx.numel(); ++i)
        if (output_.data[i] <= 0.f) dx.data[i] = 0.f;
    return dx;
}

Tensor SiLU::forward(const Tensor& x, bool) {
    input_ = x;
    Tensor y = x;
    for (auto& v : y.data) v = v / (1.f + std::exp(-v));
    return y;
}

Tensor SiLU::backward(const Tensor& grad) {
    Tensor dx = grad;
    for (std::size_t i = 0; i < dx.numel(); ++i) {
        const float v = input_.data[i];
        const float s = 1.f / (1.f + std::exp(-v));
        dx.data[i] *= s * (1.f + v * (1.f - s));
    }
    return dx;
}

// Pooling ----------------------------------------------------------------------

Tensor MaxPool2d::forward(const Tensor& x, bool) {
    require_rank(x, 4, "MaxPool2d");
    in_shape_ = x.shape;
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Ho = (H + 2 * pad - kernel) / stride + 1;
    const int Wo = (W + 2 * pad - kernel) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw DimensionError("MaxPool2d: input smaller than window");
    Tensor y({N, C, Ho, Wo});
    argmax_.assign(y.numel(), 0);
    std::size_t o = 0;
    for (int nc = 0; nc < N * C; ++nc) {
        const std::size_t base = static_cast<std::size_t>(nc) * H * W;
        for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox, ++o) {
                float best = -std::numeric_limits<float>::infinity();
                std::size_t best_i = base;
                bool found = false;
                for (int ky = 0; ky < kernel; ++ky) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (int kx = 0; kx < kernel; ++kx) {
                        const int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= W) continue;
                        const std::size_t i = base + static_cast<std::size_t>(iy) * W + ix;
                        if (!found || x.data[i] > best) {
                            best = x.data[i];
                            best_i = i;
                            found = true;
                        }
                    }
                }
                y.data[o] = best;
                argmax_[o] = best_i;
            }
    }
    return y;
}

Tensor MaxPool2d::backward(const Tensor& grad) {
    Tensor dx(in_shape_);
    for (std::size_t o = 0; o < grad.numel(); ++o) dx.data[argmax_[o]] += grad.data[o];
    return dx;
}

Tensor GlobalAvgPool::forward(const Tensor& x, bool) {
    require_rank(x, 4, "GlobalAvgPool");
    in_shape_ = x.shape;
    const int N = x.dim(0), C = x.dim(1);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    Tensor y({N, C});
    for (int nc = 0; nc < N * C; ++nc) {
        double acc = 0.0;
        const float* p = x.ptr() + nc * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
        y.data[nc] = static_cast<float>(acc / plane);
    }
    return y;
}

Tensor GlobalAvgPool::backward(const Tensor& grad) {
    Tensor dx(in_shape_);
    const std::size_t plane = static_cast<std::size_t>(in_shape_[2]) * in_shape_[3];
    const float inv = 1.f / static_cast<float>(plane);
    for (std::size_t nc = 0; nc < grad.numel(); ++nc) {
        float* p = dx.ptr() + nc * plane;
        std::fill(p, p + plane, grad.data[nc] * inv);
    }
    return dx;
}

// BatchNorm --------------------------------------------------------------------

BatchNorm::BatchNorm(int ch, float momentum, float eps)
    : gamma({ch}), beta({ch}), running_mean({ch}, 0.f), running_var({ch}, 1.f), channels(ch), momentum(momentum),
      eps(eps) {
    std::fill(gamma.value.data.begin(), gamma.value.data.end(), 1.f);
}

void BatchNorm::collect(const std::string& prefix, std::vector<ParamRef>& params, std::vector<BufferRef>& bufs) {
    params.emplace_back(prefix + "gamma", &gamma);
    params.emplace_back(prefix + "beta", &beta);
    bufs.emplace_back(prefix + "running_mean", &running_mean);
    bufs.emplace_back(prefix + "running_var", &running_var);
}

Tensor BatchNorm::forward(const Tensor& x, bool train) {
    if ((x.rank() != 2 && x.rank() != 4) || x.dim(1) != channels) throw DimensionError("BatchNorm: bad input shape");
    const int N = x.dim(0);
    const std::size_t inner = x.rank() == 4 ? static_cast<std::size_t>(x.dim(2)) * x.dim(3) : 1;
    const std::size_t m = static_cast<std::size_t>(N) * inner;
    Tensor y(x.shape);
    xhat_ = Tensor(x.shape);
    inv_std_.assign(channels, 0.f);
    trained_batch_ = train;
    for (int c = 0; c < channels; ++c) {
        double mean, var;
        if (train) {
            double s = 0.0, ss = 0.0;
            for (int n = 0; n < N; ++n) {
                const float* p = x.ptr() + (static_cast<std::size_t>(n) * channels + c) * inner;
                for (std::size_t i = 0; i < inner; ++i) s += p[i];
            }
            mean = s / m;
            for (int n = 0; n < N; ++n) {
                const float* p = x.ptr() + (static_cast<std::size_t>(n) * channels + c) * inner;
                for (std::size_t i = 0; i < inner; ++i) ss += (p[i] - mean) * (p[i] - mean);
            }
            var = ss / m;
            const double unbiased = m > 1 ? ss / (m - 1) : var;
            running_mean.data[c] = static_cast<float>((1.0 - momentum) * running_mean.data[c] + momentum * mean);
            running_var.data[c] = static_cast<float>((1.0 - momentum) * running_var.data[c] + momentum * unbiased);
        } else {
            mean = running_mean.data[c];
            var = running_var.data[c];
        }
        const float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
        inv_std_[c] = inv;
        const float g = gamma.value.data[c], b = beta.value.data[c];
        for (int n = 0; n < N; ++n) {
            const std::size_t off = (static_cast<std::size_t>(n) * channels + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
                const float xh = (x.data[off + i] - static_cast<float>(mean)) * inv;
                xhat_.data[off + i] = xh;
                y.data[off + i] = g * xh + b;
            }
        }
    }
    return y;
}

Tensor BatchNorm::backward(const Tensor& grad) {
    const int N = grad.dim(0);
    const std::size_t inner = grad.rank() == 4 ? static_cast<std::size_t>(grad.dim(2)) * grad.dim(3) : 1;
    const double m = static_cast<double>(N) * inner;
    Tensor dx(grad.shape);
    for (int c = 0; c < channels; ++c) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (int n = 0; n < N; ++n) {
            const std::size_t off = (static_cast<std::size_t>(n) * channels + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
                sum_g += grad.data[off + i];
                sum_gx += grad.data[off + i] * xhat_.data[off + i];
            }
        }
        gamma.grad.data[c] += static_cast<float>(sum_gx);
        beta.grad.data[c] += static_cast<float>(sum_g);
        const double g = gamma.value.data[c];
        const double inv = inv_std_[c];
        for (int n = 0; n < N; ++n) {
            const std::size_t off = (static_cast<std::size_t>(n) * channels + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
                if (trained_batch_) {
                    dx.data[off + i] = static_cast<float>(
                        g * inv / m * (m * grad.data[off + i] - sum_g - xhat_.data[off + i] * sum_gx));
                } else {
                    dx.data[off + i] = static_cast<float>(g * inv * grad.data[off + i]);
                }
            }
        }
    }
    return dx;
}

// Dropout ----------------------------------------------------------------------

Tensor Dropout::forward(const Tensor& x, bool train) {
    if (!train || p <= 0.f) {
        mask_.assign(x.numel(), 1.f);
        return x;
    }
    mask_.resize(x.numel());
    const float keep = 1.f / (1.f - p);
    Tensor y = x;
    for (std::size_t i = 0; i < y.numel(); ++i) {
        mask_[i] = rng_.uniform() < p ? 0.f : keep;
        y.data[i] *= mask_[i];
    }
    return y;
}

Tensor Dropout::backward(const Tensor& grad) {
    Tensor dx = grad;
    for (std::size_t i = 0; i < dx.numel(); ++i) dx.data[i] *= mask_[i];
    return dx;
}

// Sequential -------------------------------------------------------------------

Tensor Sequential::forward(const Tensor& x, bool train) {
    Tensor h = x;
    for (auto& l : layers) h = l->forward(h, train);
    return h;
}

Tensor Sequential::backward(const Tensor& grad) {
    Tensor g = grad;
    for (auto it = layers.rbegin(); it != layers.rend(); ++it) g = (*it)->backward(g);
    return g;
}

void Sequential::collect(const std::string& prefix, std::vector<ParamRef>& params, std::vector<BufferRef>& bufs) {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i]->collect(prefix + std::to_string(i) + ".", params, bufs);
}

// Bottleneck -------------------------------------------------------------------

Bottleneck::Bottleneck(int in_ch, int width, int stride, Rng& rng) {
    const int out_ch = width * expansion;
    main_.add<Conv2d>(in_ch, width, 1, 1, 0, false, rng);
    main_.add<BatchNorm>(width);
    main_.add<ReLU>();
    main_.add<Conv2d>(width, width, 3, stride, 1, false, rng);
    main_.add<BatchNorm>(width);
    main_.add<ReLU>();
    main_.add<Conv2d>(width, out_ch, 1, 1, 0, false, rng);
    main_.add<BatchNorm>(out_ch);
    if (stride != 1 || in_ch != out_ch) {
        shortcut_ = std::make_unique<Sequential>();
        shortcut_->add<Conv2d>(in_ch, out_ch, 1, stride, 0, false, rng);
        shortcut_->add<BatchNorm>(out_ch);
    }
}

void Bottleneck::collect(const std::string& prefix, std::vector<ParamRef>& params, std::vector<BufferRef>& bufs) {
    main_.collect(prefix + "main.", params, bufs);
    if (shortcut_) shortcut_->collect(prefix + "shortcut.", params, bufs);
}

Tensor Bottleneck::forward(const Tensor& x, bool train) {
    Tensor y = main_.forward(x, train);
    const Tensor s = shortcut_ ? shortcut_->forward(x, train) : x;
    for (std::size_t i = 0; i < y.numel(); ++i) y.data[i] = std::max(0.f, y.data[i] + s.data[i]);
    out_ = y;
    return y;
}

Tensor Bottleneck::backward(const Tensor& grad) {
    Tensor g = grad;
    for (std::size_t i = 0; i < g.numel(); ++i)
        if (out_.data[i] <= 0.f) g.data[i] = 0.f;
    Tensor dx = main_.backward(g);
    const Tensor ds = shortcut_ ? shortcut_->backward(g) : g;
    for (std::size_t i = 0; i < dx.numel(); ++i) dx.data[i] += ds.data[i];
    return dx;
}

// Functional -------------------------------------------------------------------

double mse_loss(const Tensor& pred, const Tensor& target, Tensor& grad) {
    if (pred.shape != target.shape) throw DimensionError("mse_loss: shape mismatch");
    grad = Tensor(pred.shape);
    double acc = 0.0;
    const double n = static_cast<double>(pred.numel());
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const double d = static_cast<double>(pred.data[i]) - target.data[i];
        acc += d * d;
        grad.data[i] = static_cast<float>(2.0 * d / n);
    }
    return acc / n;
}

double cross_entropy(const Tensor& logits, const std::vector<int>& labels, Tensor& grad) {
    const int N = logits.dim(0), K = logits.dim(1);
    if (static_cast<int>(labels.size()) != N) throw DimensionError("cross_entropy: label count mismatch");
    grad = Tensor(logits.shape);
    double loss = 0.0;
    for (int n = 0; n < N; ++n) {
        const float* z = logits.ptr() + static_cast<std::size_t>(n) * K;
        const float mx = *std::max_element(z, z + K);
        double denom = 0.0;
        for (int k = 0; k < K; ++k) denom += std::exp(static_cast<double>(z[k] - mx));
        const int y = labels[n];
        if (y < 0 || y >= K) throw IndexError("cross_entropy: label out of range");
        loss += -(static_cast<double>(z[y] - mx) - std::log(denom));
        for (int k = 0; k < K; ++k) {
            const double p = std::exp(static_cast<double>(z[k] - mx)) / denom;
            grad.data[static_cast<std::size_t>(n) * K + k] = static_cast<float>((p - (k == y ? 1.0 : 0.0)) / N);
        }
    }
    return loss / N;
}

std::vector<int> argmax_rows(const Tensor& logits) {
    const int N = logits.dim(0), K = logits.dim(1);
    std::vector<int> out(N);
    for (int n = 0; n < N; ++n) {
        const float* z = logits.ptr() + static_cast<std::size_t>(n) * K;
        out[n] = static_cast<int>(std::max_element(z, z + K) - z);
    }
    return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw DimensionError("concat_channels: shape mismatch");
    const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
    const std::size_t plane = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
    Tensor out({N, Ca + Cb, a.dim(2), a.dim(3)});
    for (int n = 0; n < N; ++n) {
        std::copy_n(a.ptr() + n * Ca * plane, Ca * plane, out.ptr() + n * (Ca + Cb) * plane);
        std::copy_n(b.ptr() + n * Cb * plane, Cb * plane, out.ptr() + (n * (Ca + Cb) + Ca) * plane);
    }
    return out;
}

} // namespace kstone::nn
