#pragma once

#include "kstone/nn/tensor.hpp"
#include "kstone/rng.hpp"

#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace kstone::nn {

struct Parameter {
    Tensor value;
    Tensor grad;

    explicit Parameter(std::vector<int> shape = {}) : value(shape), grad(shape) {}
    void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.f); }
};

using ParamRef = std::pair<std::string, Parameter*>;
using BufferRef = std::pair<std::string, Tensor*>;

/// Layer with explicit backward. `forward` caches what `backward` needs;
/// `backward` accumulates parameter gradients and returns the input gradient.
class Module {
public:
    virtual ~Module() = default;
    virtual Tensor forward(const Tensor& x, bool train) = 0;
    virtual Tensor backward(const Tensor& grad) = 0;
    virtual void collect(const std::string& /*prefix*/, std::vector<ParamRef>& /*params*/,
                         std::vector<BufferRef>& /*buffers*/) {}
};

std::vector<ParamRef> parameters(Module& m);
std::vector<BufferRef> buffers(Module& m);
void zero_grad(Module& m);

class Conv2d : public Module {
public:
    Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, bool bias, Rng& rng);
    Tensor forward(const Tensor& x, bool train) override;
    Tensor backward(const Tensor& grad) override;
    void collect(const std::string& prefix, std::vector<ParamRef>& params, std::vector<BufferRef>& buffers) override;

    Parameter weight; // [out, in*k*k]
    Parameter bias;   // [out] (empty when disabled)
    int in_ch, out_ch, kernel, stride, pad;

private:
    Tensor input_;
};

class Linear : public Module {
public:
    Linear(int in, int out, Rng& rng);
    Tensor forward(const Tensor& x, bool train) override;
    Tensor backward(const Tensor& grad) override;
    void collect(const std::string& prefix, std::vector<ParamRef>& params, std::vector<BufferRef>& buffers) override;

    Parameter weight; // [out, in]
    Parameter bias;   // [out]
    int in, out;

private:
    Tensor input_;
};

class ReLU : public Module {
public:
    Tensor forward(const Tensor& x, bool train) override;
    Tensor backward(const Tensor& grad) override;

private:
    Tensor output_;
};

class SiLU : public Module {
public:
    Tensor forward(const Tensor& x, bool train) override;
    Tensor backward(const Tensor& grad) override;

private:
    Tensor input_;
};

class MaxPool2d : public Module {
public:
    MaxPool2d(int kernel, int stride, int pad = 0) : kernel(kernel), stride(stride), pad(pad) {}
    Tensor forward(const Tensor& x, bool train) override;
    Tensor backward(const Tensor& grad) override;
    int kernel, stride, pad;

private:
    std::vector<int> in_shape_;
    std::vector<std::size_t> argmax_;
};

/// NCHW -> NC.
class GlobalAvgPool : public Module {
public:
    Tensor forward(const Tensor& x, bool train) override;
    Tensor backward(const Tensor& grad) override;

private:
    std::vector<int> in_shape_;
};

/// Batch normalization over NC or NCHW inputs (statistics per channel).
class BatchNorm : public Module {
public:
    explicit BatchNorm(int channels, float momentum = 0.1f, float eps = 1e-5f);
    Tensor forward(const Tensor& x, bool train) override;
    Tensor backward(const Tensor& grad) override;
    void collect(const std::string& prefix, std::vector<ParamRef>& params, std::vector<BufferRef>& buffers) override;

    Parameter gamma, beta;
    Tensor running_mean, running_var;
    int channels;
    float momentum, eps;

private:
    Tensor xhat_;
    std::vector<float> inv_std_;
    bool trained_batch_ = false;
};

class Dropout : public Module {
public:
    Dropout(float p, std::uint64_t seed) : p(p), rng_(seed) {}
    Tensor forward(const Tensor& x, bool train) override;
    Tensor backward(const Tensor& grad) override;
    void reseed(std::uint64_t seed) { rng_ = Rng(seed); }
    float p;

private:
    Rng rng_;
    std::vector<float> mask_;
};

class Sequential : public Module {
public:
    Sequential() = default;
    template <class M, class... Args>
    M& add(Args&&... args) {
        auto m = std::make_unique<M>(std::forward<Args>(args)...);
        M& ref = *m;
        layers.push_back(std::move(m));
        return ref;
    }
    void push(std::unique_ptr<Module> m) { layers.push_back(std::move(m)); }
    Tensor forward(const Tensor& x, bool train) override;
    Tensor backward(const Tensor& grad) override;
    void collect(const std::string& prefix, std::vector<ParamRef>& params, std::vector<BufferRef>& buffers) override;
    std::size_t size() const { return layers.size(); }

    std::vector<std::unique_ptr<Module>> layers;
};

/// Residual bottleneck block (1x1 -> 3x3 -> 1x1, expansion 4), stride on the 3x3.
class Bottleneck : public Module {
public:
    Bottleneck(int in_ch, int width, int stride, Rng& rng);
    Tensor forward(const Tensor& x, bool train) override;
    Tensor backward(const Tensor& grad) override;
    void collect(const std::string& prefix, std::vector<ParamRef>& params, std::vector<BufferRef>& buffers) override;

    static constexpr int expansion = 4;

private:
    Sequential main_;
    std::unique_ptr<Sequential> shortcut_;
    Tensor out_;
};

// Functional helpers -----------------------------------------------------------

/// Mean-squared error; writes d(loss)/d(pred) into `grad`.
double mse_loss(const Tensor& pred, const Tensor& target, Tensor& grad);

/// Softmax cross-entropy averaged over the batch. `logits` is [N, K].
double cross_entropy(const Tensor& logits, const std::vector<int>& labels, Tensor& grad);

std::vector<int> argmax_rows(const Tensor& logits);

/// Concatenate two NCHW tensors along channels.
Tensor concat_channels(const Tensor& a, const Tensor& b);

} // namespace kstone::nn
