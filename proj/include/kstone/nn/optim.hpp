#pragma once

#include "kstone/nn/layers.hpp"

#include <vector>

namespace kstone::nn {

class Sgd {
public:
    Sgd(std::vector<ParamRef> params, double lr, double momentum, double weight_decay = 0.0);
    void step();
    void zero_grad();
    double lr;
    double momentum;
    double weight_decay;
    std::vector<ParamRef> params;
    std::vector<std::vector<float>> velocity;
};

class Adam {
public:
    Adam(std::vector<ParamRef> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    void step();
    void zero_grad();
    double lr, beta1, beta2, eps;
    long long t = 0;
    std::vector<ParamRef> params;
    std::vector<std::vector<float>> m, v;
};

/// Multiplies all gradients so their global L2 norm is at most `max_norm`.
double clip_grad_norm(const std::vector<ParamRef>& params, double max_norm);

} // namespace kstone::nn
