#include "kstone/nn/optim.hpp"

#include <cmath>

namespace kstone::nn {

Sgd::Sgd(std::vector<ParamRef> ps, double lr, double momentum, double weight_decay)
    : lr(lr), momentum(momentum), weight_decay(weight_decay), params(std::move(ps)) {
    for (auto& [name, p] : params) velocity.emplace_back(p->value.numel(), 0.f);
}

void Sgd::step() {
    for (std::size_t k = 0; k < params.size(); ++k) {
        Parameter& p = *params[k].second;
        auto& vel = velocity[k];
        for (std::size_t i = 0; i < p.value.numel(); ++i) {
            const double g = p.grad.data[i] + weight_decay * p.value.data[i];
            vel[i] = static_cast<float>(momentum * vel[i] + g);
            p.value.data[i] -= static_cast<float>(lr * vel[i]);
        }
    }
}

void Sgd::zero_grad() {
    for (auto& [name, p] : params) p->zero_grad();
}

Adam::Adam(std::vector<ParamRef> ps, double lr, double beta1, double beta2, double eps)
    : lr(lr), beta1(beta1), beta2(beta2), eps(eps), params(std::move(ps)) {
    for (auto& [name, p] : params) {
        m.emplace_back(p->value.numel(), 0.f);
        v.emplace_back(p->value.numel(), 0.f);
    }
}

void Adam::step() {
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Parameter& p = *params[k].second;
        for (std::size_t i = 0; i < p.value.numel(); ++i) {
            const double g = p.grad.data[i];
            m[k][i] = static_cast<float>(beta1 * m[k][i] + (1.0 - beta1) * g);
            v[k][i] = static_cast<float>(beta2 * v[k][i] + (1.0 - beta2) * g * g);
            const double mh = m[k][i] / c1;
            const double vh = v[k][i] / c2;
            p.value.data[i] -= static_cast<float>(lr * mh / (std::sqrt(vh) + eps));
        }
    }
}

void Adam::zero_grad() {
    for (auto& [name, p] : params) p->zero_grad();
}

double clip_grad_norm(const std::vector<ParamRef>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, p] : params)
        for (float g : p->grad.data) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const float s = static_cast<float>(max_norm / norm);
        for (const auto& [name, p] : params)
            for (float& g : p->grad.data) g *= s;
    }
    return norm;
}

} // namespace kstone::nn
