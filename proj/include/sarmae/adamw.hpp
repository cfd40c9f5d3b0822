#pragma once

#include <map>
#include <string>

#include "sarmae/tensor.hpp"

namespace sarmae {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// AdamW with decoupled weight decay: the decay term is subtracted from the
// weights directly and never enters the moment estimates.
template <typename S>
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    const AdamWConfig& config() const { return cfg_; }
    AdamWConfig& config() { return cfg_; }
    std::int64_t step_count() const { return step_; }

    // One update over a named parameter set; gradients are read from each
    // tensor's accumulated grad buffer.
    void step(std::map<std::string, TensorT<S>>& params) {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (auto& [name, p] : params) {
            if (!p.requires_grad()) continue;
            auto& slot = moments_[name];
            if (slot.m.empty()) {
                slot.m.assign(p.raw().size(), S(0));
                slot.v.assign(p.raw().size(), S(0));
            }
            const auto& g = p.grad_data();
            auto& w = p.raw();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = g[i];
                slot.m[i] = static_cast<S>(cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * gi);
                slot.v[i] = static_cast<S>(cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * gi * gi);
                const double mhat = slot.m[i] / bc1;
                const double vhat = slot.v[i] / bc2;
                w[i] = static_cast<S>(w[i] - cfg_.lr * cfg_.weight_decay * w[i] -
                                      cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
            }
        }
    }

    void zero_grad(std::map<std::string, TensorT<S>>& params) {
        for (auto& [name, p] : params)
            if (p.requires_grad()) p.zero_grad();
    }

private:
    struct Moments {
        std::vector<S> m, v;
    };
    AdamWConfig cfg_;
    std::int64_t step_ = 0;
    std::map<std::string, Moments> moments_;
};

}  // namespace sarmae
