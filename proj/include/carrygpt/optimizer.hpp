#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "carrygpt/nn.hpp"

namespace carrygpt {

// Linear 0 -> peak over the warmup, then cosine peak -> floor.
inline Real cosine_warmup_lr(std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps, Real peak,
                             Real floor) {
    if (warmup_steps >= total_steps) throw ConfigError("cosine_warmup_lr: warmup_steps must be < total_steps");
    if (step < 0) step = 0;
    if (warmup_steps > 0 && step < warmup_steps)
        return peak * static_cast<Real>(step) / static_cast<Real>(warmup_steps);
    if (step >= total_steps) return floor;
    const Real progress = static_cast<Real>(step - warmup_steps) / static_cast<Real>(total_steps - warmup_steps);
    return floor + (peak - floor) * Real(0.5) * (Real(1) + std::cos(Real(3.14159265358979323846) * progress));
}

struct AdamWConfig {
    Real beta1 = Real(0.9);
    Real beta2 = Real(0.95);
    Real eps = Real(1e-8);
    Real weight_decay = Real(0);
};

// Decoupled weight decay; bias-corrected moment estimates; update order is
// the parameter-store order, so trajectories are reproducible.
class AdamW {
public:
    AdamW(ParamStore& params, AdamWConfig cfg = {}) : params_(&params), cfg_(cfg) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(params[i].value.numel(), Real(0));
            v_[i].assign(params[i].value.numel(), Real(0));
        }
    }

    void step(Real lr) {
        ++t_;
        const Real bc1 = Real(1) - std::pow(cfg_.beta1, static_cast<Real>(t_));
        const Real bc2 = Real(1) - std::pow(cfg_.beta2, static_cast<Real>(t_));
        for (std::size_t pi = 0; pi < params_->size(); ++pi) {
            Param& p = (*params_)[pi];
            if (!p.trainable) continue;
            touched_.insert(p.name);
            auto& value = p.value.data();
            const auto& grad = p.value.grad();
            auto& m = m_[pi];
            auto& v = v_[pi];
            const Real decay = Real(1) - lr * cfg_.weight_decay;
            for (std::size_t i = 0; i < value.size(); ++i) {
                const Real g = grad[i];
                if (!std::isfinite(g)) throw OptimError("non-finite gradient in parameter " + p.name);
                m[i] = cfg_.beta1 * m[i] + (Real(1) - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (Real(1) - cfg_.beta2) * g * g;
                const Real m_hat = m[i] / bc1;
                const Real v_hat = v[i] / bc2;
                value[i] = value[i] * decay - lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
            }
        }
    }

    void zero_grad() { params_->zero_grad(); }

    std::int64_t steps_taken() const { return t_; }
    const std::set<std::string>& touched() const { return touched_; }
    const AdamWConfig& config() const { return cfg_; }

private:
    ParamStore* params_;
    AdamWConfig cfg_;
    std::int64_t t_ = 0;
    std::vector<std::vector<Real>> m_;
    std::vector<std::vector<Real>> v_;
    std::set<std::string> touched_;
};

} // namespace carrygpt
