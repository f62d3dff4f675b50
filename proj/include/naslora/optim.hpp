// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "naslora/tensor.hpp"

namespace naslora {

struct AdamWConfig {
    double lr = 1e-4;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adaptive-moment optimizer with decoupled weight decay, applied before the moment step.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (const Tensor& p : params_) {
            m_.push_back(Tensor::zeros(p.shape()));
            v_.push_back(Tensor::zeros(p.shape()));
        }
    }

    const AdamWConfig& config() const { return cfg_; }
    std::uint64_t steps() const { return step_; }
    const std::vector<Tensor>& params() const { return params_; }
    const std::vector<Tensor>& first_moments() const { return m_; }
    const std::vector<Tensor>& second_moments() const { return v_; }
    std::vector<Tensor>& first_moments() { return m_; }
    std::vector<Tensor>& second_moments() { return v_; }
    void set_steps(std::uint64_t s) { step_ = s; }

    /// Parameters without an adjoint are treated as having a zero gradient.
    void step() {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            for (double g : params_[i].grad()) {
                if (!std::isfinite(g)) {
                    throw NumericError("AdamW: non-finite gradient in parameter " + std::to_string(i) + " of shape " +
                                       shape_str(params_[i].shape()));
                }
            }
        }
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto p = params_[i].mutable_data();
            const auto g = params_[i].grad();
            auto m = m_[i].mutable_data();
            auto v = v_[i].mutable_data();
            for (std::size_t j = 0; j < p.size(); ++j) {
                const double gj = g.empty() ? 0.0 : g[j];
                p[j] -= cfg_.lr * cfg_.weight_decay * p[j];
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
                p[j] -= cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
            }
        }
    }

    void zero_grad() {
        for (Tensor& p : params_) p.zero_grad();
    }

private:
    std::vector<Tensor> params_;
    AdamWConfig cfg_;
    std::vector<Tensor> m_, v_;
    std::uint64_t step_ = 0;
};

}  // namespace naslora
