// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "naslora/tensor.hpp"

namespace naslora {

namespace detail {

inline double relative_gap(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

inline double checked_value(const Tensor& t) {
    const double v = t.item();
    if (!std::isfinite(v)) throw NumericError("grad_check: function is non-finite at a perturbed point");
    return v;
}

}  // namespace detail

/// Max over coordinates of |analytic - central difference| / max(1e-8, |analytic| + |numeric|).
/// `f` must be deterministic and return a one-element tensor.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double eps = 1e-5) {
    Tensor x = point.clone(true);
    std::vector<double> analytic;
    {
        GradTape tape;
        GradTape::Scope scope(tape);
        Tensor y = f(x);
        if (y.numel() != 1) throw TapeError("grad_check: f must be scalar-valued");
        if (y.requires_grad()) {
            tape.backward(y);
        }
        analytic.assign(x.numel(), 0.0);
        if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    }
    double worst = 0.0;
    std::vector<double> buf(point.data().begin(), point.data().end());
    for (std::size_t i = 0; i < buf.size(); ++i) {
        const double orig = buf[i];
        buf[i] = orig + eps;
        const double fp = detail::checked_value(f(Tensor(point.shape(), buf)));
        buf[i] = orig - eps;
        const double fm = detail::checked_value(f(Tensor(point.shape(), buf)));
        buf[i] = orig;
        const double numeric = (fp - fm) / (2.0 * eps);
        worst = std::max(worst, detail::relative_gap(analytic[i], numeric));
    }
    return worst;
}

/// A single coordinate of a parameter tensor.
struct ParamCoord {
    Tensor param;
    std::size_t index;
};

/// Same statistic as grad_check, evaluated on selected coordinates of live parameters.
/// `loss` rebuilds the graph from the current parameter values on every call.
/// Parameter values are restored before returning.
inline double grad_check_params(const std::function<Tensor()>& loss, std::vector<ParamCoord> coords,
                                double eps = 1e-5, std::vector<double>* per_coord = nullptr) {
    std::vector<double> analytic(coords.size(), 0.0);
    {
        for (auto& c : coords) c.param.zero_grad();
        GradTape tape;
        GradTape::Scope scope(tape);
        Tensor y = loss();
        tape.backward(y);
        for (std::size_t k = 0; k < coords.size(); ++k) {
            if (coords[k].param.has_grad()) analytic[k] = coords[k].param.grad()[coords[k].index];
        }
    }
    double worst = 0.0;
    for (std::size_t k = 0; k < coords.size(); ++k) {
        auto data = coords[k].param.mutable_data();
        const double orig = data[coords[k].index];
        data[coords[k].index] = orig + eps;
        const double fp = detail::checked_value(loss());
        data[coords[k].index] = orig - eps;
        const double fm = detail::checked_value(loss());
        data[coords[k].index] = orig;
        const double err = detail::relative_gap(analytic[k], (fp - fm) / (2.0 * eps));
        if (per_coord) per_coord->push_back(err);
        worst = std::max(worst, err);
    }
    for (auto& c : coords) c.param.zero_grad();
    return worst;
}

}  // namespace naslora
