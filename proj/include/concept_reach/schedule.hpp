#pragma once

// DDPM noise schedule: linear betas, cumulative alpha products, the forward
// noising map x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "tensor.hpp"

namespace concept_reach {

struct NoiseSchedule {
    int T = 1000;
    std::vector<real> betas;       // beta_1 .. beta_T, index t-1
    std::vector<real> alphas_bar;  // abar_1 .. abar_T

    static NoiseSchedule linear(int T = 1000, real beta_start = real(1e-4), real beta_end = real(0.02)) {
        if (T < 1) throw std::invalid_argument("NoiseSchedule: T must be >= 1");
        NoiseSchedule s;
        s.T = T;
        s.betas.resize(size_t(T));
        s.alphas_bar.resize(size_t(T));
        real abar = 1;
        for (int t = 0; t < T; ++t) {
            real beta = T == 1 ? beta_start
                               : beta_start + (beta_end - beta_start) * real(t) / real(T - 1);
            s.betas[size_t(t)] = beta;
            abar *= (real(1) - beta);
            s.alphas_bar[size_t(t)] = abar;
        }
        return s;
    }

    real beta(int t) const {  // t in [1, T]
        if (t < 1 || t > T) throw std::out_of_range("NoiseSchedule::beta: t out of [1, T]");
        return betas[size_t(t - 1)];
    }
    real abar(int t) const {
        if (t < 1 || t > T) throw std::out_of_range("NoiseSchedule::abar: t out of [1, T]");
        return alphas_bar[size_t(t - 1)];
    }
};

inline Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    if (!x0.same_shape(eps))
        throw std::invalid_argument("forward_noise: x0 and eps shapes differ");
    real abar = sched.abar(t);
    real a = std::sqrt(abar), b = std::sqrt(real(1) - abar);
    Tensor xt(x0.shape);
    for (size_t i = 0; i < x0.size(); ++i) xt[i] = a * x0[i] + b * eps[i];
    return xt;
}

}  // namespace concept_reach
