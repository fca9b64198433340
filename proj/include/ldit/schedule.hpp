#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "ldit/errors.hpp"
#include "ldit/tensor.hpp"

namespace ldit {

// Variance schedule of the forward noising process. Index t runs 1..T for
// betas; alpha_bar is the running product of (1 - beta) with alpha_bar[0] = 1,
// so alpha_bar[t] is usable for every timestep including the identity t = 0.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;      // beta[0] unused, beta[1..T]
    std::vector<double> alpha_bar; // alpha_bar[0..T]

    double sqrt_ab(int t) const { return std::sqrt(alpha_bar[static_cast<std::size_t>(t)]); }
    double sqrt_one_minus_ab(int t) const {
        return std::sqrt(1.0 - alpha_bar[static_cast<std::size_t>(t)]);
    }
};

inline NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw config_error("noise schedule: T must be >= 1, got " + std::to_string(T));
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || !(beta_start <= beta_end)) {
        throw config_error("noise schedule: need 0 < beta_start <= beta_end < 1, got [" +
                           std::to_string(beta_start) + ", " + std::to_string(beta_end) + "]");
    }
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(static_cast<std::size_t>(T) + 1, 0.0);
    s.alpha_bar.resize(static_cast<std::size_t>(T) + 1, 1.0);
    for (int t = 1; t <= T; ++t) {
        double frac = (T == 1) ? 0.0 : static_cast<double>(t - 1) / (T - 1);
        s.beta[static_cast<std::size_t>(t)] = beta_start + (beta_end - beta_start) * frac;
        s.alpha_bar[static_cast<std::size_t>(t)] =
            s.alpha_bar[static_cast<std::size_t>(t) - 1] * (1.0 - s.beta[static_cast<std::size_t>(t)]);
    }
    return s;
}

inline void check_timestep(const NoiseSchedule& s, int t, int lo, const char* what) {
    if (t < lo || t > s.T) {
        throw std::invalid_argument(std::string(what) + ": timestep " + std::to_string(t) +
                                    " outside [" + std::to_string(lo) + ", " + std::to_string(s.T) + "]");
    }
}

// Closed-form jump of the forward process: z_t = sqrt(ab_t) z0 + sqrt(1-ab_t) eps.
template <typename S>
Tensor<S> forward_diffuse(const NoiseSchedule& sched, const Tensor<S>& z0, int t,
                          const Tensor<S>& eps) {
    check_timestep(sched, t, 0, "forward_diffuse");
    require_same_shape(z0, eps, "forward_diffuse");
    Tensor<S> out(z0.shape);
    out.data = static_cast<S>(sched.sqrt_ab(t)) * z0.data +
               static_cast<S>(sched.sqrt_one_minus_ab(t)) * eps.data;
    return out;
}

// Invert the closed form given a noise estimate: z0_hat = (z_t - sqrt(1-ab_t) eps) / sqrt(ab_t).
template <typename S>
Tensor<S> recover_z0(const NoiseSchedule& sched, const Tensor<S>& z_t, const Tensor<S>& eps_hat,
                     int t) {
    check_timestep(sched, t, 1, "recover_z0");
    require_same_shape(z_t, eps_hat, "recover_z0");
    double sab = sched.sqrt_ab(t);
    if (!(sab > 0.0)) {
        throw std::domain_error("recover_z0: alpha_bar underflowed to 0 at t=" + std::to_string(t));
    }
    Tensor<S> out(z_t.shape);
    out.data = (z_t.data - static_cast<S>(sched.sqrt_one_minus_ab(t)) * eps_hat.data) *
               static_cast<S>(1.0 / sab);
    return out;
}

// One deterministic (eta = 0) sampler update from t to t_prev < t. At
// t_prev = 0 this returns the current z0 estimate exactly.
template <typename S>
Tensor<S> ddim_step(const NoiseSchedule& sched, const Tensor<S>& z_t, const Tensor<S>& eps_hat,
                    int t, int t_prev) {
    check_timestep(sched, t, 1, "ddim_step");
    if (t_prev < 0 || t_prev >= t) {
        throw std::invalid_argument("ddim_step: need 0 <= t_prev < t, got t_prev=" +
                                    std::to_string(t_prev) + " t=" + std::to_string(t));
    }
    Tensor<S> z0_hat = recover_z0(sched, z_t, eps_hat, t);
    Tensor<S> out(z_t.shape);
    out.data = static_cast<S>(sched.sqrt_ab(t_prev)) * z0_hat.data +
               static_cast<S>(sched.sqrt_one_minus_ab(t_prev)) * eps_hat.data;
    return out;
}

// Descending sampler timetable [T, ..., 0] with `steps` update intervals,
// evenly spaced by rounding. Requires 1 <= steps <= T.
inline std::vector<int> ddim_times(int T, int steps) {
    if (steps < 1 || steps > T) {
        throw config_error("sampler steps must be in [1, T], got steps=" + std::to_string(steps) +
                           " T=" + std::to_string(T));
    }
    std::vector<int> times(static_cast<std::size_t>(steps) + 1);
    for (int i = 0; i <= steps; ++i) {
        times[static_cast<std::size_t>(i)] =
            static_cast<int>(std::llround(static_cast<double>(T) * (steps - i) / steps));
    }
    return times;
}

} // namespace ldit
