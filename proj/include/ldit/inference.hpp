#pragma once

// Conditional sampling and the two prediction estimators: latent-space
// averaging (average m sampled latents, decode once) and image-space
// averaging (decode every sample, average the images).

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

#include "ldit/controlnet.hpp"
#include "ldit/errors.hpp"
#include "ldit/rng.hpp"
#include "ldit/schedule.hpp"
#include "ldit/synthdata.hpp"
#include "ldit/tensor.hpp"
#include "ldit/unet.hpp"
#include "ldit/vae.hpp"

namespace ldit {

// Everything needed to translate a source volume: both autoencoders (the
// target decoder is the one that was fine-tuned during conditioning), the
// frozen denoiser, the conditioning network wired to it, the noise schedule,
// the deterministic-sampler step count, and the intensity statistics that map
// between raw and standardized units. A decoder-invocation counter backs the
// "decode exactly once" contract of latent-space averaging.
//
// The two override hooks substitute closed-form oracles for the decoder or
// the eps-prediction network; production code leaves them empty.
struct ModelBundle {
    VAE<float> source_vae;
    VAE<float> target_vae;
    UNet<float> denoiser;
    ControlNet<float> controlnet;
    NoiseSchedule schedule;
    int steps = 50;
    NormStats source_norm{0.0, 1.0, true};
    NormStats target_norm{0.0, 1.0, true};
    std::int64_t decoder_calls = 0;

    std::function<Tensor<float>(const Tensor<float>&)> decode_override;
    std::function<Tensor<float>(const Tensor<float>&)> encode_override;
    std::function<Tensor<float>(const Tensor<float>&, const Tensor<float>&, int)> eps_override;

    void check() const {
        if (steps < 1) throw config_error("inference: step count must be >= 1");
        if (schedule.T < 1) throw config_error("inference: schedule not initialized");
    }

    Tensor<float> predict_eps(const Tensor<float>& z_t, const Tensor<float>& z_c, int t) {
        if (eps_override) return eps_override(z_t, z_c, t);
        return controlnet.forward_value(z_t, z_c, t);
    }

    Tensor<float> decode(const Tensor<float>& z) {
        ++decoder_calls;
        if (decode_override) return decode_override(z);
        return target_vae.decode_value(z);
    }

    // Conditioning latent: the source posterior mean, so that the only
    // randomness in a translation is the seeded initial-noise draw.
    Tensor<float> encode_condition(const Tensor<float>& x_standardized) {
        if (encode_override) return encode_override(x_standardized);
        return source_vae.posterior(x_standardized).mean;
    }
};

// One draw from the learned conditional: seeded Gaussian initial noise
// followed by the deterministic reverse chain over `bundle.steps` steps.
inline Tensor<float> sample_latent(ModelBundle& bundle, const Tensor<float>& z_x,
                                   std::uint64_t seed) {
    bundle.check();
    Rng rng(mix_seed(seed, 0x1A7E));
    Tensor<float> z = randn<float>(z_x.shape, rng);
    const std::vector<int> times = ddim_times(bundle.schedule.T, bundle.steps);
    for (std::size_t i = 0; i + 1 < times.size(); ++i) {
        const int t = times[i];
        const int t_prev = times[i + 1];
        const Tensor<float> eps = bundle.predict_eps(z, z_x, t);
        z = ddim_step(bundle.schedule, z, eps, t, t_prev);
    }
    return z;
}

namespace detail {

inline Tensor<float> standardize_input(const ModelBundle& bundle, const Tensor<float>& x_raw) {
    return normalize(x_raw, bundle.source_norm);
}

inline Tensor<float> to_raw_output(const ModelBundle& bundle, const Tensor<float>& y_std) {
    return denormalize(y_std, bundle.target_norm);
}

}  // namespace detail

// Latent-space averaging: draw m latents with per-sample seeds seed+1..seed+m,
// average them in fixed index order, decode the mean once, return the
// prediction in raw intensity units.
inline Tensor<float> las_estimate(ModelBundle& bundle, const Tensor<float>& x_raw, int m,
                                  std::uint64_t seed) {
    if (m < 1) throw std::invalid_argument("las_estimate: m must be >= 1");
    const Tensor<float> z_c = bundle.encode_condition(detail::standardize_input(bundle, x_raw));
    Tensor<float> acc;
    for (int j = 1; j <= m; ++j) {
        Tensor<float> z = sample_latent(bundle, z_c, seed + static_cast<std::uint64_t>(j));
        if (j == 1) {
            acc = std::move(z);
        } else {
            acc.data += z.data;
        }
    }
    acc.data /= static_cast<float>(m);
    return detail::to_raw_output(bundle, bundle.decode(acc));
}

// Image-space averaging over the identical latent draws: decode every sample
// (N decoder calls), average the decoded images in fixed index order.
inline Tensor<float> unbiased_estimate(ModelBundle& bundle, const Tensor<float>& x_raw, int n,
                                       std::uint64_t seed) {
    if (n < 1) throw std::invalid_argument("unbiased_estimate: N must be >= 1");
    const Tensor<float> z_c = bundle.encode_condition(detail::standardize_input(bundle, x_raw));
    Tensor<float> acc;
    for (int j = 1; j <= n; ++j) {
        Tensor<float> z = sample_latent(bundle, z_c, seed + static_cast<std::uint64_t>(j));
        Tensor<float> y = bundle.decode(z);
        if (j == 1) {
            acc = std::move(y);
        } else {
            acc.data += y.data;
        }
    }
    acc.data /= static_cast<float>(n);
    return detail::to_raw_output(bundle, acc);
}

}  // namespace ldit
