#pragma once

// The three training stages: modality autoencoders, the unconditional latent
// denoiser, and the conditioning network with the time-weighted image-space
// reconstruction term (and optional target-decoder fine-tuning).
//
// Graph-level loss builders are templated on the scalar so tests can run
// finite-difference checks in double; the stage runners train float models
// in place with deterministic, seed-derived data order and noise.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ldit/controlnet.hpp"
#include "ldit/errors.hpp"
#include "ldit/graph.hpp"
#include "ldit/optimizer.hpp"
#include "ldit/rng.hpp"
#include "ldit/schedule.hpp"
#include "ldit/tensor.hpp"
#include "ldit/unet.hpp"
#include "ldit/vae.hpp"

namespace ldit::training {

// Image-space weighting mode for the conditioning stage: off (pure eps
// matching), constant weight 1 (the ISL ablation), or the linear
// late-step-emphasis schedule.
enum class WislMode { off, constant_isl, linear_wisl };

inline const char* wisl_mode_name(WislMode m) {
    switch (m) {
        case WislMode::off: return "off";
        case WislMode::constant_isl: return "constant-isl";
        default: return "linear-wisl";
    }
}

inline WislMode wisl_mode_from_name(const std::string& s) {
    if (s == "off") return WislMode::off;
    if (s == "constant-isl") return WislMode::constant_isl;
    if (s == "linear-wisl") return WislMode::linear_wisl;
    throw config_error("unknown image-loss mode '" + s + "' (off | constant-isl | linear-wisl)");
}

struct TrainConfig {
    int epochs = 1;
    int batch_size = 4;
    double lr = 1e-4;
    double kl_weight = 1e-3;  // autoencoder stage only
    std::uint64_t seed = 0;
    WislMode wisl = WislMode::linear_wisl;

    void validate() const {
        if (epochs < 1) throw config_error("training: epochs must be >= 1");
        if (batch_size < 1) throw config_error("training: batch_size must be >= 1");
        if (!(lr > 0.0)) throw config_error("training: learning rate must be positive");
        if (kl_weight < 0.0) throw config_error("training: kl_weight must be >= 0");
    }
};

// Linear time weighting: emphasize late (low-noise) steps where the decoded
// estimate is reliable, fade to zero at t = T.
inline double lambda_weight(int t, int T) {
    if (T < 1 || t < 0 || t > T)
        throw std::invalid_argument("lambda_weight: t must lie in [0, T]");
    return static_cast<double>(T - t) / static_cast<double>(T);
}

inline double wisl_lambda(int t, int T, WislMode mode) {
    switch (mode) {
        case WislMode::off: return 0.0;
        case WislMode::constant_isl:
            if (T < 1 || t < 0 || t > T)
                throw std::invalid_argument("lambda_weight: t must lie in [0, T]");
            return 1.0;
        default: return lambda_weight(t, T);
    }
}

// Value-level weighted image reconstruction term: lambda_t * mean |y - decoded|.
template <class S>
double wisl_loss(const Tensor<S>& y, const Tensor<S>& decoded, int t, int T, WislMode mode) {
    require_same_shape(y, decoded, "wisl_loss");
    const double lam = wisl_lambda(t, T, mode);
    const double l1 = (y.data.template cast<double>() - decoded.data.template cast<double>())
                          .abs()
                          .mean();
    return lam * l1;
}

// ---- graph builders ----

// eps-matching loss for one latent at one timestep: || eps - eps_hat ||^2 (mean).
template <class S>
int ldm_sample_loss(Graph<S>& g, UNet<S>& unet, const NoiseSchedule& sched, const Tensor<S>& z0,
                    int t, const Tensor<S>& eps, bool trainable) {
    Tensor<S> z_t = forward_diffuse(sched, z0, t, eps);
    int zt = g.leaf(z_t, false);
    int ehat = unet.forward(g, zt, t, trainable);
    return g.mse(ehat, g.leaf(eps, false));
}

struct WcnNodes {
    int l_cn = -1;
    int l_wisl = -1;  // -1 when the image term is off
    int l_wcn = -1;
    int decoded = -1;  // decoded clean-latent estimate (for inspection)
};

// Combined conditioning loss for one paired sample: eps matching plus the
// weighted image reconstruction of the decoded clean-latent estimate
//   z0_hat = (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t),
// with gradients flowing into both the conditioning network and (optionally)
// the target decoder.
template <class S>
WcnNodes wcn_sample_loss(Graph<S>& g, ControlNet<S>& cn, VAE<S>& target_vae,
                         const NoiseSchedule& sched, const Tensor<S>& z_c, const Tensor<S>& z0y,
                         const Tensor<S>& y_img, int t, const Tensor<S>& eps, WislMode mode,
                         bool train_decoder) {
    require_same_shape(z_c, z0y, "wcn_sample_loss: conditioning/latent");
    Tensor<S> z_t = forward_diffuse(sched, z0y, t, eps);
    int zt = g.leaf(z_t, false);
    int zc = g.leaf(z_c, false);
    int ehat = cn.forward(g, zt, zc, t, true);

    WcnNodes n;
    n.l_cn = g.mse(ehat, g.leaf(eps, false));
    if (mode == WislMode::off) {
        n.l_wcn = n.l_cn;
        return n;
    }
    const double sab = sched.sqrt_ab(t);
    const double somb = sched.sqrt_one_minus_ab(t);
    int z0_hat = g.axpby(1.0 / sab, zt, -somb / sab, ehat);
    n.decoded = target_vae.dec.apply(g, z0_hat, train_decoder);
    int l1 = g.l1(n.decoded, g.leaf(y_img, false));
    n.l_wisl = g.scale(l1, wisl_lambda(t, sched.T, mode));
    n.l_wcn = g.add(n.l_cn, n.l_wisl);
    return n;
}

// ---- value-level batch losses (logging / closed-form anchors) ----

// Mean eps-matching loss over a batch of clean latents with per-sample
// uniformly drawn t in {1..T} and fresh Gaussian noise.
inline double ldm_loss(UNet<float>& unet, const NoiseSchedule& sched,
                       const std::vector<const Tensor<float>*>& z0s, std::uint64_t seed) {
    if (z0s.empty()) throw std::invalid_argument("ldm_loss: empty batch");
    Rng rng(mix_seed(seed, 0x10DAull));
    double acc = 0.0;
    for (const Tensor<float>* z0 : z0s) {
        const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.T)));
        Tensor<float> eps = randn<float>(z0->shape, rng);
        Graph<float> g;
        acc += static_cast<double>(
            g.val(ldm_sample_loss(g, unet, sched, *z0, t, eps, false)).data[0]);
    }
    return acc / static_cast<double>(z0s.size());
}

// ---- stage runners ----

struct EpochLoss {
    double total = 0.0;
    double recon = 0.0;
    double kl = 0.0;
};

// Train an autoencoder in place on one modality's volumes. Returns per-epoch
// mean losses. Deterministic: per-epoch shuffles, reparameterization noise,
// and update order all derive from cfg.seed.
inline std::vector<EpochLoss> train_vae(VAE<float>& vae,
                                        const std::vector<const Tensor<float>*>& volumes,
                                        const TrainConfig& cfg,
                                        const std::function<void(int, const EpochLoss&)>& on_epoch = {}) {
    cfg.validate();
    if (volumes.empty()) throw std::invalid_argument("train_vae: no training volumes");
    ParamList<float> params;
    vae.params("vae", params);
    Adam<float> opt(params, cfg.lr);
    Rng noise_rng(mix_seed(cfg.seed, 0xA0Dull));

    std::vector<EpochLoss> history;
    std::vector<std::size_t> order(volumes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch), 0xDA7Aull));
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(shuffle_rng.below(i));
            std::swap(order[i - 1], order[j]);
        }
        EpochLoss ep;
        std::size_t done = 0;
        while (done < order.size()) {
            const std::size_t bsz =
                std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size),
                                      order.size() - done);
            for (std::size_t b = 0; b < bsz; ++b) {
                const Tensor<float>& x = *volumes[order[done + b]];
                Graph<float> g;
                auto nodes = vae.loss(g, x, cfg.kl_weight, noise_rng, true);
                g.backward(nodes.total);
                opt.accumulate(g);
                ep.total += static_cast<double>(g.val(nodes.total).data[0]);
                ep.recon += static_cast<double>(g.val(nodes.recon).data[0]);
                ep.kl += static_cast<double>(g.val(nodes.kl).data[0]);
            }
            opt.step(1.0 / static_cast<double>(bsz));
            done += bsz;
        }
        const double n = static_cast<double>(order.size());
        history.push_back({ep.total / n, ep.recon / n, ep.kl / n});
        if (on_epoch) on_epoch(epoch, history.back());
    }
    return history;
}

// Frozen-autoencoder latent posteriors for a set of volumes.
struct LatentPosterior {
    Tensor<float> mean, logvar;
};

inline std::vector<LatentPosterior> encode_posteriors(VAE<float>& vae,
                                                      const std::vector<const Tensor<float>*>& xs) {
    std::vector<LatentPosterior> out;
    out.reserve(xs.size());
    for (const Tensor<float>* x : xs) {
        auto p = vae.posterior(*x);
        out.push_back({std::move(p.mean), std::move(p.logvar)});
    }
    return out;
}

inline Tensor<float> draw_latent(const LatentPosterior& p, Rng& rng) {
    Tensor<float> z = randn<float>(p.mean.shape, rng);
    z.data = p.mean.data + (0.5f * p.logvar.data).exp() * z.data;
    return z;
}

// Train the unconditional latent denoiser in place against reparameterized
// latent samples of the target modality. Returns per-epoch mean eps loss.
inline std::vector<double> train_ldm(UNet<float>& unet, VAE<float>& target_vae,
                                     const std::vector<const Tensor<float>*>& target_volumes,
                                     const NoiseSchedule& sched, const TrainConfig& cfg,
                                     const std::function<void(int, double)>& on_epoch = {}) {
    cfg.validate();
    if (target_volumes.empty()) throw std::invalid_argument("train_ldm: no training volumes");
    const std::vector<LatentPosterior> posts = encode_posteriors(target_vae, target_volumes);

    ParamList<float> params;
    unet.params("unet", params);
    Adam<float> opt(params, cfg.lr);
    Rng draw_rng(mix_seed(cfg.seed, 0xD1Full));

    std::vector<double> history;
    std::vector<std::size_t> order(posts.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch), 0xDA7Aull));
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(shuffle_rng.below(i));
            std::swap(order[i - 1], order[j]);
        }
        double ep = 0.0;
        std::size_t done = 0;
        while (done < order.size()) {
            const std::size_t bsz =
                std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size),
                                      order.size() - done);
            for (std::size_t b = 0; b < bsz; ++b) {
                const LatentPosterior& post = posts[order[done + b]];
                Tensor<float> z0 = draw_latent(post, draw_rng);
                const int t = 1 + static_cast<int>(draw_rng.below(static_cast<std::uint64_t>(sched.T)));
                Tensor<float> eps = randn<float>(z0.shape, draw_rng);
                Graph<float> g;
                int loss = ldm_sample_loss(g, unet, sched, z0, t, eps, true);
                g.backward(loss);
                opt.accumulate(g);
                ep += static_cast<double>(g.val(loss).data[0]);
            }
            opt.step(1.0 / static_cast<double>(bsz));
            done += bsz;
        }
        history.push_back(ep / static_cast<double>(order.size()));
        if (on_epoch) on_epoch(epoch, history.back());
    }
    return history;
}

struct WcnStepLoss {
    double l_cn = 0.0;
    double l_wisl = 0.0;
    double l_wcn = 0.0;
};

struct WcnSample {
    const Tensor<float>* z_c = nullptr;   // conditioning latent (source posterior mean)
    Tensor<float> z0;                     // drawn clean target latent
    const Tensor<float>* y = nullptr;     // target image (standardized)
};

// One optimizer step on a batch of paired samples. The trainable set is the
// conditioning network plus, when the image term is active, the target
// decoder; everything else must already be outside the optimizer.
inline WcnStepLoss wcn_train_step(ControlNet<float>& cn, VAE<float>& target_vae,
                                  const std::vector<WcnSample>& batch, const NoiseSchedule& sched,
                                  Adam<float>& opt, WislMode mode, std::uint64_t seed) {
    if (batch.empty()) throw std::invalid_argument("wcn_train_step: empty batch");
    Rng rng(mix_seed(seed, 0x57E9ull));
    WcnStepLoss out;
    const bool train_decoder = mode != WislMode::off;
    for (const WcnSample& s : batch) {
        const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.T)));
        Tensor<float> eps = randn<float>(s.z0.shape, rng);
        Graph<float> g;
        auto nodes =
            wcn_sample_loss(g, cn, target_vae, sched, *s.z_c, s.z0, *s.y, t, eps, mode,
                            train_decoder);
        g.backward(nodes.l_wcn);
        opt.accumulate(g);
        const double lcn = static_cast<double>(g.val(nodes.l_cn).data[0]);
        const double lwisl =
            nodes.l_wisl >= 0 ? static_cast<double>(g.val(nodes.l_wisl).data[0]) : 0.0;
        out.l_cn += lcn;
        out.l_wisl += lwisl;
    }
    opt.step(1.0 / static_cast<double>(batch.size()));
    out.l_cn /= static_cast<double>(batch.size());
    out.l_wisl /= static_cast<double>(batch.size());
    out.l_wcn = out.l_cn + out.l_wisl;
    return out;
}

// Train the conditioning network (and under an active image term, fine-tune
// the target decoder) in place. The denoiser backbone the network was
// configured against and both encoders stay frozen. Returns per-epoch mean
// losses (eps term, image term, total).
inline std::vector<WcnStepLoss> train_controlnet(
    ControlNet<float>& cn, VAE<float>& source_vae, VAE<float>& target_vae,
    const std::vector<const Tensor<float>*>& source_volumes,
    const std::vector<const Tensor<float>*>& target_volumes, const NoiseSchedule& sched,
    const TrainConfig& cfg,
    const std::function<void(int, const WcnStepLoss&)>& on_epoch = {}) {
    cfg.validate();
    if (source_volumes.empty() || source_volumes.size() != target_volumes.size())
        throw std::invalid_argument("train_controlnet: need equal-size paired volume lists");

    // deterministic conditioning latents and target posteriors
    std::vector<Tensor<float>> conds;
    conds.reserve(source_volumes.size());
    for (const Tensor<float>* x : source_volumes) {
        conds.push_back(source_vae.posterior(*x).mean);
    }
    const std::vector<LatentPosterior> posts = encode_posteriors(target_vae, target_volumes);

    ParamList<float> params;
    cn.params("cn", params);
    if (cfg.wisl != WislMode::off) target_vae.dec.params("dec", params);
    Adam<float> opt(params, cfg.lr);
    Rng draw_rng(mix_seed(cfg.seed, 0xC0DAull));

    std::vector<WcnStepLoss> history;
    std::vector<std::size_t> order(conds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch), 0xDA7Aull));
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(shuffle_rng.below(i));
            std::swap(order[i - 1], order[j]);
        }
        WcnStepLoss ep;
        std::size_t done = 0;
        std::uint64_t step_id = 0;
        while (done < order.size()) {
            const std::size_t bsz =
                std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size),
                                      order.size() - done);
            std::vector<WcnSample> batch;
            batch.reserve(bsz);
            for (std::size_t b = 0; b < bsz; ++b) {
                const std::size_t idx = order[done + b];
                WcnSample s;
                s.z_c = &conds[idx];
                s.z0 = draw_latent(posts[idx], draw_rng);
                s.y = target_volumes[idx];
                batch.push_back(std::move(s));
            }
            const WcnStepLoss l = wcn_train_step(
                cn, target_vae, batch, sched, opt, cfg.wisl,
                mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch), step_id));
            ep.l_cn += l.l_cn * static_cast<double>(bsz);
            ep.l_wisl += l.l_wisl * static_cast<double>(bsz);
            done += bsz;
            ++step_id;
        }
        const double n = static_cast<double>(order.size());
        history.push_back({ep.l_cn / n, ep.l_wisl / n, (ep.l_cn + ep.l_wisl) / n});
        if (on_epoch) on_epoch(epoch, history.back());
    }
    return history;
}

}  // namespace ldit::training
