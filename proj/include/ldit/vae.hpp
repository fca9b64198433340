#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ldit/errors.hpp"
#include "ldit/graph.hpp"
#include "ldit/layers.hpp"
#include "ldit/rng.hpp"

namespace ldit {

// Convolutional variational autoencoder with two stride-2 stages, so the
// latent grid is the image grid over 4 on every spatial axis. The decoder is
// kept as an independently addressable group: the translation stage fine-tunes
// decoder weights only, and checkpoints name the groups separately.
struct VAECfg {
    int image_channels = 1;
    std::vector<int> widths = {16, 32, 64}; // full, half, quarter resolution
    int latent_channels = 4;
    bool volumetric = false;

    void validate() const {
        if (image_channels < 1) throw config_error("autoencoder: image_channels must be >= 1");
        if (widths.size() != 3) throw config_error("autoencoder: expected exactly 3 widths");
        for (int w : widths) {
            if (w < 1) throw config_error("autoencoder: widths must be >= 1");
        }
        if (latent_channels < 1) throw config_error("autoencoder: latent_channels must be >= 1");
    }
};

template <typename S>
struct VAEEncoder {
    VAECfg cfg;
    ConvLayer<S> c1, c2, c3, c4, c5, head;
    GroupNormLayer<S> n1, n2, n3, n4, n5;

    void configure(const VAECfg& c) {
        cfg = c;
        cfg.validate();
        const bool v = cfg.volumetric;
        c1.configure(cfg.image_channels, cfg.widths[0], ConvGeom::same3(v));
        c2.configure(cfg.widths[0], cfg.widths[1], ConvGeom::down3(v));
        c3.configure(cfg.widths[1], cfg.widths[1], ConvGeom::same3(v));
        c4.configure(cfg.widths[1], cfg.widths[2], ConvGeom::down3(v));
        c5.configure(cfg.widths[2], cfg.widths[2], ConvGeom::same3(v));
        head.configure(cfg.widths[2], 2 * cfg.latent_channels, ConvGeom::point());
        n1.configure(cfg.widths[0]);
        n2.configure(cfg.widths[1]);
        n3.configure(cfg.widths[1]);
        n4.configure(cfg.widths[2]);
        n5.configure(cfg.widths[2]);
    }

    void init(Rng& rng) {
        c1.init_he(rng);
        c2.init_he(rng);
        c3.init_he(rng);
        c4.init_he(rng);
        c5.init_he(rng);
        head.init_he(rng);
    }

    // returns (mean, logvar) node ids
    std::pair<int, int> apply(Graph<S>& g, int x, bool trainable) {
        int h = g.silu(n1.apply(g, c1.apply(g, x, trainable), trainable));
        h = g.silu(n2.apply(g, c2.apply(g, h, trainable), trainable));
        h = g.silu(n3.apply(g, c3.apply(g, h, trainable), trainable));
        h = g.silu(n4.apply(g, c4.apply(g, h, trainable), trainable));
        h = g.silu(n5.apply(g, c5.apply(g, h, trainable), trainable));
        int ml = head.apply(g, h, trainable);
        int zc = cfg.latent_channels;
        return {g.slice_c(ml, 0, zc), g.slice_c(ml, zc, 2 * zc)};
    }

    void params(const std::string& p, ParamList<S>& out) {
        c1.params(p + ".c1", out);
        n1.params(p + ".n1", out);
        c2.params(p + ".c2", out);
        n2.params(p + ".n2", out);
        c3.params(p + ".c3", out);
        n3.params(p + ".n3", out);
        c4.params(p + ".c4", out);
        n4.params(p + ".n4", out);
        c5.params(p + ".c5", out);
        n5.params(p + ".n5", out);
        head.params(p + ".head", out);
    }
};

template <typename S>
struct VAEDecoder {
    VAECfg cfg;
    ConvLayer<S> c1, c2, c3, c4, c5, head;
    GroupNormLayer<S> n1, n2, n3, n4, n5;

    void configure(const VAECfg& c) {
        cfg = c;
        cfg.validate();
        const bool v = cfg.volumetric;
        c1.configure(cfg.latent_channels, cfg.widths[2], ConvGeom::same3(v));
        c2.configure(cfg.widths[2], cfg.widths[2], ConvGeom::same3(v));
        c3.configure(cfg.widths[2], cfg.widths[1], ConvGeom::same3(v));
        c4.configure(cfg.widths[1], cfg.widths[1], ConvGeom::same3(v));
        c5.configure(cfg.widths[1], cfg.widths[0], ConvGeom::same3(v));
        head.configure(cfg.widths[0], cfg.image_channels, ConvGeom::same3(v));
        n1.configure(cfg.widths[2]);
        n2.configure(cfg.widths[2]);
        n3.configure(cfg.widths[1]);
        n4.configure(cfg.widths[1]);
        n5.configure(cfg.widths[0]);
    }

    void init(Rng& rng) {
        c1.init_he(rng);
        c2.init_he(rng);
        c3.init_he(rng);
        c4.init_he(rng);
        c5.init_he(rng);
        head.init_he(rng);
    }

    // latent -> image; the head is linear (no final nonlinearity) so outputs
    // live in standardized intensity space, and it stays twice differentiable.
    int apply(Graph<S>& g, int z, bool trainable) {
        const bool v = cfg.volumetric;
        int h = g.silu(n1.apply(g, c1.apply(g, z, trainable), trainable));
        h = g.silu(n2.apply(g, c2.apply(g, h, trainable), trainable));
        h = g.upsample2(h, v);
        h = g.silu(n3.apply(g, c3.apply(g, h, trainable), trainable));
        h = g.silu(n4.apply(g, c4.apply(g, h, trainable), trainable));
        h = g.upsample2(h, v);
        h = g.silu(n5.apply(g, c5.apply(g, h, trainable), trainable));
        return head.apply(g, h, trainable);
    }

    void params(const std::string& p, ParamList<S>& out) {
        c1.params(p + ".c1", out);
        n1.params(p + ".n1", out);
        c2.params(p + ".c2", out);
        n2.params(p + ".n2", out);
        c3.params(p + ".c3", out);
        n3.params(p + ".n3", out);
        c4.params(p + ".c4", out);
        n4.params(p + ".n4", out);
        c5.params(p + ".c5", out);
        n5.params(p + ".n5", out);
        head.params(p + ".head", out);
    }
};

template <typename S>
struct VAE {
    VAECfg cfg;
    VAEEncoder<S> enc;
    VAEDecoder<S> dec;

    void configure(const VAECfg& c) {
        cfg = c;
        cfg.validate();
        enc.configure(c);
        dec.configure(c);
    }

    void init(Rng& rng) {
        enc.init(rng);
        dec.init(rng);
    }

    Shape latent_shape(const Shape& image) const {
        if (image.c != cfg.image_channels || image.h % 4 != 0 || image.w % 4 != 0 ||
            (cfg.volumetric ? image.d % 4 != 0 : image.d != 1)) {
            throw std::invalid_argument("autoencoder: image shape " + image.str() +
                                        " is not 4x-divisible for this configuration");
        }
        return {cfg.latent_channels, cfg.volumetric ? image.d / 4 : 1, image.h / 4, image.w / 4};
    }

    // Posterior statistics without gradient tracking.
    struct Posterior {
        Tensor<S> mean, logvar;
    };
    Posterior posterior(const Tensor<S>& x) {
        Graph<S> g;
        auto [m, lv] = enc.apply(g, g.leaf(x, false), false);
        return {g.val(m), g.val(lv)};
    }

    Tensor<S> decode_value(const Tensor<S>& z, Graph<S>* scratch = nullptr) {
        if (scratch) {
            return scratch->val(dec.apply(*scratch, scratch->leaf(z, false), false));
        }
        Graph<S> g;
        return g.val(dec.apply(g, g.leaf(z, false), false));
    }

    struct LossNodes {
        int total = -1, recon = -1, kl = -1, recon_out = -1;
    };

    // Reconstruction objective: L1(x_hat, x) + kl_weight * KL(posterior || N(0,1)).
    LossNodes loss(Graph<S>& g, const Tensor<S>& x, double kl_weight, Rng& noise_rng,
                   bool trainable) {
        int xi = g.leaf(x, false);
        auto [m, lv] = enc.apply(g, xi, trainable);
        Tensor<S> noise = randn<S>(g.val(m).shape, noise_rng);
        int z = g.reparam(m, lv, noise);
        int out = dec.apply(g, z, trainable);
        LossNodes n;
        n.recon_out = out;
        n.recon = g.l1(out, xi);
        n.kl = g.kl_gauss(m, lv);
        n.total = g.axpby(1.0, n.recon, kl_weight, n.kl);
        return n;
    }

    void params(const std::string& p, ParamList<S>& out) {
        enc.params(p + ".enc", out);
        dec.params(p + ".dec", out);
    }
};

} // namespace ldit
