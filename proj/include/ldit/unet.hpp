#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "ldit/errors.hpp"
#include "ldit/graph.hpp"
#include "ldit/layers.hpp"
#include "ldit/rng.hpp"

namespace ldit {

// Noise-prediction network over latents. Two-conv blocks at each resolution,
// stride-2 conv downsampling, nearest-neighbour upsampling with skip
// concatenation, sinusoidal timestep embedding fed to every block, zero-inited
// output head so the initial prediction is exactly zero.
struct UNetCfg {
    int channels = 4; // latent channels, both input and output
    std::vector<int> widths = {32, 64};
    int bottleneck = 128;
    int temb_dim = 64;
    int temb_hidden = 128;
    bool volumetric = false;

    void validate() const {
        if (channels < 1) throw config_error("denoiser: channels must be >= 1");
        if (widths.empty()) throw config_error("denoiser: need at least one level width");
        for (int w : widths) {
            if (w < 1) throw config_error("denoiser: level widths must be >= 1");
        }
        if (bottleneck < 1) throw config_error("denoiser: bottleneck width must be >= 1");
        if (temb_dim < 2 || temb_dim % 2 != 0) {
            throw config_error("denoiser: temb_dim must be even and >= 2");
        }
        if (temb_hidden < 1) throw config_error("denoiser: temb_hidden must be >= 1");
    }
};

// Downsampling half of the denoiser: timestep MLP, per-level blocks, stride-2
// transitions, bottleneck block. Split out so the conditioning branch can
// instantiate a trainable copy of exactly this part.
template <typename S>
struct UNetEncoder {
    UNetCfg cfg;
    LinearLayer<S> tlin1, tlin2;
    std::vector<ConvBlock<S>> enc;
    std::vector<ConvLayer<S>> down;
    ConvBlock<S> mid;

    struct Feats {
        std::vector<int> skips; // one per level, full-to-coarse order
        int mid = -1;
    };

    void configure(const UNetCfg& c) {
        cfg = c;
        cfg.validate();
        const int L = static_cast<int>(cfg.widths.size());
        tlin1.configure(cfg.temb_dim, cfg.temb_hidden);
        tlin2.configure(cfg.temb_hidden, cfg.temb_hidden);
        enc.resize(static_cast<std::size_t>(L));
        down.resize(static_cast<std::size_t>(L));
        for (int i = 0; i < L; ++i) {
            int cin = (i == 0) ? cfg.channels : cfg.widths[static_cast<std::size_t>(i)];
            enc[static_cast<std::size_t>(i)].configure(cin, cfg.widths[static_cast<std::size_t>(i)],
                                                       cfg.volumetric, cfg.temb_hidden);
            int cout = (i + 1 < L) ? cfg.widths[static_cast<std::size_t>(i) + 1] : cfg.bottleneck;
            down[static_cast<std::size_t>(i)].configure(cfg.widths[static_cast<std::size_t>(i)],
                                                        cout, ConvGeom::down3(cfg.volumetric));
        }
        mid.configure(cfg.bottleneck, cfg.bottleneck, cfg.volumetric, cfg.temb_hidden);
    }

    void init(Rng& rng) {
        tlin1.init_he(rng);
        tlin2.init_he(rng);
        for (auto& b : enc) b.init(rng);
        for (auto& d : down) d.init_he(rng);
        mid.init(rng);
    }

    int embed_t(Graph<S>& g, int t, bool trainable) {
        int e = g.leaf(sinusoidal_embedding<S>(t, cfg.temb_dim), false);
        return tlin2.apply(g, g.silu(tlin1.apply(g, e, trainable)), trainable);
    }

    void check_input(const Shape& s) const {
        const int L = static_cast<int>(cfg.widths.size());
        if (s.c != cfg.channels) {
            throw std::invalid_argument("denoiser: input has " + std::to_string(s.c) +
                                        " channels, expected " + std::to_string(cfg.channels));
        }
        const int div = 1 << L;
        bool ok = s.h % div == 0 && s.w % div == 0 && (!cfg.volumetric || s.d % div == 0) &&
                  (cfg.volumetric || s.d == 1);
        if (!ok) {
            throw std::invalid_argument("denoiser: spatial dims " + s.str() +
                                        " not divisible by " + std::to_string(div));
        }
    }

    Feats encode(Graph<S>& g, int z, int temb, bool trainable) {
        check_input(g.val(z).shape);
        Feats f;
        int h = z;
        const int L = static_cast<int>(cfg.widths.size());
        for (int i = 0; i < L; ++i) {
            h = enc[static_cast<std::size_t>(i)].apply(g, h, temb, trainable);
            f.skips.push_back(h);
            h = down[static_cast<std::size_t>(i)].apply(g, h, trainable);
        }
        f.mid = mid.apply(g, h, temb, trainable);
        return f;
    }

    void params(const std::string& prefix, ParamList<S>& out) {
        tlin1.params(prefix + ".temb1", out);
        tlin2.params(prefix + ".temb2", out);
        for (std::size_t i = 0; i < enc.size(); ++i) {
            enc[i].params(prefix + ".enc" + std::to_string(i), out);
            down[i].params(prefix + ".down" + std::to_string(i), out);
        }
        mid.params(prefix + ".mid", out);
    }
};

template <typename S>
struct UNet {
    UNetEncoder<S> encoder;
    std::vector<ConvLayer<S>> up;  // coarse-to-fine transitions
    std::vector<ConvBlock<S>> dec; // indexed like widths, applied fine-most last
    GroupNormLayer<S> gn_out;
    ConvLayer<S> conv_out;

    const UNetCfg& cfg() const { return encoder.cfg; }

    void configure(const UNetCfg& c) {
        encoder.configure(c);
        const int L = static_cast<int>(c.widths.size());
        up.resize(static_cast<std::size_t>(L));
        dec.resize(static_cast<std::size_t>(L));
        for (int i = L - 1; i >= 0; --i) {
            int cin = (i + 1 < L) ? c.widths[static_cast<std::size_t>(i) + 1] : c.bottleneck;
            up[static_cast<std::size_t>(i)].configure(cin, c.widths[static_cast<std::size_t>(i)],
                                                      ConvGeom::same3(c.volumetric));
            dec[static_cast<std::size_t>(i)].configure(2 * c.widths[static_cast<std::size_t>(i)],
                                                       c.widths[static_cast<std::size_t>(i)],
                                                       c.volumetric, c.temb_hidden);
        }
        gn_out.configure(c.widths[0]);
        conv_out.configure(c.widths[0], c.channels, ConvGeom::same3(c.volumetric));
    }

    void init(Rng& rng) {
        encoder.init(rng);
        for (auto& u : up) u.init_he(rng);
        for (auto& d : dec) d.init(rng);
        conv_out.init_zero(); // identity-zero head: untrained net predicts 0
    }

    int decode(Graph<S>& g, const typename UNetEncoder<S>::Feats& f, int temb, bool trainable) {
        const int L = static_cast<int>(encoder.cfg.widths.size());
        int h = f.mid;
        for (int i = L - 1; i >= 0; --i) {
            h = g.upsample2(h, encoder.cfg.volumetric);
            h = up[static_cast<std::size_t>(i)].apply(g, h, trainable);
            h = g.concat_c(h, f.skips[static_cast<std::size_t>(i)]);
            h = dec[static_cast<std::size_t>(i)].apply(g, h, temb, trainable);
        }
        h = g.silu(gn_out.apply(g, h, trainable));
        return conv_out.apply(g, h, trainable);
    }

    // eps prediction for latent z at integer timestep t
    int forward(Graph<S>& g, int z, int t, bool trainable) {
        int temb = encoder.embed_t(g, t, trainable);
        auto f = encoder.encode(g, z, temb, trainable);
        return decode(g, f, temb, trainable);
    }

    void params(const std::string& prefix, ParamList<S>& out) {
        encoder.params(prefix, out);
        for (std::size_t i = 0; i < up.size(); ++i) {
            up[i].params(prefix + ".up" + std::to_string(i), out);
            dec[i].params(prefix + ".dec" + std::to_string(i), out);
        }
        gn_out.params(prefix + ".gn_out", out);
        conv_out.params(prefix + ".conv_out", out);
    }
};

} // namespace ldit
