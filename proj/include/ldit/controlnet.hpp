#pragma once

#include <string>
#include <vector>

#include "ldit/errors.hpp"
#include "ldit/graph.hpp"
#include "ldit/layers.hpp"
#include "ldit/unet.hpp"

namespace ldit {

// Conditional branch attached to a frozen denoiser. A trainable copy of the
// denoiser's downsampling half sees the noisy latent plus a zero-conv
// projection of the conditioning latent; its per-level outputs re-enter the
// frozen decoder through zero-convs. All zero-convs start at exactly zero, so
// an untrained branch reproduces the unconditional prediction bit for bit.
template <typename S>
struct ControlNet {
    UNet<S>* base = nullptr; // frozen denoiser, not owned
    UNetEncoder<S> copy;     // trainable clone of base->encoder
    ConvLayer<S> zc_in;      // conditioning entry: cond channels -> latent channels
    std::vector<ConvLayer<S>> zc_skip;
    ConvLayer<S> zc_mid;
    int cond_channels = 0;

    void configure(UNet<S>& frozen, int cond_channels_) {
        base = &frozen;
        cond_channels = cond_channels_;
        const UNetCfg& c = frozen.cfg();
        if (cond_channels < 1) throw config_error("conditioning: cond channels must be >= 1");
        copy.configure(c);
        // start the copy from the trained weights
        ParamList<S> src, dst;
        frozen.encoder.params("e", src);
        copy.params("e", dst);
        for (std::size_t i = 0; i < src.size(); ++i) *dst[i].tensor = *src[i].tensor;

        zc_in.configure(cond_channels, c.channels, ConvGeom::point());
        zc_in.init_zero();
        zc_skip.resize(c.widths.size());
        for (std::size_t i = 0; i < c.widths.size(); ++i) {
            zc_skip[i].configure(c.widths[i], c.widths[i], ConvGeom::point());
            zc_skip[i].init_zero();
        }
        zc_mid.configure(c.bottleneck, c.bottleneck, ConvGeom::point());
        zc_mid.init_zero();
    }

    // eps prediction conditioned on z_c. Frozen parameters never receive
    // gradient; the trainable set is the copied encoder plus all zero-convs.
    int forward(Graph<S>& g, int z_t, int z_c, int t, bool trainable) {
        if (g.val(z_c).shape.c != cond_channels) {
            throw std::invalid_argument("conditioning: z_c has wrong channel count");
        }
        int temb_f = base->encoder.embed_t(g, t, false);
        auto feats = base->encoder.encode(g, z_t, temb_f, false);

        int temb_c = copy.embed_t(g, t, trainable);
        int ctrl = g.add(z_t, zc_in.apply(g, z_c, trainable));
        auto cf = copy.encode(g, ctrl, temb_c, trainable);

        typename UNetEncoder<S>::Feats mixed;
        mixed.skips.resize(feats.skips.size());
        for (std::size_t i = 0; i < feats.skips.size(); ++i) {
            mixed.skips[i] = g.add(feats.skips[i], zc_skip[i].apply(g, cf.skips[i], trainable));
        }
        mixed.mid = g.add(feats.mid, zc_mid.apply(g, cf.mid, trainable));
        return base->decode(g, mixed, temb_f, false);
    }

    Tensor<S> forward_value(const Tensor<S>& z_t, const Tensor<S>& z_c, int t) {
        Graph<S> g;
        return g.val(forward(g, g.leaf(z_t, false), g.leaf(z_c, false), t, false));
    }

    // Trainable groups only; the frozen denoiser is serialized separately.
    void params(const std::string& p, ParamList<S>& out) {
        copy.params(p + ".copy", out);
        zc_in.params(p + ".zc_in", out);
        for (std::size_t i = 0; i < zc_skip.size(); ++i) {
            zc_skip[i].params(p + ".zc_skip" + std::to_string(i), out);
        }
        zc_mid.params(p + ".zc_mid", out);
    }
};

} // namespace ldit
