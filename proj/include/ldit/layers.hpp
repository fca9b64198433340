#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ldit/graph.hpp"
#include "ldit/rng.hpp"
#include "ldit/tensor.hpp"

namespace ldit {

template <typename S>
struct ParamRef {
    std::string name;
    Tensor<S>* tensor;
};

template <typename S>
using ParamList = std::vector<ParamRef<S>>;

// Largest group count <= 8 that divides the channel count, so normalization
// stays valid for the narrow channel widths used in tests.
inline int norm_groups(int channels) {
    for (int g = 8; g > 1; --g) {
        if (channels % g == 0) return g;
    }
    return 1;
}

template <typename S>
struct ConvLayer {
    Tensor<S> w, b;
    ConvGeom geom;
    int cin = 0, cout = 0;

    void configure(int cin_, int cout_, const ConvGeom& g) {
        cin = cin_;
        cout = cout_;
        geom = g;
        w = Tensor<S>({cout, cin * g.kd, g.kh, g.kw});
        b = Tensor<S>(Shape::vec(cout));
    }

    void init_he(Rng& rng) {
        double stddev = std::sqrt(2.0 / static_cast<double>(geom.patch_size(cin)));
        fill_randn(w, rng, stddev);
        b.data.setZero();
    }

    void init_zero() {
        w.data.setZero();
        b.data.setZero();
    }

    int apply(Graph<S>& g, int x, bool trainable) {
        return g.conv(x, g.bind(w, trainable), g.bind(b, trainable), geom);
    }

    void params(const std::string& prefix, ParamList<S>& out) {
        out.push_back({prefix + ".w", &w});
        out.push_back({prefix + ".b", &b});
    }
};

template <typename S>
struct GroupNormLayer {
    Tensor<S> gamma, beta;
    int groups = 1;

    void configure(int channels) {
        groups = norm_groups(channels);
        gamma = Tensor<S>(Shape::vec(channels), S(1));
        beta = Tensor<S>(Shape::vec(channels));
    }

    int apply(Graph<S>& g, int x, bool trainable) {
        return g.group_norm(x, g.bind(gamma, trainable), g.bind(beta, trainable), groups);
    }

    void params(const std::string& prefix, ParamList<S>& out) {
        out.push_back({prefix + ".gamma", &gamma});
        out.push_back({prefix + ".beta", &beta});
    }
};

template <typename S>
struct LinearLayer {
    Tensor<S> w, b;
    int nin = 0, nout = 0;

    void configure(int nin_, int nout_) {
        nin = nin_;
        nout = nout_;
        w = Tensor<S>({nout, nin, 1, 1});
        b = Tensor<S>(Shape::vec(nout));
    }

    void init_he(Rng& rng) {
        fill_randn(w, rng, std::sqrt(2.0 / nin));
        b.data.setZero();
    }

    int apply(Graph<S>& g, int x, bool trainable) {
        return g.linear(x, g.bind(w, trainable), g.bind(b, trainable));
    }

    void params(const std::string& prefix, ParamList<S>& out) {
        out.push_back({prefix + ".w", &w});
        out.push_back({prefix + ".b", &b});
    }
};

// conv -> norm -> silu -> (+ timestep projection) -> conv -> norm -> silu.
// The projection result is broadcast per channel; pass temb = -1 to skip it
// (plain autoencoder blocks have no timestep input).
template <typename S>
struct ConvBlock {
    ConvLayer<S> conv1, conv2;
    GroupNormLayer<S> gn1, gn2;
    LinearLayer<S> temb_proj;
    bool has_temb = false;

    void configure(int cin, int cout, bool volumetric, int temb_dim) {
        conv1.configure(cin, cout, ConvGeom::same3(volumetric));
        conv2.configure(cout, cout, ConvGeom::same3(volumetric));
        gn1.configure(cout);
        gn2.configure(cout);
        has_temb = temb_dim > 0;
        if (has_temb) temb_proj.configure(temb_dim, cout);
    }

    void init(Rng& rng) {
        conv1.init_he(rng);
        conv2.init_he(rng);
        if (has_temb) temb_proj.init_he(rng);
    }

    int apply(Graph<S>& g, int x, int temb, bool trainable) {
        int h = g.silu(gn1.apply(g, conv1.apply(g, x, trainable), trainable));
        if (has_temb && temb >= 0) {
            h = g.add_channel_vec(h, temb_proj.apply(g, temb, trainable));
        }
        return g.silu(gn2.apply(g, conv2.apply(g, h, trainable), trainable));
    }

    void params(const std::string& prefix, ParamList<S>& out) {
        conv1.params(prefix + ".conv1", out);
        gn1.params(prefix + ".gn1", out);
        conv2.params(prefix + ".conv2", out);
        gn2.params(prefix + ".gn2", out);
        if (has_temb) temb_proj.params(prefix + ".temb", out);
    }
};

// Classic transformer-style sinusoidal embedding of an integer timestep:
// first half sines, second half cosines, geometric frequency ladder.
template <typename S>
Tensor<S> sinusoidal_embedding(int t, int dim) {
    if (dim < 2 || dim % 2 != 0) {
        throw std::invalid_argument("sinusoidal_embedding: dim must be even and >= 2");
    }
    const int half = dim / 2;
    Tensor<S> e(Shape::vec(dim));
    for (int k = 0; k < half; ++k) {
        double expo = (half == 1) ? 0.0 : static_cast<double>(k) / (half - 1);
        double w = std::exp(-std::log(10000.0) * expo);
        e.data[k] = static_cast<S>(std::sin(t * w));
        e.data[half + k] = static_cast<S>(std::cos(t * w));
    }
    return e;
}

} // namespace ldit
