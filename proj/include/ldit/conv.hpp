#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>

#include "ldit/tensor.hpp"

namespace ldit {

// Kernel geometry for cross-correlation over (d, h, w). 2D data keeps the
// depth extent at 1. Weight tensors are stored as {cout, cin * kd, kh, kw} so
// their flat layout equals the (cout x cin*kd*kh*kw) GEMM matrix row-major.
struct ConvGeom {
    int kd = 1, kh = 3, kw = 3;
    int sd = 1, sh = 1, sw = 1;
    int pd = 0, ph = 1, pw = 1;

    static ConvGeom same3(bool volumetric) {
        ConvGeom g;
        if (volumetric) { g.kd = 3; g.pd = 1; }
        return g;
    }
    static ConvGeom down3(bool volumetric) {
        ConvGeom g = same3(volumetric);
        g.sh = g.sw = 2;
        if (volumetric) g.sd = 2;
        return g;
    }
    static ConvGeom point() {
        ConvGeom g;
        g.kh = g.kw = 1;
        g.ph = g.pw = 0;
        return g;
    }

    int out_extent(int n, int k, int s, int p) const { return (n + 2 * p - k) / s + 1; }

    Shape out_shape(const Shape& in, int cout) const {
        return {cout, out_extent(in.d, kd, sd, pd), out_extent(in.h, kh, sh, ph),
                out_extent(in.w, kw, sw, pw)};
    }

    std::int64_t patch_size(int cin) const {
        return static_cast<std::int64_t>(cin) * kd * kh * kw;
    }
};

namespace detail {

template <typename S>
using ColMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using RowMajorMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using ConstRowMajorMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Unfold input patches into a (cin*kd*kh*kw) x (out voxels) matrix; padding
// contributes zeros. Column-major so one output position fills contiguously.
template <typename S>
ColMat<S> im2col(const Tensor<S>& x, const ConvGeom& g, const Shape& out) {
    const Shape& in = x.shape;
    ColMat<S> col(g.patch_size(in.c), out.spatial());
    std::int64_t n = 0;
    for (int zo = 0; zo < out.d; ++zo) {
        for (int yo = 0; yo < out.h; ++yo) {
            for (int xo = 0; xo < out.w; ++xo, ++n) {
                S* dst = col.data() + n * col.rows();
                for (int ci = 0; ci < in.c; ++ci) {
                    for (int zk = 0; zk < g.kd; ++zk) {
                        int z = zo * g.sd - g.pd + zk;
                        for (int yk = 0; yk < g.kh; ++yk) {
                            int y = yo * g.sh - g.ph + yk;
                            bool row_ok = z >= 0 && z < in.d && y >= 0 && y < in.h;
                            for (int xk = 0; xk < g.kw; ++xk, ++dst) {
                                int xx = xo * g.sw - g.pw + xk;
                                *dst = (row_ok && xx >= 0 && xx < in.w) ? x.at(ci, z, y, xx)
                                                                        : S(0);
                            }
                        }
                    }
                }
            }
        }
    }
    return col;
}

// Scatter-add of the column gradient back onto the input grid (adjoint of im2col).
template <typename S>
void col2im_add(const ColMat<S>& dcol, const ConvGeom& g, const Shape& out, Tensor<S>& dx) {
    const Shape& in = dx.shape;
    std::int64_t n = 0;
    for (int zo = 0; zo < out.d; ++zo) {
        for (int yo = 0; yo < out.h; ++yo) {
            for (int xo = 0; xo < out.w; ++xo, ++n) {
                const S* src = dcol.data() + n * dcol.rows();
                for (int ci = 0; ci < in.c; ++ci) {
                    for (int zk = 0; zk < g.kd; ++zk) {
                        int z = zo * g.sd - g.pd + zk;
                        for (int yk = 0; yk < g.kh; ++yk) {
                            int y = yo * g.sh - g.ph + yk;
                            bool row_ok = z >= 0 && z < in.d && y >= 0 && y < in.h;
                            for (int xk = 0; xk < g.kw; ++xk, ++src) {
                                int xx = xo * g.sw - g.pw + xk;
                                if (row_ok && xx >= 0 && xx < in.w) dx.at(ci, z, y, xx) += *src;
                            }
                        }
                    }
                }
            }
        }
    }
}

} // namespace detail

// Plain convolution forward: out = W * unfold(x) + b, one GEMM per call.
template <typename S>
Tensor<S> conv_forward(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b,
                       const ConvGeom& g) {
    const int cout = w.shape.c;
    const Shape out_shape = g.out_shape(x.shape, cout);
    if (w.shape.size() != cout * g.patch_size(x.shape.c)) {
        throw std::invalid_argument("conv_forward: weight size does not match geometry");
    }
    if (b.shape.size() != cout) throw std::invalid_argument("conv_forward: bad bias size");

    auto col = detail::im2col(x, g, out_shape);
    Tensor<S> out(out_shape);
    detail::ConstRowMajorMap<S> wmat(w.data.data(), cout, col.rows());
    detail::RowMajorMap<S> omat(out.data.data(), cout, col.cols());
    omat.noalias() = wmat * col;
    omat.colwise() += Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(b.data.data(), cout);
    return out;
}

} // namespace ldit
