#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ldit/conv.hpp"
#include "ldit/tensor.hpp"

namespace ldit {

// Reverse-mode tape. Every op appends one node holding the forward value and a
// closure that routes the node's output gradient to its parents. Closures
// capture node indices (never references into the node vector) and read parent
// values back through the graph, so the vector may reallocate while building.
//
// requires_grad marks nodes that depend on at least one trainable leaf;
// backward work is skipped everywhere else. That includes frozen submodules:
// a conv with frozen weights still propagates gradient through its input when
// the input depends on trainable parameters.
template <typename Scalar>
class Graph {
  public:
    using T = Tensor<Scalar>;
    using BackFn = std::function<void(Graph&, const T&)>;

    struct Node {
        T value;
        T grad; // allocated lazily on first accumulation
        bool requires_grad = false;
        BackFn back;
    };

    struct Bound {
        Tensor<Scalar>* param;
        int var;
    };

    std::vector<Node> nodes;
    std::vector<Bound> bound; // trainable leaves, in bind order

    Graph() { nodes.reserve(256); }

    int leaf(const T& v, bool requires_grad = false) {
        return make(T(v), requires_grad, BackFn());
    }
    int leaf(T&& v, bool requires_grad = false) {
        return make(std::move(v), requires_grad, BackFn());
    }

    // Register a module parameter as a leaf; trainable ones are recorded so
    // their gradients can be read back after backward().
    int bind(Tensor<Scalar>& p, bool trainable) {
        int id = leaf(p, trainable);
        if (trainable) bound.push_back({&p, id});
        return id;
    }

    const T& val(int id) const { return nodes[static_cast<std::size_t>(id)].value; }
    bool has_grad(int id) const { return nodes[static_cast<std::size_t>(id)].grad.size() > 0; }
    const T& grad(int id) const { return nodes[static_cast<std::size_t>(id)].grad; }
    bool rg(int id) const { return nodes[static_cast<std::size_t>(id)].requires_grad; }
    double scalar(int id) const { return static_cast<double>(val(id).data[0]); }

    // ---- elementwise / linear-combination ops ----

    int add(int a, int b) {
        require_same_shape(val(a), val(b), "graph add");
        T out(val(a).shape);
        out.data = val(a).data + val(b).data;
        return make(std::move(out), rg(a) || rg(b), [a, b](Graph& g, const T& go) {
            g.add_grad(a, go.data);
            g.add_grad(b, go.data);
        });
    }

    int axpby(double sa, int a, double sb, int b) {
        require_same_shape(val(a), val(b), "graph axpby");
        T out(val(a).shape);
        out.data = static_cast<Scalar>(sa) * val(a).data + static_cast<Scalar>(sb) * val(b).data;
        return make(std::move(out), rg(a) || rg(b), [sa, sb, a, b](Graph& g, const T& go) {
            g.add_grad(a, static_cast<Scalar>(sa) * go.data);
            g.add_grad(b, static_cast<Scalar>(sb) * go.data);
        });
    }

    int scale(int a, double s) {
        T out(val(a).shape);
        out.data = static_cast<Scalar>(s) * val(a).data;
        return make(std::move(out), rg(a), [a, s](Graph& g, const T& go) {
            g.add_grad(a, static_cast<Scalar>(s) * go.data);
        });
    }

    int hadamard(int a, int b) {
        require_same_shape(val(a), val(b), "graph hadamard");
        T out(val(a).shape);
        out.data = val(a).data * val(b).data;
        return make(std::move(out), rg(a) || rg(b), [a, b](Graph& g, const T& go) {
            g.add_grad(a, go.data * g.val(b).data);
            g.add_grad(b, go.data * g.val(a).data);
        });
    }

    int silu(int a) {
        T out(val(a).shape);
        auto sig = (Scalar(1) / (Scalar(1) + (-val(a).data).exp())).eval();
        out.data = val(a).data * sig;
        return make(std::move(out), rg(a), [a](Graph& g, const T& go) {
            const auto& x = g.val(a).data;
            auto s = (Scalar(1) / (Scalar(1) + (-x).exp())).eval();
            g.add_grad(a, go.data * s * (Scalar(1) + x * (Scalar(1) - s)));
        });
    }

    // ---- structured ops ----

    int conv(int x, int w, int b, const ConvGeom& geom) {
        T out = conv_forward(val(x), val(w), val(b), geom);
        Shape oshape = out.shape;
        bool need = rg(x) || rg(w) || rg(b);
        return make(std::move(out), need, [x, w, b, geom, oshape](Graph& g, const T& go) {
            const T& xin = g.val(x);
            const T& wt = g.val(w);
            const int cout = wt.shape.c;
            const std::int64_t ncols = oshape.spatial();
            detail::ConstRowMajorMap<Scalar> gmat(go.data.data(), cout, ncols);
            if (g.rg(w) || g.rg(x)) {
                auto col = detail::im2col(xin, geom, oshape);
                if (g.rg(w)) {
                    T dw(wt.shape);
                    detail::RowMajorMap<Scalar> dwmat(dw.data.data(), cout, col.rows());
                    dwmat.noalias() = gmat * col.transpose();
                    g.add_grad(w, dw.data);
                }
                if (g.rg(x)) {
                    detail::ColMat<Scalar> dcol(col.rows(), col.cols());
                    detail::ConstRowMajorMap<Scalar> wmat(wt.data.data(), cout, col.rows());
                    dcol.noalias() = wmat.transpose() * gmat;
                    T dx(xin.shape);
                    detail::col2im_add(dcol, geom, oshape, dx);
                    g.add_grad(x, dx.data);
                }
            }
            if (g.rg(b)) {
                Tensor<Scalar> db(g.val(b).shape);
                Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(db.data.data(), cout) =
                    gmat.rowwise().sum();
                g.add_grad(b, db.data);
            }
        });
    }

    // Normalizes over channel groups jointly with all spatial positions, then
    // applies per-channel affine parameters gamma (scale) and beta (shift).
    int group_norm(int x, int gamma, int beta, int groups, double eps = 1e-5) {
        const Shape& s = val(x).shape;
        if (groups < 1 || s.c % groups != 0) {
            throw std::invalid_argument("group_norm: groups " + std::to_string(groups) +
                                        " must divide channels " + std::to_string(s.c));
        }
        if (val(gamma).size() != s.c || val(beta).size() != s.c) {
            throw std::invalid_argument("group_norm: affine parameter size must equal channels");
        }
        const std::int64_t sp = s.spatial();
        const int cg = s.c / groups;
        const std::int64_t glen = cg * sp;

        bool need = rg(x) || rg(gamma) || rg(beta);
        T xhat(s);
        std::vector<Scalar> inv_std(static_cast<std::size_t>(groups));
        for (int gi = 0; gi < groups; ++gi) {
            auto seg = val(x).data.segment(gi * glen, glen);
            double mean = seg.template cast<double>().mean();
            double var = (seg.template cast<double>() - mean).square().mean();
            Scalar is = static_cast<Scalar>(1.0 / std::sqrt(var + eps));
            inv_std[static_cast<std::size_t>(gi)] = is;
            xhat.data.segment(gi * glen, glen) = (seg - static_cast<Scalar>(mean)) * is;
        }
        T out(s);
        for (int c = 0; c < s.c; ++c) {
            out.data.segment(c * sp, sp) =
                xhat.data.segment(c * sp, sp) * val(gamma).data[c] + val(beta).data[c];
        }
        // Backward derives d(x) from the cached normalized activations; the
        // two mean terms come from differentiating the per-group statistics.
        auto back = [x, gamma, beta, groups, cg, sp, glen, xh = need ? std::move(xhat) : T(),
                     inv_std = std::move(inv_std)](Graph& g, const T& go) {
            const Shape& xs = g.val(x).shape;
            if (g.rg(gamma) || g.rg(beta)) {
                T dgam(g.val(gamma).shape), dbet(g.val(beta).shape);
                for (int c = 0; c < xs.c; ++c) {
                    dgam.data[c] = (go.data.segment(c * sp, sp) * xh.data.segment(c * sp, sp)).sum();
                    dbet.data[c] = go.data.segment(c * sp, sp).sum();
                }
                g.add_grad(gamma, dgam.data);
                g.add_grad(beta, dbet.data);
            }
            if (g.rg(x)) {
                T dx(xs);
                typename T::Array dxh(glen);
                for (int gi = 0; gi < groups; ++gi) {
                    for (int j = 0; j < cg; ++j) {
                        int c = gi * cg + j;
                        dxh.segment(j * sp, sp) =
                            go.data.segment(c * sp, sp) * g.val(gamma).data[c];
                    }
                    auto xseg = xh.data.segment(gi * glen, glen);
                    Scalar m1 = dxh.mean();
                    Scalar m2 = (dxh * xseg).mean();
                    dx.data.segment(gi * glen, glen) =
                        inv_std[static_cast<std::size_t>(gi)] * (dxh - m1 - xseg * m2);
                }
                g.add_grad(x, dx.data);
            }
        };
        return make(std::move(out), need, need ? BackFn(std::move(back)) : BackFn());
    }

    // Dense layer on vector-shaped tensors: out = W x + b.
    int linear(int x, int w, int b) {
        const int n = static_cast<int>(val(x).size());
        const int m = val(w).shape.c;
        if (val(w).size() != static_cast<std::int64_t>(m) * n || val(b).size() != m) {
            throw std::invalid_argument("linear: weight/bias size mismatch");
        }
        T out(Shape::vec(m));
        detail::ConstRowMajorMap<Scalar> wmat(val(w).data.data(), m, n);
        Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(out.data.data(), m).noalias() =
            wmat * Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(val(x).data.data(), n) +
            Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(val(b).data.data(), m);
        return make(std::move(out), rg(x) || rg(w) || rg(b), [x, w, b, m, n](Graph& g, const T& go) {
            Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> gv(go.data.data(), m);
            if (g.rg(w)) {
                T dw(g.val(w).shape);
                detail::RowMajorMap<Scalar> dwmat(dw.data.data(), m, n);
                dwmat.noalias() =
                    gv * Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(
                             g.val(x).data.data(), n)
                             .transpose();
                g.add_grad(w, dw.data);
            }
            if (g.rg(b)) g.add_grad(b, go.data);
            if (g.rg(x)) {
                T dx(g.val(x).shape);
                detail::ConstRowMajorMap<Scalar> wmat(g.val(w).data.data(), m, n);
                Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(dx.data.data(), n).noalias() =
                    wmat.transpose() * gv;
                g.add_grad(x, dx.data);
            }
        });
    }

    // Broadcast a length-C vector across the spatial extent of each channel.
    int add_channel_vec(int x, int v) {
        const Shape& s = val(x).shape;
        if (val(v).size() != s.c) {
            throw std::invalid_argument("add_channel_vec: vector length must equal channels");
        }
        const std::int64_t sp = s.spatial();
        T out(s);
        for (int c = 0; c < s.c; ++c) {
            out.data.segment(c * sp, sp) = val(x).data.segment(c * sp, sp) + val(v).data[c];
        }
        return make(std::move(out), rg(x) || rg(v), [x, v, sp](Graph& g, const T& go) {
            g.add_grad(x, go.data);
            if (g.rg(v)) {
                T dv(g.val(v).shape);
                for (int c = 0; c < g.val(v).shape.c; ++c) {
                    dv.data[c] = go.data.segment(c * sp, sp).sum();
                }
                g.add_grad(v, dv.data);
            }
        });
    }

    // Nearest-neighbour x2 upsampling of h and w, and of d when volumetric.
    int upsample2(int x, bool up_depth) {
        const Shape& s = val(x).shape;
        Shape os{s.c, up_depth ? s.d * 2 : s.d, s.h * 2, s.w * 2};
        T out(os);
        const int dz = up_depth ? 2 : 1;
        for (int c = 0; c < os.c; ++c)
            for (int z = 0; z < os.d; ++z)
                for (int y = 0; y < os.h; ++y)
                    for (int xx = 0; xx < os.w; ++xx)
                        out.at(c, z, y, xx) = val(x).at(c, z / dz, y / 2, xx / 2);
        return make(std::move(out), rg(x), [x, os, dz](Graph& g, const T& go) {
            if (!g.rg(x)) return;
            T dx(g.val(x).shape);
            for (int c = 0; c < os.c; ++c)
                for (int z = 0; z < os.d; ++z)
                    for (int y = 0; y < os.h; ++y)
                        for (int xx = 0; xx < os.w; ++xx)
                            dx.at(c, z / dz, y / 2, xx / 2) += go.at(c, z, y, xx);
            g.add_grad(x, dx.data);
        });
    }

    int concat_c(int a, int b) {
        const Shape& sa = val(a).shape;
        const Shape& sb = val(b).shape;
        if (sa.d != sb.d || sa.h != sb.h || sa.w != sb.w) {
            throw std::invalid_argument("concat_c: spatial dims differ");
        }
        T out({sa.c + sb.c, sa.d, sa.h, sa.w});
        out.data.head(sa.size()) = val(a).data;
        out.data.tail(sb.size()) = val(b).data;
        return make(std::move(out), rg(a) || rg(b), [a, b](Graph& g, const T& go) {
            const std::int64_t na = g.val(a).size();
            g.add_grad(a, go.data.head(na));
            g.add_grad(b, go.data.tail(g.val(b).size()));
        });
    }

    int slice_c(int x, int c0, int c1) {
        const Shape& s = val(x).shape;
        if (c0 < 0 || c1 <= c0 || c1 > s.c) throw std::invalid_argument("slice_c: bad range");
        const std::int64_t sp = s.spatial();
        T out({c1 - c0, s.d, s.h, s.w});
        out.data = val(x).data.segment(c0 * sp, out.size());
        return make(std::move(out), rg(x), [x, c0, sp](Graph& g, const T& go) {
            if (!g.rg(x)) return;
            T dx(g.val(x).shape);
            dx.data.segment(c0 * sp, go.size()) = go.data;
            g.add_grad(x, dx.data);
        });
    }

    // Reparameterised Gaussian sample: mean + exp(logvar / 2) * noise.
    int reparam(int mean, int logvar, const T& noise) {
        require_same_shape(val(mean), val(logvar), "reparam");
        require_same_shape(val(mean), noise, "reparam noise");
        T out(val(mean).shape);
        out.data = val(mean).data + (val(logvar).data * Scalar(0.5)).exp() * noise.data;
        bool need = rg(mean) || rg(logvar);
        BackFn back;
        if (need) {
            back = [mean, logvar, nz = noise](Graph& g, const T& go) {
                g.add_grad(mean, go.data);
                if (g.rg(logvar)) {
                    g.add_grad(logvar, go.data * Scalar(0.5) *
                                           (g.val(logvar).data * Scalar(0.5)).exp() * nz.data);
                }
            };
        }
        return make(std::move(out), need, std::move(back));
    }

    // ---- scalar losses (mean reductions) ----

    int mse(int a, int b) {
        require_same_shape(val(a), val(b), "mse");
        const double n = static_cast<double>(val(a).size());
        T out(Shape::vec(1));
        out.data[0] = static_cast<Scalar>(
            (val(a).data - val(b).data).template cast<double>().square().mean());
        return make(std::move(out), rg(a) || rg(b), [a, b, n](Graph& g, const T& go) {
            Scalar c = static_cast<Scalar>(2.0 / n) * go.data[0];
            auto diff = (g.val(a).data - g.val(b).data).eval();
            g.add_grad(a, c * diff);
            g.add_grad(b, (-c) * diff);
        });
    }

    // Mean absolute error; the subgradient at exact zeros is taken as 0.
    int l1(int a, int b) {
        require_same_shape(val(a), val(b), "l1");
        const double n = static_cast<double>(val(a).size());
        T out(Shape::vec(1));
        out.data[0] =
            static_cast<Scalar>((val(a).data - val(b).data).template cast<double>().abs().mean());
        return make(std::move(out), rg(a) || rg(b), [a, b, n](Graph& g, const T& go) {
            Scalar c = static_cast<Scalar>(1.0 / n) * go.data[0];
            auto sgn = (g.val(a).data - g.val(b).data)
                           .unaryExpr([](Scalar v) {
                               return v > Scalar(0) ? Scalar(1) : (v < Scalar(0) ? Scalar(-1) : Scalar(0));
                           })
                           .eval();
            g.add_grad(a, c * sgn);
            g.add_grad(b, (-c) * sgn);
        });
    }

    // KL(N(mean, exp(logvar)) || N(0, 1)) averaged over elements.
    int kl_gauss(int mean, int logvar) {
        require_same_shape(val(mean), val(logvar), "kl_gauss");
        const double n = static_cast<double>(val(mean).size());
        T out(Shape::vec(1));
        out.data[0] = static_cast<Scalar>(
            0.5 * (val(mean).data.template cast<double>().square() +
                   val(logvar).data.template cast<double>().exp() -
                   val(logvar).data.template cast<double>() - 1.0)
                      .mean());
        return make(std::move(out), rg(mean) || rg(logvar), [mean, logvar, n](Graph& g, const T& go) {
            Scalar c = static_cast<Scalar>(1.0 / n) * go.data[0];
            g.add_grad(mean, c * g.val(mean).data);
            g.add_grad(logvar, c * Scalar(0.5) * (g.val(logvar).data.exp() - Scalar(1)));
        });
    }

    // ---- driver ----

    void backward(int root) {
        Node& r = nodes[static_cast<std::size_t>(root)];
        if (r.value.size() != 1) throw std::invalid_argument("backward: root must be scalar");
        if (!r.requires_grad) return;
        r.grad = T(r.value.shape);
        r.grad.data[0] = Scalar(1);
        for (int i = root; i >= 0; --i) {
            Node& n = nodes[static_cast<std::size_t>(i)];
            if (n.requires_grad && n.grad.size() > 0 && n.back) n.back(*this, n.grad);
        }
    }

    template <typename Expr>
    void add_grad(int id, const Expr& e) {
        Node& n = nodes[static_cast<std::size_t>(id)];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0) n.grad = T(n.value.shape);
        n.grad.data += e;
    }

  private:
    int make(T&& value, bool requires_grad, BackFn&& back) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        n.back = std::move(back);
        nodes.push_back(std::move(n));
        return static_cast<int>(nodes.size()) - 1;
    }
};

} // namespace ldit
