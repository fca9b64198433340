#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ldit/rng.hpp"

namespace ldit {

// Logical layout of every tensor: channels x depth x height x width, row-major
// with w fastest. Planar 2D data uses d == 1; vectors use {n, 1, 1, 1}.
struct Shape {
    int c = 0;
    int d = 0;
    int h = 0;
    int w = 0;

    Shape() = default;
    Shape(int c_, int d_, int h_, int w_) : c(c_), d(d_), h(h_), w(w_) {}

    static Shape vec(int n) { return {n, 1, 1, 1}; }
    static Shape grid(int d_, int h_, int w_) { return {1, d_, h_, w_}; }

    std::int64_t size() const {
        return static_cast<std::int64_t>(c) * d * h * w;
    }
    std::int64_t spatial() const { return static_cast<std::int64_t>(d) * h * w; }
    bool planar() const { return d == 1; }

    bool operator==(const Shape& o) const {
        return c == o.c && d == o.d && h == o.h && w == o.w;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        std::ostringstream os;
        os << "(" << c << "," << d << "," << h << "," << w << ")";
        return os.str();
    }
};

// Dense tensor over a configurable scalar: float in production paths, double
// in numerical oracles and gradient checks. Element math goes through `data`,
// a flat Eigen array, so call sites compose Eigen expressions directly.
template <typename Scalar>
struct Tensor {
    using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

    Shape shape;
    Array data;

    Tensor() = default;
    explicit Tensor(const Shape& s) : shape(s), data(Array::Zero(s.size())) {}
    Tensor(const Shape& s, Scalar fill) : shape(s), data(Array::Constant(s.size(), fill)) {}

    std::int64_t size() const { return shape.size(); }

    std::int64_t index(int c, int z, int y, int x) const {
        return ((static_cast<std::int64_t>(c) * shape.d + z) * shape.h + y) * shape.w + x;
    }
    Scalar& at(int c, int z, int y, int x) { return data[index(c, z, y, x)]; }
    Scalar at(int c, int z, int y, int x) const { return data[index(c, z, y, x)]; }

    template <typename Other>
    Tensor<Other> cast() const {
        Tensor<Other> out;
        out.shape = shape;
        out.data = data.template cast<Other>();
        return out;
    }
};

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* what) {
    if (a.shape != b.shape) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                    a.shape.str() + " vs " + b.shape.str());
    }
}

template <typename S>
Tensor<S> zeros_like(const Tensor<S>& t) {
    return Tensor<S>(t.shape);
}

template <typename S>
Tensor<S> randn(const Shape& s, Rng& rng) {
    Tensor<S> t(s);
    for (std::int64_t i = 0; i < t.size(); ++i) t.data[i] = static_cast<S>(rng.normal());
    return t;
}

template <typename S>
void fill_randn(Tensor<S>& t, Rng& rng, double stddev = 1.0) {
    for (std::int64_t i = 0; i < t.size(); ++i) t.data[i] = static_cast<S>(rng.normal() * stddev);
}

template <typename S>
double norm(const Tensor<S>& t) {
    return std::sqrt(static_cast<double>(t.data.template cast<double>().square().sum()));
}

template <typename S>
double mean_value(const Tensor<S>& t) {
    return t.data.template cast<double>().mean();
}

} // namespace ldit
