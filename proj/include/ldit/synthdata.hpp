#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "ldit/errors.hpp"
#include "ldit/io.hpp"
#include "ldit/rng.hpp"
#include "ldit/tensor.hpp"

namespace ldit {

enum class SplitId { train, val, test };

inline const char* split_name(SplitId s) {
    switch (s) {
        case SplitId::train: return "train";
        case SplitId::val: return "val";
        default: return "test";
    }
}

inline SplitId split_from_name(const std::string& s) {
    if (s == "train") return SplitId::train;
    if (s == "val") return SplitId::val;
    if (s == "test") return SplitId::test;
    throw format_error("unknown split name '" + s + "'");
}

struct NormStats {
    double mean = 0.0;
    double stddev = 1.0;
    bool present = false;
};

struct Subject {
    int id = 0;
    SplitId split = SplitId::train;
    double burden = 0.0;
    bool positive = false;
    Tensor<float> x, y; // y is empty when the container carries no target
};

// Phantom-generator constants. Source volumes mix a burden-independent
// background with texture blobs whose width shrinks as burden grows; target
// volumes add burden-proportional intensity inside two fixed regions on top of
// a smoothed copy of the source. So the target regions are affine in burden
// while the source carries only indirect (textural) burden information.
struct FieldParams {
    int blobs = 5;
    int bg_gaussians = 3;
    double base_level = 0.55;
    double noise_sigma = 0.02;
    double blur_sigma = 1.5; // voxels
    double envelope_radius = 0.9;
    double cortex_inner = 0.62, cortex_outer = 0.80;
    double hippo_offset = 0.22, hippo_radius = 0.12;
    double burden_lo = 0.8, burden_hi = 1.6;
    double positive_threshold = 1.11;
    double smooth_coeff = 0.6; // weight of the smoothed source inside the target
    double cortex_gain_amp = 0.2;
    double hippo_coeff = 0.8;
};

struct GenCfg {
    int n = 200;
    std::uint64_t seed = 42;
    Shape grid = Shape::grid(1, 64, 64);
    double f_train = 0.80, f_val = 0.05, f_test = 0.15;
    FieldParams field;

    void validate() const {
        if (n < 20) throw config_error("dataset: n must be >= 20, got " + std::to_string(n));
        require_supported_grid(grid);
        double sum = f_train + f_val + f_test;
        if (f_train <= 0 || f_val <= 0 || f_test <= 0 || std::abs(sum - 1.0) > 1e-9) {
            throw config_error("dataset: split fractions must be positive and sum to 1");
        }
    }

    // The generator is calibrated for exactly two grids: planar 64x64 and
    // volumetric 32^3. Other extents would silently change the region
    // geometry, so they are rejected outright.
    static void require_supported_grid(const Shape& grid) {
        const bool planar64 = grid.c == 1 && grid.d == 1 && grid.h == 64 && grid.w == 64;
        const bool cube32 = grid.c == 1 && grid.d == 32 && grid.h == 32 && grid.w == 32;
        if (!planar64 && !cube32) {
            throw config_error("dataset: grid must be 64x64 or 32x32x32, got " + grid.str());
        }
    }
};

struct Dataset {
    Shape grid;
    std::uint64_t seed = 0;
    bool has_masks = false;
    bool has_target = false;
    std::string intensity = "raw"; // raw | standardized
    Tensor<float> cortex_mask, hippo_mask;
    NormStats source_norm, target_norm;
    std::vector<Subject> subjects;

    std::vector<int> split_indices(SplitId s) const {
        std::vector<int> idx;
        for (std::size_t i = 0; i < subjects.size(); ++i) {
            if (subjects[i].split == s) idx.push_back(static_cast<int>(i));
        }
        return idx;
    }
};

namespace detail {

// normalized coordinates in (-1, 1) per axis; depth coordinate is 0 for planar
struct Coord {
    double u, v, w;
};

inline Coord coord_of(const Shape& g, int z, int y, int x) {
    auto axis = [](int i, int n) {
        return n <= 1 ? 0.0 : (i + 0.5 - 0.5 * n) / (0.5 * n);
    };
    return {axis(x, g.w), axis(y, g.h), axis(z, g.d)};
}

inline double radius(const Coord& c) {
    return std::sqrt(c.u * c.u + c.v * c.v + c.w * c.w);
}

template <typename F>
void for_each_voxel(const Shape& g, F&& f) {
    std::int64_t i = 0;
    for (int z = 0; z < g.d; ++z)
        for (int y = 0; y < g.h; ++y)
            for (int x = 0; x < g.w; ++x, ++i) f(i, coord_of(g, z, y, x));
}

// separable zero-padded Gaussian blur with a normalized kernel
inline Tensor<float> gaussian_blur(const Tensor<float>& in, double sigma) {
    const Shape& s = in.shape;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0;
    for (int i = -radius; i <= radius; ++i) {
        k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[static_cast<std::size_t>(i + radius)];
    }
    for (auto& v : k) v /= sum;

    auto pass = [&](const Tensor<float>& src, int axis) {
        Tensor<float> dst(s);
        for (int z = 0; z < s.d; ++z)
            for (int y = 0; y < s.h; ++y)
                for (int x = 0; x < s.w; ++x) {
                    double acc = 0;
                    for (int i = -radius; i <= radius; ++i) {
                        int zz = z + (axis == 0 ? i : 0);
                        int yy = y + (axis == 1 ? i : 0);
                        int xx = x + (axis == 2 ? i : 0);
                        if (zz < 0 || zz >= s.d || yy < 0 || yy >= s.h || xx < 0 || xx >= s.w) {
                            continue;
                        }
                        acc += k[static_cast<std::size_t>(i + radius)] * src.at(0, zz, yy, xx);
                    }
                    dst.at(0, z, y, x) = static_cast<float>(acc);
                }
        return dst;
    };

    Tensor<float> t = in;
    if (s.d > 1) t = pass(t, 0);
    t = pass(t, 1);
    t = pass(t, 2);
    return t;
}

} // namespace detail

inline Tensor<float> make_cortex_mask(const Shape& grid, const FieldParams& fp) {
    Tensor<float> m(grid);
    detail::for_each_voxel(grid, [&](std::int64_t i, const detail::Coord& c) {
        double r = detail::radius(c);
        m.data[i] = (r >= fp.cortex_inner && r <= fp.cortex_outer) ? 1.0f : 0.0f;
    });
    return m;
}

inline Tensor<float> make_hippo_mask(const Shape& grid, const FieldParams& fp) {
    Tensor<float> m(grid);
    detail::for_each_voxel(grid, [&](std::int64_t i, const detail::Coord& c) {
        for (double sgn : {-1.0, 1.0}) {
            double du = c.u - sgn * fp.hippo_offset;
            double d = std::sqrt(du * du + c.v * c.v + c.w * c.w);
            if (d <= fp.hippo_radius) {
                m.data[i] = 1.0f;
                return;
            }
        }
        m.data[i] = 0.0f;
    });
    return m;
}

// Fixed smooth modulation of the burden signal inside the cortex region.
inline double local_gain(const detail::Coord& c, const FieldParams& fp) {
    double osc = std::sin(2.2 * 3.14159265358979323846 * c.u) *
                 std::sin(1.7 * 3.14159265358979323846 * c.v);
    if (c.w != 0.0) osc *= std::cos(1.3 * 3.14159265358979323846 * c.w);
    return 1.0 + fp.cortex_gain_amp * osc;
}

// One subject; the rng must be freshly seeded with (dataset seed + id).
// Draw order is fixed: burden, background, blobs, source noise, target noise.
inline void gen_subject(Subject& s, const Shape& grid, const FieldParams& fp,
                        const Tensor<float>& cortex, const Tensor<float>& hippo, Rng& rng) {
    GenCfg::require_supported_grid(grid);
    s.burden = rng.uniform(fp.burden_lo, fp.burden_hi);
    s.positive = s.burden > fp.positive_threshold;

    struct Gauss {
        double u, v, w, amp, sigma;
    };
    auto draw_center = [&](double rmax) {
        // rejection-sample a point in the ball of radius rmax
        while (true) {
            double u = rng.uniform(-rmax, rmax);
            double v = rng.uniform(-rmax, rmax);
            double w = grid.d > 1 ? rng.uniform(-rmax, rmax) : 0.0;
            if (u * u + v * v + w * w <= rmax * rmax) return detail::Coord{u, v, w};
        }
    };

    std::vector<Gauss> bg(static_cast<std::size_t>(fp.bg_gaussians));
    for (auto& g : bg) {
        auto c = draw_center(0.5);
        g = {c.u, c.v, c.w, rng.uniform(0.25, 0.5), rng.uniform(0.25, 0.4)};
    }
    std::vector<Gauss> blobs(static_cast<std::size_t>(fp.blobs));
    for (auto& g : blobs) {
        auto c = draw_center(0.55);
        double width = (0.035 + 0.085 * (2.0 - s.burden)) * rng.uniform(0.9, 1.1);
        g = {c.u, c.v, c.w, rng.uniform(0.55, 0.85), width};
    }

    s.x = Tensor<float>(grid);
    detail::for_each_voxel(grid, [&](std::int64_t i, const detail::Coord& c) {
        double r = detail::radius(c);
        double env = std::exp(-std::pow(r / fp.envelope_radius, 8.0));
        double val = fp.base_level;
        for (const auto& g : bg) {
            double du = c.u - g.u, dv = c.v - g.v, dw = c.w - g.w;
            val += g.amp * std::exp(-0.5 * (du * du + dv * dv + dw * dw) / (g.sigma * g.sigma));
        }
        for (const auto& g : blobs) {
            double du = c.u - g.u, dv = c.v - g.v, dw = c.w - g.w;
            val += g.amp * std::exp(-0.5 * (du * du + dv * dv + dw * dw) / (g.sigma * g.sigma));
        }
        s.x.data[i] = static_cast<float>(val * env);
    });
    for (std::int64_t i = 0; i < s.x.size(); ++i) {
        s.x.data[i] += static_cast<float>(rng.normal(0.0, fp.noise_sigma));
    }

    Tensor<float> smooth = detail::gaussian_blur(s.x, fp.blur_sigma);
    s.y = Tensor<float>(grid);
    detail::for_each_voxel(grid, [&](std::int64_t i, const detail::Coord& c) {
        double val = fp.smooth_coeff * smooth.data[i];
        val += s.burden * cortex.data[i] * local_gain(c, fp);
        val += fp.hippo_coeff * s.burden * hippo.data[i];
        s.y.data[i] = static_cast<float>(val);
    });
    for (std::int64_t i = 0; i < s.y.size(); ++i) {
        s.y.data[i] += static_cast<float>(rng.normal(0.0, fp.noise_sigma));
    }
}

inline Dataset generate_dataset(const GenCfg& cfg) {
    cfg.validate();
    Dataset ds;
    ds.grid = cfg.grid;
    ds.seed = cfg.seed;
    ds.has_masks = true;
    ds.has_target = true;
    ds.cortex_mask = make_cortex_mask(cfg.grid, cfg.field);
    ds.hippo_mask = make_hippo_mask(cfg.grid, cfg.field);
    if (ds.cortex_mask.data.sum() == 0.0f || ds.hippo_mask.data.sum() == 0.0f) {
        throw config_error("dataset: grid too small, a region mask is empty");
    }
    if ((ds.cortex_mask.data * ds.hippo_mask.data).sum() != 0.0f) {
        throw config_error("dataset: region masks overlap");
    }

    ds.subjects.resize(static_cast<std::size_t>(cfg.n));
    for (int id = 0; id < cfg.n; ++id) {
        Subject& s = ds.subjects[static_cast<std::size_t>(id)];
        s.id = id;
        Rng rng(cfg.seed + static_cast<std::uint64_t>(id));
        gen_subject(s, cfg.grid, cfg.field, ds.cortex_mask, ds.hippo_mask, rng);
    }

    // deterministic shuffled split: train | val | test by subject order
    std::vector<int> order(static_cast<std::size_t>(cfg.n));
    std::iota(order.begin(), order.end(), 0);
    Rng srng(mix_seed(cfg.seed, 0x5EED5));
    for (int i = cfg.n - 1; i > 0; --i) {
        int j = static_cast<int>(srng.below(static_cast<std::uint64_t>(i + 1)));
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    int n_train = static_cast<int>(std::llround(cfg.f_train * cfg.n));
    int n_val = static_cast<int>(std::llround(cfg.f_val * cfg.n));
    n_val = std::max(1, n_val);
    if (n_train + n_val >= cfg.n) n_train = cfg.n - n_val - 1;
    for (int k = 0; k < cfg.n; ++k) {
        SplitId sp = k < n_train ? SplitId::train
                                 : (k < n_train + n_val ? SplitId::val : SplitId::test);
        ds.subjects[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])].split = sp;
    }

    // per-modality normalization statistics, fitted on the training split only
    double sx = 0, sxx = 0, sy = 0, syy = 0;
    std::int64_t cnt = 0;
    for (const auto& s : ds.subjects) {
        if (s.split != SplitId::train) continue;
        sx += s.x.data.template cast<double>().sum();
        sxx += s.x.data.template cast<double>().square().sum();
        sy += s.y.data.template cast<double>().sum();
        syy += s.y.data.template cast<double>().square().sum();
        cnt += s.x.size();
    }
    ds.source_norm = {sx / cnt, std::sqrt(std::max(1e-12, sxx / cnt - (sx / cnt) * (sx / cnt))),
                      true};
    ds.target_norm = {sy / cnt, std::sqrt(std::max(1e-12, syy / cnt - (sy / cnt) * (sy / cnt))),
                      true};
    return ds;
}

inline Tensor<float> normalize(const Tensor<float>& v, const NormStats& n) {
    Tensor<float> out(v.shape);
    out.data = (v.data - static_cast<float>(n.mean)) / static_cast<float>(n.stddev);
    return out;
}

inline Tensor<float> denormalize(const Tensor<float>& v, const NormStats& n) {
    Tensor<float> out(v.shape);
    out.data = v.data * static_cast<float>(n.stddev) + static_cast<float>(n.mean);
    return out;
}

// Standardize every volume in place using the recorded training-split stats.
inline void standardize(Dataset& ds) {
    if (ds.intensity == "standardized") return;
    if (!ds.source_norm.present || (ds.has_target && !ds.target_norm.present)) {
        throw std::invalid_argument("dataset: normalization stats missing");
    }
    for (auto& s : ds.subjects) {
        s.x = normalize(s.x, ds.source_norm);
        if (ds.has_target) s.y = normalize(s.y, ds.target_norm);
    }
    ds.intensity = "standardized";
}

// ---- container io ----
//
//   magic "CCDS" | u32 version | u64 header bytes | header text | payload
//
// payload: [cortex mask][hippo mask] (if masks) then per subject x (then y if
// targets present), each raw row-major float32 little-endian.
namespace dsio {

constexpr char MAGIC[5] = "CCDS";
constexpr std::uint32_t VERSION = 1;

inline void save(const std::string& path, const Dataset& ds) {
    std::string header;
    io::put_line(header, "grid", std::to_string(ds.grid.d) + " " + std::to_string(ds.grid.h) +
                                     " " + std::to_string(ds.grid.w));
    io::put_line(header, "n", std::to_string(ds.subjects.size()));
    io::put_line(header, "seed", std::to_string(ds.seed));
    io::put_line(header, "has_masks", ds.has_masks ? "1" : "0");
    io::put_line(header, "has_target", ds.has_target ? "1" : "0");
    io::put_line(header, "intensity", ds.intensity);
    if (ds.source_norm.present) {
        io::put_line(header, "source_norm",
                     io::fmt_double(ds.source_norm.mean) + " " + io::fmt_double(ds.source_norm.stddev));
    }
    if (ds.target_norm.present) {
        io::put_line(header, "target_norm",
                     io::fmt_double(ds.target_norm.mean) + " " + io::fmt_double(ds.target_norm.stddev));
    }
    for (const auto& s : ds.subjects) {
        io::put_line(header, "subject",
                     std::to_string(s.id) + " " + split_name(s.split) + " " +
                         io::fmt_double(s.burden) + " " + (s.positive ? "1" : "0"));
    }

    std::string payload;
    auto append = [&payload](const Tensor<float>& t) {
        payload.append(reinterpret_cast<const char*>(t.data.data()),
                       static_cast<std::size_t>(t.size()) * sizeof(float));
    };
    if (ds.has_masks) {
        append(ds.cortex_mask);
        append(ds.hippo_mask);
    }
    for (const auto& s : ds.subjects) {
        if (s.x.shape != ds.grid || (ds.has_target && s.y.shape != ds.grid)) {
            throw std::invalid_argument("dataset save: subject volume shape mismatch");
        }
        append(s.x);
        if (ds.has_target) append(s.y);
    }
    io::put_line(header, "payload_bytes", std::to_string(payload.size()));
    io::put_line(header, "payload_crc32", io::hex32(io::crc32(payload)));

    std::string out;
    out.append(MAGIC, 4);
    io::put_u32(out, VERSION);
    io::put_u64(out, header.size());
    out += header;
    out += payload;
    io::write_file(path, out);
}

inline Dataset load(const std::string& path) {
    const std::string buf = io::read_file(path);
    io::Cursor cur{buf};
    if (cur.bytes(4, "magic") != std::string(MAGIC, 4)) {
        throw format_error("not a dataset container (bad magic): " + path);
    }
    std::uint32_t ver = cur.u32("version");
    if (ver != VERSION) {
        throw format_error("unsupported dataset version " + std::to_string(ver) + ": " + path);
    }
    std::uint64_t hsize = cur.u64("header size");
    std::string header = cur.bytes(static_cast<std::size_t>(hsize), "header");

    Dataset ds;
    std::uint64_t expect_payload = 0;
    std::uint32_t expect_crc = 0;
    bool have_payload = false, have_crc = false;
    long long n = -1;
    for (const auto& [key, value] : io::parse_lines(header)) {
        if (key == "grid") {
            std::istringstream is(value);
            int d, h, w;
            if (!(is >> d >> h >> w)) throw format_error("dataset: malformed grid: " + value);
            ds.grid = Shape::grid(d, h, w);
        } else if (key == "n") {
            n = io::parse_int(value, "n");
        } else if (key == "seed") {
            ds.seed = static_cast<std::uint64_t>(io::parse_int(value, "seed"));
        } else if (key == "has_masks") {
            ds.has_masks = value == "1";
        } else if (key == "has_target") {
            ds.has_target = value == "1";
        } else if (key == "intensity") {
            ds.intensity = value;
        } else if (key == "source_norm" || key == "target_norm") {
            std::istringstream is(value);
            double m, sd;
            if (!(is >> m >> sd)) throw format_error("dataset: malformed " + key + ": " + value);
            (key == "source_norm" ? ds.source_norm : ds.target_norm) = {m, sd, true};
        } else if (key == "subject") {
            std::istringstream is(value);
            Subject s;
            std::string split;
            int pos;
            if (!(is >> s.id >> split >> s.burden >> pos)) {
                throw format_error("dataset: malformed subject line: " + value);
            }
            s.split = split_from_name(split);
            s.positive = pos == 1;
            ds.subjects.push_back(std::move(s));
        } else if (key == "payload_bytes") {
            expect_payload = static_cast<std::uint64_t>(io::parse_int(value, "payload_bytes"));
            have_payload = true;
        } else if (key == "payload_crc32") {
            expect_crc = static_cast<std::uint32_t>(std::stoul(value, nullptr, 16));
            have_crc = true;
        } else {
            throw format_error("dataset: unknown header key '" + key + "'");
        }
    }
    if (n < 0 || static_cast<std::size_t>(n) != ds.subjects.size()) {
        throw format_error("dataset: subject count mismatch in header: " + path);
    }
    if (ds.grid.size() <= 0) throw format_error("dataset: missing grid: " + path);
    if (!have_payload || !have_crc) {
        throw format_error("dataset: missing payload length or checksum: " + path);
    }

    const std::uint64_t vol = static_cast<std::uint64_t>(ds.grid.size()) * sizeof(float);
    std::uint64_t want = (ds.has_masks ? 2 * vol : 0) +
                         ds.subjects.size() * (ds.has_target ? 2 * vol : vol);
    if (want != expect_payload) {
        throw format_error("dataset: payload size does not match header: " + path);
    }
    std::string payload = cur.bytes(static_cast<std::size_t>(expect_payload), "payload");
    if (cur.pos != buf.size()) throw format_error("dataset: trailing bytes: " + path);
    if (io::crc32(payload) != expect_crc) {
        throw format_error("dataset: payload checksum mismatch (corrupted file): " + path);
    }

    std::size_t off = 0;
    auto take = [&](Tensor<float>& t) {
        t = Tensor<float>(ds.grid);
        std::memcpy(t.data.data(), payload.data() + off, static_cast<std::size_t>(vol));
        off += static_cast<std::size_t>(vol);
    };
    if (ds.has_masks) {
        take(ds.cortex_mask);
        take(ds.hippo_mask);
    }
    for (auto& s : ds.subjects) {
        take(s.x);
        if (ds.has_target) take(s.y);
    }
    return ds;
}

} // namespace dsio
} // namespace ldit
