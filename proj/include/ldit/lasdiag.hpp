#pragma once

// Diagnostics for latent-space averaging: a finite-difference estimator of
// the curvature trace term, an empirical bias-versus-m curve measured against
// a large-sample reference, and decoder-linearity probes along latent
// interpolation paths. Everything here is read-only on models and works on
// generic sample/decode callables in double precision, with adapters for the
// production model bundle at the end.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include "ldit/inference.hpp"
#include "ldit/rng.hpp"
#include "ldit/tensor.hpp"

namespace ldit::lasdiag {

using DecodeFn = std::function<Tensor<double>(const Tensor<double>&)>;
using SampleFn = std::function<Tensor<double>(std::uint64_t seed)>;
using SubjectSampleFn = std::function<Tensor<double>(int subject, std::uint64_t seed)>;

// Curvature trace term (one value per output element): with mu the sample
// mean and delta_j = z_j - mu, the quadratic-form identity
// E[delta' H delta] = Tr(H Sigma) yields
//   0.5 * mean_j (D(mu + h*delta_j) - 2 D(mu) + D(mu - h*delta_j)) / h^2.
// For purely quadratic decoders the inner second difference is h-independent.
inline Tensor<double> estimate_trace_term(const DecodeFn& decode,
                                          const std::vector<Tensor<double>>& samples, double h) {
    if (samples.size() < 2)
        throw std::invalid_argument("trace estimate: need at least 2 latent samples");
    if (!(h > 0.0)) throw std::invalid_argument("trace estimate: h must be positive");

    Tensor<double> mu = zeros_like(samples[0]);
    for (const auto& z : samples) mu.data += z.data;
    mu.data /= static_cast<double>(samples.size());

    const Tensor<double> d0 = decode(mu);
    Tensor<double> acc = zeros_like(d0);
    Tensor<double> probe = zeros_like(mu);
    for (const auto& z : samples) {
        probe.data = mu.data + h * (z.data - mu.data);
        const Tensor<double> dp = decode(probe);
        probe.data = mu.data - h * (z.data - mu.data);
        const Tensor<double> dm = decode(probe);
        acc.data += (dp.data - 2.0 * d0.data + dm.data) / (h * h);
    }
    acc.data *= 0.5 / static_cast<double>(samples.size());
    return acc;
}

struct BiasPoint {
    int m = 0;
    Tensor<double> bias;  // per-element mean over repetitions of (LAS - reference)
    Tensor<double> se;    // per-element standard error, reference error folded in
    double bias_mean = 0.0;       // mean of `bias` over elements
    double bias_norm = 0.0;       // L2 norm of `bias`
    double se_mean = 0.0;         // standard error of bias_mean
    double predicted_mean = 0.0;  // (1/m - 1) * trace-term estimate, element mean
};

struct BiasReport {
    std::vector<BiasPoint> points;
    Tensor<double> trace_term;  // 0.5 * Tr(H Sigma) estimate per element
    double trace_mean = 0.0;
    Tensor<double> reference;  // large-N image-space average
    double ref_norm = 0.0;
    int n_mc = 0;
    int n_ref = 0;
};

// Empirical bias of latent-space averaging as a function of m, measured
// against an image-space average over n_ref independent samples. Each
// repetition draws m fresh latents (averaged in fixed order) and decodes the
// mean once. Standard errors combine the repetition scatter with the Monte
// Carlo error of the reference itself.
inline BiasReport empirical_bias_curve(const SampleFn& sample, const DecodeFn& decode,
                                       const std::vector<int>& m_values, int n_mc,
                                       std::uint64_t seed, int n_ref = 256, double h = 1e-2,
                                       int n_trace = 256) {
    if (m_values.empty()) throw std::invalid_argument("bias curve: no m values");
    for (std::size_t i = 0; i < m_values.size(); ++i) {
        if (m_values[i] < 1 || (i > 0 && m_values[i] <= m_values[i - 1]))
            throw std::invalid_argument("bias curve: m values must be strictly increasing and >= 1");
    }
    if (n_mc < 2) throw std::invalid_argument("bias curve: n_mc must be >= 2");
    if (n_ref < 2) throw std::invalid_argument("bias curve: n_ref must be >= 2");

    BiasReport rep;
    rep.n_mc = n_mc;
    rep.n_ref = n_ref;

    // Reference: image-space mean over n_ref draws, with per-element variance
    // and the variance of the element-mean tracked for error folding.
    Tensor<double> ref_mean;
    Tensor<double> ref_m2;
    double ref_smean = 0.0, ref_sm2 = 0.0;
    for (int j = 1; j <= n_ref; ++j) {
        Tensor<double> y = decode(sample(mix_seed(seed, 0xEEFull) + static_cast<std::uint64_t>(j)));
        const double s = mean_value(y);
        if (j == 1) {
            ref_mean = y;
            ref_m2 = zeros_like(y);
        } else {
            const double n = static_cast<double>(j);
            Tensor<double> delta = y;
            delta.data -= ref_mean.data;
            ref_mean.data += delta.data / n;
            Tensor<double> delta2 = y;
            delta2.data -= ref_mean.data;
            ref_m2.data += delta.data * delta2.data;
        }
        const double dn = s - ref_smean;
        ref_smean += dn / static_cast<double>(j);
        ref_sm2 += dn * (s - ref_smean);
    }
    rep.reference = ref_mean;
    rep.ref_norm = norm(ref_mean);
    // variance of the reference mean (per element / of the element mean)
    Tensor<double> ref_var = ref_m2;
    ref_var.data /= static_cast<double>(n_ref - 1) * static_cast<double>(n_ref);
    const double ref_svar = ref_sm2 / (static_cast<double>(n_ref - 1) * static_cast<double>(n_ref));

    // Curvature estimate from a dedicated sample set.
    std::vector<Tensor<double>> trace_samples;
    trace_samples.reserve(static_cast<std::size_t>(n_trace));
    for (int j = 1; j <= n_trace; ++j) {
        trace_samples.push_back(sample(mix_seed(seed, 0x7CEull) + static_cast<std::uint64_t>(j)));
    }
    rep.trace_term = estimate_trace_term(decode, trace_samples, h);
    rep.trace_mean = mean_value(rep.trace_term);

    for (int m : m_values) {
        Tensor<double> las_mean;
        Tensor<double> las_m2;
        double smean = 0.0, sm2 = 0.0;
        for (int r = 0; r < n_mc; ++r) {
            const std::uint64_t base = mix_seed(seed, static_cast<std::uint64_t>(m),
                                                static_cast<std::uint64_t>(r));
            Tensor<double> zbar;
            for (int j = 1; j <= m; ++j) {
                Tensor<double> z = sample(base + static_cast<std::uint64_t>(j));
                if (j == 1) {
                    zbar = std::move(z);
                } else {
                    zbar.data += z.data;
                }
            }
            zbar.data /= static_cast<double>(m);
            Tensor<double> y = decode(zbar);

            const double s = mean_value(y);
            if (r == 0) {
                las_mean = y;
                las_m2 = zeros_like(y);
            } else {
                const double n = static_cast<double>(r + 1);
                Tensor<double> delta = y;
                delta.data -= las_mean.data;
                las_mean.data += delta.data / n;
                Tensor<double> delta2 = y;
                delta2.data -= las_mean.data;
                las_m2.data += delta.data * delta2.data;
            }
            const double dn = s - smean;
            smean += dn / static_cast<double>(r + 1);
            sm2 += dn * (s - smean);
        }

        BiasPoint pt;
        pt.m = m;
        pt.bias = las_mean;
        pt.bias.data -= ref_mean.data;
        pt.bias_mean = mean_value(pt.bias);
        pt.bias_norm = norm(pt.bias);
        pt.se = las_m2;
        pt.se.data /= static_cast<double>(n_mc - 1) * static_cast<double>(n_mc);
        pt.se.data = (pt.se.data + ref_var.data).sqrt();
        const double svar = sm2 / (static_cast<double>(n_mc - 1) * static_cast<double>(n_mc));
        pt.se_mean = std::sqrt(svar + ref_svar);
        pt.predicted_mean = (1.0 / static_cast<double>(m) - 1.0) * rep.trace_mean;
        rep.points.push_back(std::move(pt));
    }
    return rep;
}

// Distance-vs-arclength linearity probe: decode along the latent segment
// z(s) = z_i + s (z_j - z_i) on an even grid of `steps` points covering
// [0, 1] inclusive, measure d(s) = mean |y(s) - y(0)|, and return the Pearson
// correlation between s and d(s). A perfectly linear decoder gives 1.
inline double linearity_pcc_test(const DecodeFn& decode, const Tensor<double>& z_i,
                                 const Tensor<double>& z_j, int steps) {
    if (steps < 3) throw std::invalid_argument("linearity pcc: need at least 3 steps");
    require_same_shape(z_i, z_j, "linearity pcc");
    const Tensor<double> y0 = decode(z_i);
    std::vector<double> ss(static_cast<std::size_t>(steps));
    std::vector<double> ds(static_cast<std::size_t>(steps));
    Tensor<double> z = zeros_like(z_i);
    for (int k = 0; k < steps; ++k) {
        const double s = static_cast<double>(k) / static_cast<double>(steps - 1);
        z.data = z_i.data + s * (z_j.data - z_i.data);
        const Tensor<double> y = decode(z);
        ss[static_cast<std::size_t>(k)] = s;
        ds[static_cast<std::size_t>(k)] = (y.data - y0.data).abs().mean();
    }
    double ms = 0, md = 0;
    for (int k = 0; k < steps; ++k) {
        ms += ss[static_cast<std::size_t>(k)];
        md += ds[static_cast<std::size_t>(k)];
    }
    ms /= steps;
    md /= steps;
    double sss = 0, sdd = 0, ssd = 0;
    for (int k = 0; k < steps; ++k) {
        const double a = ss[static_cast<std::size_t>(k)] - ms;
        const double b = ds[static_cast<std::size_t>(k)] - md;
        sss += a * a;
        sdd += b * b;
        ssd += a * b;
    }
    if (sdd == 0.0)
        throw std::invalid_argument(
            "linearity pcc: image-space distance has zero variance (identical latents?)");
    return ssd / std::sqrt(sss * sdd);
}

// Path-deviation probe: mean squared deviation between the decoded path and
// the straight line between its endpoints, averaged over the same grid.
inline double linearity_path_mse(const DecodeFn& decode, const Tensor<double>& z_i,
                                 const Tensor<double>& z_j, int steps) {
    if (steps < 2) throw std::invalid_argument("linearity mse: need at least 2 steps");
    require_same_shape(z_i, z_j, "linearity mse");
    const Tensor<double> y0 = decode(z_i);
    const Tensor<double> y1 = decode(z_j);
    double acc = 0.0;
    Tensor<double> z = zeros_like(z_i);
    for (int k = 0; k < steps; ++k) {
        const double s = static_cast<double>(k) / static_cast<double>(steps - 1);
        z.data = z_i.data + s * (z_j.data - z_i.data);
        const Tensor<double> y = decode(z);
        acc += (y.data - (y0.data + s * (y1.data - y0.data))).square().mean();
    }
    return acc / static_cast<double>(steps);
}

struct LinearityReport {
    std::vector<double> pcc;       // one per evaluated pair
    std::vector<double> path_mse;  // one per evaluated pair
    double pcc_mean = std::numeric_limits<double>::quiet_NaN();
    double pcc_std = std::numeric_limits<double>::quiet_NaN();
    double mse_mean = std::numeric_limits<double>::quiet_NaN();
    double mse_std = std::numeric_limits<double>::quiet_NaN();
    int pairs = 0;
    int skipped = 0;  // degenerate pairs (identical latents)
};

// Run both linearity probes over `pairs_per_subject` fresh latent pairs for
// each of `n_subjects` conditionals. Pair latents are drawn through the
// caller-provided sampler with seeds derived from (seed, subject, draw), so
// identical seeds reproduce identical reports.
inline LinearityReport run_linearity_suite(const SubjectSampleFn& sample, const DecodeFn& decode,
                                           int n_subjects, int pairs_per_subject, int steps,
                                           std::uint64_t seed) {
    if (n_subjects < 1) throw std::invalid_argument("linearity suite: need at least 1 subject");
    if (pairs_per_subject < 1)
        throw std::invalid_argument("linearity suite: pairs_per_subject must be >= 1");
    LinearityReport rep;
    for (int si = 0; si < n_subjects; ++si) {
        for (int p = 0; p < pairs_per_subject; ++p) {
            const Tensor<double> z_i =
                sample(si, mix_seed(seed, static_cast<std::uint64_t>(si),
                                    2 * static_cast<std::uint64_t>(p)));
            const Tensor<double> z_j =
                sample(si, mix_seed(seed, static_cast<std::uint64_t>(si),
                                    2 * static_cast<std::uint64_t>(p) + 1));
            if ((z_i.data == z_j.data).all()) {
                ++rep.skipped;
                continue;
            }
            rep.pcc.push_back(linearity_pcc_test(decode, z_i, z_j, steps));
            rep.path_mse.push_back(linearity_path_mse(decode, z_i, z_j, steps));
        }
    }
    rep.pairs = static_cast<int>(rep.pcc.size());
    if (rep.pairs > 0) {
        auto mean_std = [](const std::vector<double>& v, double& mean, double& sd) {
            mean = 0.0;
            for (double x : v) mean += x;
            mean /= static_cast<double>(v.size());
            double acc = 0.0;
            for (double x : v) acc += (x - mean) * (x - mean);
            sd = std::sqrt(acc / static_cast<double>(v.size()));
        };
        mean_std(rep.pcc, rep.pcc_mean, rep.pcc_std);
        mean_std(rep.path_mse, rep.mse_mean, rep.mse_std);
    }
    return rep;
}

// ---- adapters onto the trained model bundle ----
//
// Diagnostics run in the decoder's native (standardized) image space and in
// double precision; the bundle's float tensors are converted at the boundary.

inline DecodeFn bundle_decoder(ModelBundle& bundle) {
    return [&bundle](const Tensor<double>& z) {
        return bundle.decode(z.cast<float>()).cast<double>();
    };
}

inline SampleFn bundle_sampler(ModelBundle& bundle, const Tensor<float>& z_c) {
    return [&bundle, z_c](std::uint64_t seed) {
        return sample_latent(bundle, z_c, seed).cast<double>();
    };
}

inline BiasReport empirical_bias_curve(ModelBundle& bundle, const Tensor<float>& x_raw,
                                       const std::vector<int>& m_values, int n_mc,
                                       std::uint64_t seed, int n_ref = 256, double h = 1e-2,
                                       int n_trace = 256) {
    const Tensor<float> z_c =
        bundle.encode_condition(normalize(x_raw, bundle.source_norm));
    return empirical_bias_curve(bundle_sampler(bundle, z_c), bundle_decoder(bundle), m_values,
                                n_mc, seed, n_ref, h, n_trace);
}

inline LinearityReport run_linearity_suite(ModelBundle& bundle,
                                           const std::vector<Tensor<float>>& sources_raw,
                                           int pairs_per_subject, int steps, std::uint64_t seed) {
    std::vector<Tensor<float>> conds;
    conds.reserve(sources_raw.size());
    for (const auto& x : sources_raw) {
        conds.push_back(bundle.encode_condition(normalize(x, bundle.source_norm)));
    }
    SubjectSampleFn sample = [&bundle, &conds](int subject, std::uint64_t s) {
        return sample_latent(bundle, conds[static_cast<std::size_t>(subject)], s).cast<double>();
    };
    return run_linearity_suite(sample, bundle_decoder(bundle),
                               static_cast<int>(sources_raw.size()), pairs_per_subject, steps,
                               seed);
}

}  // namespace ldit::lasdiag
