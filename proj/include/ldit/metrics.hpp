#pragma once

// Image-quality and downstream-task metrics: MSE, PSNR, windowed SSIM,
// ROI means, Spearman rank correlation with permutation significance,
// balanced accuracy, threshold selection, and a combined evaluation report.
//
// All statistics are accumulated in double precision regardless of the
// volume scalar type so that results are stable and reproducible.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "ldit/rng.hpp"
#include "ldit/tensor.hpp"

namespace ldit::metrics {

template <class S>
double mse(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a, b, "mse");
  const Eigen::Index n = a.data.size();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(n);
}

// Peak signal-to-noise ratio in dB from a precomputed mean squared error.
// A zero MSE maps to +infinity (the conventional sentinel for identical
// inputs); otherwise peak must be positive.
inline double psnr_from_mse(double err, double peak) {
  if (err < 0.0) throw std::invalid_argument("psnr: negative mse");
  if (err == 0.0) return std::numeric_limits<double>::infinity();
  if (!(peak > 0.0)) throw std::invalid_argument("psnr: peak must be positive when mse > 0");
  return 10.0 * std::log10(peak * peak / err);
}

template <class S>
double psnr(const Tensor<S>& a, const Tensor<S>& ref, double peak) {
  return psnr_from_mse(mse(a, ref), peak);
}

// Convenience overload: peak taken as the dynamic range (max - min) of the
// reference volume.
template <class S>
double psnr(const Tensor<S>& a, const Tensor<S>& ref) {
  const double peak = static_cast<double>(ref.data.maxCoeff()) -
                      static_cast<double>(ref.data.minCoeff());
  return psnr(a, ref, peak);
}

// Structural similarity with a uniform (box) window and population window
// statistics, evaluated at fully-valid window positions only (no padding).
// For planar volumes (d == 1) the window is window x window in (h, w);
// for volumetric inputs it is window^3. Channels are scored independently
// and pooled into one mean. Windows where both the luminance and the
// contrast denominators vanish (possible only when peak == 0) score 1 when
// the numerator also vanishes.
template <class S>
double ssim(const Tensor<S>& a, const Tensor<S>& b, int window, double peak,
            double k1 = 0.01, double k2 = 0.03) {
  require_same_shape(a, b, "ssim");
  const Shape& s = a.shape;
  if (window < 2) throw std::invalid_argument("ssim: window must be at least 2");
  if (!(peak >= 0.0)) throw std::invalid_argument("ssim: peak must be non-negative");
  const int wd = (s.d == 1) ? 1 : window;
  if (s.h < window || s.w < window || s.d < wd)
    throw std::invalid_argument("ssim: volume smaller than the window");

  const double c1 = (k1 * peak) * (k1 * peak);
  const double c2 = (k2 * peak) * (k2 * peak);
  const double wn = static_cast<double>(wd) * window * window;

  double total = 0.0;
  std::int64_t count = 0;
  for (int c = 0; c < s.c; ++c) {
    for (int d0 = 0; d0 + wd <= s.d; ++d0) {
      for (int h0 = 0; h0 + window <= s.h; ++h0) {
        for (int w0 = 0; w0 + window <= s.w; ++w0) {
          double sa = 0.0, sb = 0.0, saa = 0.0, sbb = 0.0, sab = 0.0;
          for (int d = d0; d < d0 + wd; ++d) {
            for (int h = h0; h < h0 + window; ++h) {
              for (int w = w0; w < w0 + window; ++w) {
                const double va = static_cast<double>(a.at(c, d, h, w));
                const double vb = static_cast<double>(b.at(c, d, h, w));
                sa += va;
                sb += vb;
                saa += va * va;
                sbb += vb * vb;
                sab += va * vb;
              }
            }
          }
          const double ma = sa / wn;
          const double mb = sb / wn;
          const double var_a = saa / wn - ma * ma;
          const double var_b = sbb / wn - mb * mb;
          const double cov = sab / wn - ma * mb;
          const double num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
          const double den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
          if (den == 0.0) {
            total += (num == 0.0) ? 1.0 : 0.0;
          } else {
            total += num / den;
          }
          ++count;
        }
      }
    }
  }
  return total / static_cast<double>(count);
}

// Default SSIM window for a grid: 7 for planar images, 5 for volumes.
inline int default_ssim_window(const Shape& s) { return (s.d == 1) ? 7 : 5; }

// Mean of the volume over voxels where the mask is set (> 0.5).
template <class S, class M>
double roi_mean(const Tensor<S>& v, const Tensor<M>& mask) {
  if (!(v.shape == mask.shape))
    throw std::invalid_argument("roi_mean: volume/mask shape mismatch");
  double acc = 0.0;
  std::int64_t n = 0;
  const Eigen::Index size = v.data.size();
  for (Eigen::Index i = 0; i < size; ++i) {
    if (static_cast<double>(mask.data[i]) > 0.5) {
      acc += static_cast<double>(v.data[i]);
      ++n;
    }
  }
  if (n == 0) throw std::invalid_argument("roi_mean: empty mask");
  return acc / static_cast<double>(n);
}

namespace detail {

// Fractional (average) ranks, 1-based; ties share the mean of the positions
// they occupy.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    const double shared = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(const std::vector<double>& u, const std::vector<double>& v) {
  const std::size_t n = u.size();
  double mu = 0.0, mv = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mu += u[i];
    mv += v[i];
  }
  mu /= static_cast<double>(n);
  mv /= static_cast<double>(n);
  double suu = 0.0, svv = 0.0, suv = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double du = u[i] - mu;
    const double dv = v[i] - mv;
    suu += du * du;
    svv += dv * dv;
    suv += du * dv;
  }
  if (suu == 0.0 || svv == 0.0)
    throw std::invalid_argument("correlation: constant input has no defined rank correlation");
  return suv / std::sqrt(suu * svv);
}

}  // namespace detail

struct SpearmanResult {
  double rho = 0.0;
  double p = 1.0;
  bool exhaustive = false;  // p from full permutation enumeration
};

// Spearman rank correlation with a two-sided permutation test. When the
// number of distinct orderings n! is small (<= 10,000) the null distribution
// is enumerated exhaustively and p = #{|rho_perm| >= |rho|} / n!; otherwise
// n_perm seeded shuffles are drawn and p = (1 + #) / (1 + n_perm).
inline SpearmanResult spearman(const std::vector<double>& u, const std::vector<double>& v,
                               int n_perm, std::uint64_t seed) {
  if (u.size() != v.size()) throw std::invalid_argument("spearman: length mismatch");
  if (u.size() < 3) throw std::invalid_argument("spearman: need at least 3 observations");
  if (n_perm < 1) throw std::invalid_argument("spearman: n_perm must be positive");
  const std::vector<double> ru = detail::average_ranks(u);
  std::vector<double> rv = detail::average_ranks(v);
  SpearmanResult out;
  out.rho = detail::pearson(ru, rv);
  const double target = std::abs(out.rho) - 1e-12;

  const std::size_t n = u.size();
  double factorial = 1.0;
  for (std::size_t i = 2; i <= n; ++i) factorial *= static_cast<double>(i);

  if (factorial <= 10000.0) {
    std::vector<double> perm = rv;
    std::sort(perm.begin(), perm.end());
    std::int64_t hits = 0;
    std::int64_t total = 0;
    do {
      if (std::abs(detail::pearson(ru, perm)) >= target) ++hits;
      ++total;
    } while (std::next_permutation(perm.begin(), perm.end()));
    // Duplicate rank values make next_permutation enumerate each distinct
    // ordering once; the ratio is unchanged by that. Guard total anyway.
    out.p = static_cast<double>(hits) / static_cast<double>(total);
    out.exhaustive = true;
  } else {
    Rng rng(mix_seed(seed, 0x59EA7));
    std::int64_t hits = 0;
    std::vector<double> perm = rv;
    for (int t = 0; t < n_perm; ++t) {
      for (std::size_t i = n - 1; i > 0; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
        std::swap(perm[i], perm[j]);
      }
      if (std::abs(detail::pearson(ru, perm)) >= target) ++hits;
    }
    out.p = static_cast<double>(1 + hits) / static_cast<double>(1 + n_perm);
    out.exhaustive = false;
  }
  return out;
}

// Balanced accuracy = (sensitivity + specificity) / 2 for binary labels.
// The truth vector must contain both classes.
inline double balanced_accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size())
    throw std::invalid_argument("balanced_accuracy: length mismatch");
  if (predicted.empty()) throw std::invalid_argument("balanced_accuracy: empty input");
  std::int64_t tp = 0, fn = 0, tn = 0, fp = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool t = truth[i] != 0;
    const bool p = predicted[i] != 0;
    if (t && p) ++tp;
    if (t && !p) ++fn;
    if (!t && !p) ++tn;
    if (!t && p) ++fp;
  }
  if (tp + fn == 0 || tn + fp == 0)
    throw std::invalid_argument("balanced_accuracy: truth must contain both classes");
  const double sens = static_cast<double>(tp) / static_cast<double>(tp + fn);
  const double spec = static_cast<double>(tn) / static_cast<double>(tn + fp);
  return 0.5 * (sens + spec);
}

// Decision threshold for the rule (score > threshold): candidates are the
// midpoints of consecutive distinct sorted scores; returns the smallest
// candidate that maximizes balanced accuracy against the labels.
inline double select_threshold(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("select_threshold: length mismatch");
  if (scores.size() < 2) throw std::invalid_argument("select_threshold: need at least 2 scores");
  std::vector<double> uniq = scores;
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  if (uniq.size() < 2)
    throw std::invalid_argument("select_threshold: all scores identical, no candidate thresholds");
  double best_thr = 0.0;
  double best_ba = -1.0;
  std::vector<int> pred(scores.size());
  for (std::size_t i = 0; i + 1 < uniq.size(); ++i) {
    const double thr = 0.5 * (uniq[i] + uniq[i + 1]);
    for (std::size_t k = 0; k < scores.size(); ++k) pred[k] = scores[k] > thr ? 1 : 0;
    const double ba = balanced_accuracy(pred, labels);
    if (ba > best_ba) {
      best_ba = ba;
      best_thr = thr;
    }
  }
  return best_thr;
}

struct MetricReport {
  int n = 0;            // subjects evaluated
  int window = 0;       // SSIM window edge length
  double ssim_mean = 0.0, ssim_std = 0.0;
  double psnr_mean = 0.0, psnr_std = 0.0;
  double mse_mean = 0.0, mse_std = 0.0;
  double cortex_rho = 0.0, cortex_p = 1.0;  // predicted cortical ROI mean vs true burden
  double hippo_rho = 0.0, hippo_p = 1.0;    // predicted hippocampal ROI mean vs true burden
  double ba = 0.0;                          // balanced accuracy at `threshold`
  double threshold = 0.0;                   // positivity cut on the cortical score
  std::string peak_convention = "per-subject ground-truth range";
  std::vector<double> cortex_scores;  // per-subject predicted cortical ROI means
  std::vector<double> hippo_scores;   // per-subject predicted hippocampal ROI means
};

namespace detail {

inline void mean_std(const std::vector<double>& x, double& mean, double& sd) {
  mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double acc = 0.0;
  for (double v : x) acc += (v - mean) * (v - mean);
  sd = std::sqrt(acc / static_cast<double>(x.size()));
}

}  // namespace detail

// Full evaluation over one split: per-subject SSIM/PSNR/MSE (peak = the
// ground truth's dynamic range, per subject), ROI-mean burden correlations
// with permutation p-values, and balanced accuracy of the positivity call
// (cortical score > threshold) against the true labels. Volumes must be in
// raw (un-standardized) intensity units so ROI means carry burden units.
template <class S>
MetricReport evaluate(const std::vector<Tensor<S>>& predictions,
                      const std::vector<Tensor<S>>& ground_truth,
                      const Tensor<S>& cortex_mask, const Tensor<S>& hippo_mask,
                      const std::vector<double>& burden, const std::vector<int>& positive,
                      double threshold, int n_perm, std::uint64_t seed) {
  const std::size_t n = predictions.size();
  if (n == 0) throw std::invalid_argument("evaluate: no subjects");
  if (ground_truth.size() != n || burden.size() != n || positive.size() != n)
    throw std::invalid_argument("evaluate: input length mismatch");

  MetricReport rep;
  rep.n = static_cast<int>(n);
  rep.window = default_ssim_window(ground_truth[0].shape);
  rep.threshold = threshold;

  std::vector<double> ssims(n), psnrs(n), mses(n);
  rep.cortex_scores.resize(n);
  rep.hippo_scores.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double peak = static_cast<double>(ground_truth[i].data.maxCoeff()) -
                        static_cast<double>(ground_truth[i].data.minCoeff());
    ssims[i] = ssim(predictions[i], ground_truth[i], rep.window, peak);
    psnrs[i] = psnr(predictions[i], ground_truth[i], peak);
    mses[i] = mse(predictions[i], ground_truth[i]);
    rep.cortex_scores[i] = roi_mean(predictions[i], cortex_mask);
    rep.hippo_scores[i] = roi_mean(predictions[i], hippo_mask);
  }
  detail::mean_std(ssims, rep.ssim_mean, rep.ssim_std);
  detail::mean_std(psnrs, rep.psnr_mean, rep.psnr_std);
  detail::mean_std(mses, rep.mse_mean, rep.mse_std);

  const SpearmanResult ctx = spearman(rep.cortex_scores, burden, n_perm, mix_seed(seed, 1));
  const SpearmanResult hip = spearman(rep.hippo_scores, burden, n_perm, mix_seed(seed, 2));
  rep.cortex_rho = ctx.rho;
  rep.cortex_p = ctx.p;
  rep.hippo_rho = hip.rho;
  rep.hippo_p = hip.p;

  std::vector<int> calls(n);
  for (std::size_t i = 0; i < n; ++i) calls[i] = rep.cortex_scores[i] > threshold ? 1 : 0;
  rep.ba = balanced_accuracy(calls, positive);
  return rep;
}

}  // namespace ldit::metrics
