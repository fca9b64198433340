// Standalone acceptance gate for the conditional latent-translation stack.
//
// Eleven independent checks: analytic oracles for the averaging-estimator
// theory, structural invariants of the conditioning network and the noising
// algebra, metric unit cases, bit-exact determinism, and trend/floor checks
// on a desk-scale training of the synthetic phantom task. Prints exactly one
// PASS/FAIL line per check and exits with the number of failures.
//
// The desk-scale training is cached in ./acceptance-work between runs, keyed
// on the recipe text and artifact checksums. Pass --fresh (or delete the
// directory) to retrain from scratch; cached checkpoints are only reused when
// every checksum recorded at training time still matches. Training and
// inference progress stream to stderr; the verdict lines go to stdout.

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "commands.hpp"
#include "ldit/bundleio.hpp"
#include "ldit/checkpoint.hpp"
#include "ldit/controlnet.hpp"
#include "ldit/errors.hpp"
#include "ldit/graph.hpp"
#include "ldit/inference.hpp"
#include "ldit/io.hpp"
#include "ldit/lasdiag.hpp"
#include "ldit/metrics.hpp"
#include "ldit/rng.hpp"
#include "ldit/schedule.hpp"
#include "ldit/synthdata.hpp"
#include "ldit/tensor.hpp"
#include "ldit/unet.hpp"

namespace {

using namespace ldit;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

std::string strf(const char* f, ...) {
    char buf[1024];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof(buf), f, ap);
    va_end(ap);
    return buf;
}

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::uint32_t file_crc(const std::string& path) { return io::crc32(io::read_file(path)); }

// ---- verdict plumbing ------------------------------------------------------

struct Outcome {
    bool pass = false;
    std::string detail;
    double elapsed_override = -1.0;  // <0: use the measured wall time
};

struct Gate {
    int failures = 0;

    void run(int idx, const char* name, double budget_s, const std::function<Outcome()>& fn) {
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("exception: ") + e.what();
        }
        double secs = seconds_since(t0);
        if (o.elapsed_override >= 0.0) secs = o.elapsed_override;
        const bool in_budget = secs <= budget_s;
        const bool pass = o.pass && in_budget;
        if (!in_budget) o.detail += strf(" [exceeded %.0fs budget]", budget_s);
        std::printf("[%2d] %s  %-46s %8.1fs/%-6.0fs %s\n", idx, pass ? "PASS" : "FAIL", name, secs,
                    budget_s, o.detail.c_str());
        std::fflush(stdout);
        if (!pass) ++failures;
    }
};

// ---- oracle checks (no trained model needed) --------------------------------

// The conditioning branch must reproduce the frozen denoiser bit-for-bit at
// initialization: every injection point is a zero convolution. The output
// head is randomized first so the comparison is between two non-trivial
// outputs rather than two all-zero tensors.
Outcome check_identity_at_init() {
    UNetCfg uc;
    uc.channels = 4;
    uc.widths = {32, 64};
    uc.bottleneck = 128;
    uc.temb_dim = 64;
    uc.temb_hidden = 128;
    uc.volumetric = false;
    UNet<float> net;
    net.configure(uc);
    Rng rng(2026);
    net.init(rng);
    fill_randn(net.conv_out.w, rng, 0.2);
    fill_randn(net.conv_out.b, rng, 0.2);

    ControlNet<float> cn;
    cn.configure(net, uc.channels);

    float max_diff = 0.0f;
    float max_out = 0.0f;
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor<float> z_t = randn<float>({4, 1, 8, 8}, rng);
        const Tensor<float> z_c = randn<float>({4, 1, 8, 8}, rng);
        const int t = 1 + static_cast<int>(rng.below(1000));
        Graph<float> g;
        const Tensor<float> uncond = g.val(net.forward(g, g.leaf(z_t, false), t, false));
        const Tensor<float> cond = cn.forward_value(z_t, z_c, t);
        max_diff = std::max(max_diff, (cond.data - uncond.data).abs().maxCoeff());
        max_out = std::max(max_out, uncond.data.abs().maxCoeff());
    }
    Outcome o;
    o.pass = (max_diff == 0.0f) && (max_out > 0.0f);
    o.detail = strf("max |cond-uncond| = %g over 10 triples (live head, max |out| = %.3g)",
                    static_cast<double>(max_diff), static_cast<double>(max_out));
    return o;
}

// Noising then inverting with the same noise must return the input. Double
// precision: near t = T the recovery divides by sqrt(alpha_bar) ~ 3e-3, which
// amplifies single-precision rounding above the 1e-5 bar but leaves double
// rounding at ~1e-12.
Outcome check_roundtrip() {
    const NoiseSchedule sched = make_linear_schedule(1000, 1e-4, 0.02);
    Rng rng(777);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const Tensor<double> z0 = randn<double>({4, 1, 8, 8}, rng);
        const Tensor<double> eps = randn<double>({4, 1, 8, 8}, rng);
        const int t = 1 + static_cast<int>(rng.below(1000));
        const Tensor<double> z_t = forward_diffuse(sched, z0, t, eps);
        const Tensor<double> back = recover_z0(sched, z_t, eps, t);
        Tensor<double> diff = back;
        diff.data -= z0.data;
        worst = std::max(worst, norm(diff) / norm(z0));
    }
    Outcome o;
    o.pass = worst <= 1e-5;
    o.detail = strf("worst relative error %.3g over 100 (z0, t, eps) triples (bar 1e-5)", worst);
    return o;
}

// Quadratic oracle decoder D(z) = z^2 with latents N(0, 0.5 I): averaging m
// latents before decoding biases each output by 0.5 * (1/m - 1) against the
// image-space average. The empirical curve must match within 3 standard
// errors at every m; at m = 4 the analytic value is -0.375.
Outcome check_bias_law() {
    const Shape shape{1, 1, 16, 16};
    const double sigma_kk = 0.5;
    auto sample = [&](std::uint64_t s) {
        Rng r(s);
        Tensor<double> z = randn<double>(shape, r);
        z.data *= std::sqrt(sigma_kk);
        return z;
    };
    auto decode = [](const Tensor<double>& z) {
        Tensor<double> y = z;
        y.data = z.data.square();
        return y;
    };
    const std::vector<int> ms = {1, 2, 4, 8, 16};
    const lasdiag::BiasReport rep =
        lasdiag::empirical_bias_curve(sample, decode, ms, /*n_mc=*/256, /*seed=*/31337,
                                      /*n_ref=*/4096);
    bool ok = true;
    double worst_sigmas = 0.0;
    double m4_bias = 0.0, m4_se = 0.0;
    for (const lasdiag::BiasPoint& p : rep.points) {
        const double analytic = sigma_kk * (1.0 / p.m - 1.0);
        const double sigmas = std::abs(p.bias_mean - analytic) / p.se_mean;
        worst_sigmas = std::max(worst_sigmas, sigmas);
        if (sigmas > 3.0) ok = false;
        if (p.m == 4) {
            m4_bias = p.bias_mean;
            m4_se = p.se_mean;
        }
    }
    Outcome o;
    o.pass = ok;
    o.detail = strf("m=4 bias %.4f+/-%.4f (analytic -0.375); worst |dev| %.2f se over m={1,2,4,8,16},"
                    " n_mc=256",
                    m4_bias, m4_se, worst_sigmas);
    return o;
}

// Finite-difference curvature trace on the quadratic oracle D(z) = 0.5 z^2
// (unit curvature): per-coordinate estimate of 0.5 * c * Sigma_kk = 0.25
// within 5%, and h-independent to 1e-6 across three decades of h because the
// second difference of a quadratic is exact.
Outcome check_trace_estimator() {
    const Shape shape{1, 1, 8, 8};
    const double analytic = 0.25;
    auto decode = [](const Tensor<double>& z) {
        Tensor<double> y = z;
        y.data = 0.5 * z.data.square();
        return y;
    };
    const int n = 51200;
    std::vector<Tensor<double>> samples;
    samples.reserve(n);
    Rng rng(4242);
    for (int j = 0; j < n; ++j) {
        Tensor<double> z = randn<double>(shape, rng);
        z.data *= std::sqrt(0.5);
        samples.push_back(std::move(z));
    }
    const std::vector<double> hs = {1e-2, 1e-1, 1.0};
    std::vector<Tensor<double>> est;
    for (double h : hs) est.push_back(lasdiag::estimate_trace_term(decode, samples, h));

    double worst_rel = 0.0;
    for (const auto& e : est) {
        for (Eigen::Index i = 0; i < e.data.size(); ++i) {
            worst_rel = std::max(worst_rel, std::abs(e.data[i] / analytic - 1.0));
        }
    }
    double worst_h_diff = 0.0;
    for (std::size_t a = 0; a < est.size(); ++a) {
        for (std::size_t b = a + 1; b < est.size(); ++b) {
            worst_h_diff =
                std::max(worst_h_diff, (est[a].data - est[b].data).abs().maxCoeff());
        }
    }
    Outcome o;
    o.pass = worst_rel <= 0.05 && worst_h_diff <= 1e-6;
    o.detail = strf("worst per-coordinate error %.2f%% of 0.25 (bar 5%%); max drift across "
                    "h={0.01,0.1,1} %.2g (bar 1e-6)",
                    100.0 * worst_rel, worst_h_diff);
    return o;
}

// ---- metric unit cases -------------------------------------------------------

Outcome check_metric_units() {
    Outcome o;
    std::string bad;

    Rng rng(555);
    const Tensor<double> x = randn<double>(Shape::grid(1, 12, 14), rng);
    const double peak_x = x.data.maxCoeff() - x.data.minCoeff();
    if (metrics::ssim(x, x, 7, peak_x) != 1.0) bad += "ssim(x,x)!=1; ";

    Tensor<double> c1(Shape::grid(1, 8, 8)), c2(Shape::grid(1, 8, 8));
    c1.data.setConstant(1.0);
    c2.data.setConstant(2.0);
    const double s_const = metrics::ssim(c1, c2, 7, 4.0);
    if (std::abs(s_const - 0.8001) > 1e-3) bad += strf("const ssim %.5f !~ 0.8001; ", s_const);

    if (metrics::psnr_from_mse(0.01, 1.0) != 20.0) bad += "psnr(0.01,1)!=20; ";

    std::vector<double> u(10), v(10);
    for (int i = 0; i < 10; ++i) {
        u[static_cast<std::size_t>(i)] = i + 1;
        v[static_cast<std::size_t>(i)] = 10 - i;
    }
    const metrics::SpearmanResult sp = metrics::spearman(u, v, 100, 1);
    if (std::abs(sp.rho + 1.0) > 1e-12) bad += strf("reversed-rank rho %.6f != -1; ", sp.rho);

    // confusion (TP, FN, TN, FP) = (3, 1, 2, 2)
    const std::vector<int> truth = {1, 1, 1, 1, 0, 0, 0, 0};
    const std::vector<int> pred = {1, 1, 1, 0, 0, 0, 1, 1};
    if (metrics::balanced_accuracy(pred, truth) != 0.625) bad += "ba(3,1,2,2)!=0.625; ";

    // threshold selection vs an independent exhaustive search over the same
    // candidate family (midpoints of consecutive distinct sorted scores)
    Rng trng(1010);
    int mismatches = 0;
    for (int inst = 0; inst < 100; ++inst) {
        const int n = 5 + static_cast<int>(trng.below(28));
        std::vector<double> scores(static_cast<std::size_t>(n));
        std::vector<int> labels(static_cast<std::size_t>(n));
        bool has0 = false, has1 = false;
        while (!(has0 && has1)) {
            has0 = has1 = false;
            for (int i = 0; i < n; ++i) {
                scores[static_cast<std::size_t>(i)] = trng.normal();
                labels[static_cast<std::size_t>(i)] = static_cast<int>(trng.below(2));
                (labels[static_cast<std::size_t>(i)] ? has1 : has0) = true;
            }
        }
        std::vector<double> uniq = scores;
        std::sort(uniq.begin(), uniq.end());
        uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
        double best_ba = -1.0, best_thr = 0.0;
        for (std::size_t i = 0; i + 1 < uniq.size(); ++i) {
            const double thr = 0.5 * (uniq[i] + uniq[i + 1]);
            std::vector<int> calls(scores.size());
            for (std::size_t k = 0; k < scores.size(); ++k) calls[k] = scores[k] > thr ? 1 : 0;
            const double ba = metrics::balanced_accuracy(calls, labels);
            if (ba > best_ba) {
                best_ba = ba;
                best_thr = thr;
            }
        }
        const double got = metrics::select_threshold(scores, labels);
        std::vector<int> calls(scores.size());
        for (std::size_t k = 0; k < scores.size(); ++k) calls[k] = scores[k] > got ? 1 : 0;
        if (got != best_thr || metrics::balanced_accuracy(calls, labels) != best_ba) ++mismatches;
    }
    if (mismatches > 0) bad += strf("threshold selection mismatched brute force on %d/100; ", mismatches);

    o.pass = bad.empty();
    o.detail = bad.empty()
                   ? strf("ssim identity/constant (%.5f), psnr 20 dB, rho -1, ba 0.625, "
                          "threshold = brute force on 100 instances",
                          s_const)
                   : bad;
    return o;
}

// ---- desk-scale training workspace ------------------------------------------

constexpr std::uint64_t kInferSeed = 7;  // matches the CLI default
constexpr int kSamplerSteps = 50;

struct PredBatch {
    std::vector<Tensor<float>> preds;  // aligned with the split's subject order
    std::int64_t decoder_calls = 0;
};

struct ImgStats {
    double ssim = 0.0;
    double mse = 0.0;
};

class Workspace {
public:
    explicit Workspace(bool fresh) : fresh_(fresh) {
        work_ = fs::absolute("acceptance-work").string();
        data_path_ = work_ + "/data.ccds";
        run_full_ = work_ + "/run-full";
        run_base_ = work_ + "/run-base";
    }

    const std::string& dir() const { return work_; }
    bool cached() const { return cached_; }
    double train_seconds() const { return train_seconds_; }
    const std::string& train_error() const { return train_error_; }

    // Train the full recipe and the no-image-loss baseline, or adopt the
    // cached artifacts when every checksum recorded at training time still
    // matches. Any failure is remembered and reported by the dependent
    // checks rather than aborting the gate.
    void ensure_trained() {
        if (attempted_) return;
        attempted_ = true;
        try {
            const std::string recipe = recipe_text();
            const std::string key = io::hex32(io::crc32(recipe + "|base:wisl=off|m-probe"));
            if (!fresh_ && stamp_matches(key)) {
                cached_ = true;
                std::printf("-- desk recipe: reusing cached training in %s (checksums verified)\n",
                            work_.c_str());
                std::fflush(stdout);
            } else {
                train(recipe, key);
            }
            load_dataset();
        } catch (const std::exception& e) {
            train_error_ = e.what();
        }
    }

    ModelBundle& bundle_full() { return bundle(run_full_, bundle_full_); }
    ModelBundle& bundle_base() { return bundle(run_base_, bundle_base_); }

    const Dataset& data() const { return *ds_; }

    // Predictions over one split, latent averaging (single decode) or
    // image-space averaging (one decode per draw). Per-subject seeds follow
    // the CLI convention, so both estimators reuse identical latent draws.
    PredBatch predict(ModelBundle& b, SplitId split, bool latent_avg, int m) {
        const std::vector<int> idx = ds_->split_indices(split);
        PredBatch out;
        b.decoder_calls = 0;
        for (std::size_t k = 0; k < idx.size(); ++k) {
            const Subject& s = ds_->subjects[static_cast<std::size_t>(idx[k])];
            const std::uint64_t seed = mix_seed(kInferSeed, static_cast<std::uint64_t>(s.id));
            out.preds.push_back(latent_avg ? las_estimate(b, s.x, m, seed)
                                           : unbiased_estimate(b, s.x, m, seed));
            std::fprintf(stderr, "  [predict %s %s m=%d] %zu/%zu\n", split_name(split),
                         latent_avg ? "latent-avg" : "image-avg", m, k + 1, idx.size());
        }
        out.decoder_calls = b.decoder_calls;
        return out;
    }

    ImgStats image_stats(const PredBatch& batch, SplitId split) const {
        const std::vector<int> idx = ds_->split_indices(split);
        ImgStats st;
        const int window = metrics::default_ssim_window(ds_->grid);
        for (std::size_t k = 0; k < idx.size(); ++k) {
            const Tensor<float>& gt = ds_->subjects[static_cast<std::size_t>(idx[k])].y;
            const double peak = static_cast<double>(gt.data.maxCoeff()) -
                                static_cast<double>(gt.data.minCoeff());
            st.ssim += metrics::ssim(batch.preds[k], gt, window, peak);
            st.mse += metrics::mse(batch.preds[k], gt);
        }
        st.ssim /= static_cast<double>(idx.size());
        st.mse /= static_cast<double>(idx.size());
        return st;
    }

    std::vector<double> cortex_scores(const PredBatch& batch) const {
        std::vector<double> s;
        s.reserve(batch.preds.size());
        for (const auto& p : batch.preds) s.push_back(metrics::roi_mean(p, ds_->cortex_mask));
        return s;
    }

    std::vector<double> burden(SplitId split) const {
        std::vector<double> b;
        for (int i : ds_->split_indices(split))
            b.push_back(ds_->subjects[static_cast<std::size_t>(i)].burden);
        return b;
    }

    std::vector<int> positives(SplitId split) const {
        std::vector<int> p;
        for (int i : ds_->split_indices(split))
            p.push_back(ds_->subjects[static_cast<std::size_t>(i)].positive ? 1 : 0);
        return p;
    }

    std::vector<Tensor<float>> sources(SplitId split) const {
        std::vector<Tensor<float>> xs;
        for (int i : ds_->split_indices(split))
            xs.push_back(ds_->subjects[static_cast<std::size_t>(i)].x);
        return xs;
    }

    // prediction batches shared across checks, computed on first use
    std::optional<PredBatch> test_la16, test_la1, test_ia16, val_la16, base_test_la1;

private:
    std::string recipe_text() const {
        return "[data]\n"
               "path = " + data_path_ + "\n"
               "n = 200\n"
               "seed = 42\n"
               "grid = 64x64\n"
               "train_fraction = 0.80\n"
               "val_fraction = 0.05\n"
               "test_fraction = 0.15\n"
               "[vae]\n"
               "widths = 16,32,64\n"
               "latent_channels = 4\n"
               "epochs = 60\n"
               "batch_size = 4\n"
               "lr = 1e-4\n"
               "kl_weight = 1e-3\n"
               "seed = 11\n"
               "[ldm]\n"
               "widths = 32,64\n"
               "bottleneck = 128\n"
               "temb_dim = 64\n"
               "temb_hidden = 128\n"
               "T = 1000\n"
               "beta_start = 1e-4\n"
               "beta_end = 0.02\n"
               "epochs = 300\n"
               "batch_size = 4\n"
               "lr = 1e-4\n"
               "seed = 12\n"
               "[controlnet]\n"
               "wisl = linear-wisl\n"
               "epochs = 240\n"
               "batch_size = 4\n"
               "lr = 1e-4\n"
               "seed = 13\n";
    }

    std::vector<std::string> artifacts() const {
        std::vector<std::string> a = {data_path_};
        for (const char* f : {"vae-source.ckpt", "vae-target.ckpt", "ldm.ckpt", "controlnet.ckpt",
                              "vae-target-ft.ckpt"})
            a.push_back(run_full_ + "/" + f);
        for (const char* f : {"vae-source.ckpt", "vae-target.ckpt", "ldm.ckpt", "controlnet.ckpt",
                              "vae-target-ft.ckpt"})
            a.push_back(run_base_ + "/" + f);
        return a;
    }

    bool stamp_matches(const std::string& key) {
        const std::string stamp = work_ + "/stamp.txt";
        if (!io::file_exists(stamp)) return false;
        std::map<std::string, std::string> kv;
        std::string text = io::read_file(stamp);
        std::size_t pos = 0;
        while (pos < text.size()) {
            std::size_t nl = text.find('\n', pos);
            if (nl == std::string::npos) nl = text.size();
            const std::string line = text.substr(pos, nl - pos);
            pos = nl + 1;
            const std::size_t eq = line.find('=');
            if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
        }
        if (kv["recipe"] != key) return false;
        for (const std::string& f : artifacts()) {
            if (!io::file_exists(f)) return false;
            if (kv["crc:" + f] != io::hex32(file_crc(f))) return false;
        }
        train_seconds_ = io::parse_double(kv["train_seconds"], "stamp train_seconds");
        return true;
    }

    void run_stage(const std::vector<std::string>& args) {
        std::string joined;
        for (const auto& a : args) joined += a + " ";
        const auto t0 = Clock::now();
        const int rc = run_command(args);
        if (rc != 0) throw stage_error(strf("command failed (exit %d): %s", rc, joined.c_str()));
        std::printf("   %-18s %7.1fs\n", args[0].c_str(), seconds_since(t0));
        std::fflush(stdout);
    }

    void train(const std::string& recipe, const std::string& key) {
        std::printf("-- desk recipe: training into %s (two conditioning variants; "
                    "expect roughly 40 CPU-minutes)\n",
                    work_.c_str());
        std::fflush(stdout);
        fs::remove_all(work_);
        fs::create_directories(work_);
        const std::string recipe_path = work_ + "/recipe.ini";
        io::write_file(recipe_path, recipe);

        const auto t0 = Clock::now();
        run_stage({"gen-data", "--config", recipe_path});
        run_stage({"train-vae", "--config", recipe_path, "--run", run_full_});
        run_stage({"train-ldm", "--config", recipe_path, "--run", run_full_});
        run_stage({"train-controlnet", "--config", recipe_path, "--run", run_full_});

        // The baseline shares the autoencoders and the unconditional denoiser
        // (the ablation isolates the conditioning objective), trains its own
        // conditioning network without the image-space term, and is evaluated
        // later without latent averaging.
        fs::create_directories(run_base_);
        for (const char* f : {"vae-source.ckpt", "vae-target.ckpt", "ldm.ckpt"}) {
            fs::copy_file(run_full_ + "/" + f, run_base_ + "/" + f,
                          fs::copy_options::overwrite_existing);
        }
        run_stage({"train-controlnet", "--config", recipe_path, "--run", run_base_, "--set",
                   "controlnet.wisl=off"});
        train_seconds_ = seconds_since(t0);

        std::string stamp = "recipe=" + key + "\n";
        stamp += strf("train_seconds=%.1f\n", train_seconds_);
        for (const std::string& f : artifacts()) {
            stamp += "crc:" + f + "=" + io::hex32(file_crc(f)) + "\n";
        }
        io::write_file(work_ + "/stamp.txt", stamp);
    }

    void load_dataset() { ds_ = std::make_unique<Dataset>(dsio::load(data_path_)); }

    ModelBundle& bundle(const std::string& run, std::unique_ptr<ModelBundle>& slot) {
        if (!slot) {
            slot = std::make_unique<ModelBundle>();
            bundleio::load_bundle(*slot, run, kSamplerSteps);
        }
        return *slot;
    }

    bool fresh_ = false;
    bool attempted_ = false;
    bool cached_ = false;
    std::string work_, data_path_, run_full_, run_base_;
    std::string train_error_;
    double train_seconds_ = 0.0;
    std::unique_ptr<Dataset> ds_;
    std::unique_ptr<ModelBundle> bundle_full_, bundle_base_;
};

// ---- checks on the trained model ---------------------------------------------

Outcome check_linearity(Workspace& ws) {
    const std::vector<Tensor<float>> xs = ws.sources(SplitId::val);
    const lasdiag::LinearityReport rep =
        lasdiag::run_linearity_suite(ws.bundle_full(), xs, /*pairs_per_subject=*/5,
                                     /*steps=*/10, /*seed=*/5);
    Outcome o;
    o.pass = rep.pcc_mean >= 0.99 && rep.mse_mean <= 5e-3 && rep.skipped == 0;
    o.detail = strf("mean PCC %.4f (bar 0.99), mean path MSE %.5f (bar 0.005) over %d pairs",
                    rep.pcc_mean, rep.mse_mean, rep.pairs);
    return o;
}

Outcome check_m_trend(Workspace& ws) {
    if (!ws.test_la16) ws.test_la16 = ws.predict(ws.bundle_full(), SplitId::test, true, 16);
    if (!ws.test_la1) ws.test_la1 = ws.predict(ws.bundle_full(), SplitId::test, true, 1);
    const ImgStats s16 = ws.image_stats(*ws.test_la16, SplitId::test);
    const ImgStats s1 = ws.image_stats(*ws.test_la1, SplitId::test);
    Outcome o;
    o.pass = s16.ssim >= s1.ssim && s16.mse <= s1.mse;
    o.detail = strf("ssim %.4f (m=16) vs %.4f (m=1); mse %.5f vs %.5f", s16.ssim, s1.ssim, s16.mse,
                    s1.mse);
    return o;
}

Outcome check_estimator_equality(Workspace& ws) {
    if (!ws.test_la16) ws.test_la16 = ws.predict(ws.bundle_full(), SplitId::test, true, 16);
    if (!ws.test_ia16) ws.test_ia16 = ws.predict(ws.bundle_full(), SplitId::test, false, 16);
    const ImgStats la = ws.image_stats(*ws.test_la16, SplitId::test);
    const ImgStats ia = ws.image_stats(*ws.test_ia16, SplitId::test);
    const auto n = static_cast<std::int64_t>(ws.test_la16->preds.size());
    Outcome o;
    const double gap = std::abs(la.ssim - ia.ssim);
    const bool calls_ok =
        ws.test_la16->decoder_calls == n && ws.test_ia16->decoder_calls == 16 * n;
    o.pass = gap <= 0.01 && calls_ok;
    o.detail = strf("|ssim gap| %.4f (bar 0.01); decoder calls %lld vs %lld for %lld subjects "
                    "(1 vs 16 each)",
                    gap, static_cast<long long>(ws.test_la16->decoder_calls),
                    static_cast<long long>(ws.test_ia16->decoder_calls),
                    static_cast<long long>(n));
    return o;
}

Outcome check_ablation(Workspace& ws) {
    if (!ws.test_la16) ws.test_la16 = ws.predict(ws.bundle_full(), SplitId::test, true, 16);
    if (!ws.base_test_la1) ws.base_test_la1 = ws.predict(ws.bundle_base(), SplitId::test, true, 1);
    const ImgStats full = ws.image_stats(*ws.test_la16, SplitId::test);
    const ImgStats base = ws.image_stats(*ws.base_test_la1, SplitId::test);
    const std::vector<double> bt = ws.burden(SplitId::test);
    const metrics::SpearmanResult rho_full =
        metrics::spearman(ws.cortex_scores(*ws.test_la16), bt, 10000, mix_seed(99, 1));
    const metrics::SpearmanResult rho_base =
        metrics::spearman(ws.cortex_scores(*ws.base_test_la1), bt, 10000, mix_seed(99, 1));
    Outcome o;
    o.pass = full.ssim >= base.ssim && rho_full.rho >= rho_base.rho;
    o.detail = strf("ssim %.4f vs %.4f, cortical rho %.3f vs %.3f (full vs base); training %s%.0fs",
                    full.ssim, base.ssim, rho_full.rho, rho_base.rho,
                    ws.cached() ? "(cached) " : "", ws.train_seconds());
    o.elapsed_override = ws.train_seconds();
    return o;
}

Outcome check_performance_floor(Workspace& ws) {
    if (!ws.test_la16) ws.test_la16 = ws.predict(ws.bundle_full(), SplitId::test, true, 16);
    if (!ws.val_la16) ws.val_la16 = ws.predict(ws.bundle_full(), SplitId::val, true, 16);
    const std::vector<double> test_scores = ws.cortex_scores(*ws.test_la16);
    const std::vector<double> bt = ws.burden(SplitId::test);
    const metrics::SpearmanResult rho =
        metrics::spearman(test_scores, bt, 10000, mix_seed(99, 1));

    const double thr = metrics::select_threshold(ws.cortex_scores(*ws.val_la16),
                                                 ws.positives(SplitId::val));
    std::vector<int> calls(test_scores.size());
    for (std::size_t i = 0; i < test_scores.size(); ++i)
        calls[i] = test_scores[i] > thr ? 1 : 0;
    const double ba = metrics::balanced_accuracy(calls, ws.positives(SplitId::test));

    Outcome o;
    o.pass = rho.rho >= 0.5 && rho.p < 0.01 && ba >= 0.7;
    o.detail = strf("cortical rho %.3f (bar 0.5), p %.2g (bar 0.01), ba %.3f (bar 0.7) at "
                    "validation threshold %.4f, n=%zu",
                    rho.rho, rho.p, ba, thr, test_scores.size());
    return o;
}

// ---- determinism & persistence ------------------------------------------------

// Two identical micro-scale pipeline runs must produce byte-identical
// artifacts; a reloaded checkpoint must re-serialize to the same bytes; a
// corrupted payload must be rejected on load.
Outcome check_determinism(const std::string& work) {
    const std::string d1 = work + "/det-1";
    const std::string d2 = work + "/det-2";
    fs::remove_all(d1);
    fs::remove_all(d2);
    fs::create_directories(d1);
    fs::create_directories(d2);

    auto chain = [&](const std::string& root) {
        const std::string data = root + "/data.ccds";
        const std::string run = root + "/run";
        const std::string micro =
            "[data]\n"
            "path = " + data + "\n"
            "n = 20\nseed = 3\ngrid = 64x64\n"
            "train_fraction = 0.55\nval_fraction = 0.25\ntest_fraction = 0.20\n"
            "[vae]\nwidths = 2,2,4\nlatent_channels = 2\nepochs = 1\nbatch_size = 4\nlr = 1e-3\n"
            "kl_weight = 1e-3\nseed = 11\n"
            "[ldm]\nwidths = 2,4\nbottleneck = 8\ntemb_dim = 8\ntemb_hidden = 16\nT = 50\n"
            "beta_start = 1e-4\nbeta_end = 0.02\nepochs = 1\nbatch_size = 4\nlr = 1e-3\nseed = 12\n"
            "[controlnet]\nwisl = linear-wisl\nepochs = 1\nbatch_size = 4\nlr = 1e-3\nseed = 13\n"
            "[infer]\nsplit = val\nestimator = las\nm = 2\nsteps = 5\nseed = 7\n"
            "[evaluate]\nsplit = val\nn_perm = 500\nseed = 99\n";
        const std::string ini = root + "/micro.ini";
        io::write_file(ini, micro);
        for (const char* cmd : {"gen-data", "train-vae", "train-ldm", "train-controlnet", "infer",
                                "evaluate"}) {
            const int rc = run_command({cmd, "--config", ini, "--run", run});
            if (rc != 0) throw stage_error(strf("micro %s failed with exit %d", cmd, rc));
        }
    };
    chain(d1);
    chain(d2);

    const std::vector<std::string> files = {
        "data.ccds",
        "run/vae-source.ckpt", "run/vae-target.ckpt", "run/ldm.ckpt",
        "run/controlnet.ckpt", "run/vae-target-ft.ckpt",
        "run/loss-vae-source.csv", "run/loss-vae-target.csv", "run/loss-ldm.csv",
        "run/loss-controlnet.csv",
        "run/predictions-val.ccds", "run/scores-val.csv", "run/metrics-val.txt",
    };
    std::string mismatch;
    for (const std::string& f : files) {
        if (file_crc(d1 + "/" + f) != file_crc(d2 + "/" + f)) mismatch += f + " ";
    }

    // save -> load -> save reproduces identical bytes
    const std::string vpath = d1 + "/run/vae-source.ckpt";
    VAE<float> vae;
    const bundleio::VaeCkpt meta = bundleio::load_vae(vpath, vae);
    const std::string vcopy = d1 + "/roundtrip.ckpt";
    bundleio::save_vae(vcopy, vae, meta.cfg, meta.norm);
    const bool roundtrip_ok = file_crc(vpath) == file_crc(vcopy);

    // single corrupted payload byte must be rejected
    std::string bytes = io::read_file(vpath);
    bytes[bytes.size() - 7] = static_cast<char>(bytes[bytes.size() - 7] ^ 0x40);
    const std::string cpath = d1 + "/corrupt.ckpt";
    io::write_file(cpath, bytes);
    bool rejected = false;
    try {
        (void)ckpt::load(cpath);
    } catch (const format_error&) {
        rejected = true;
    }

    Outcome o;
    o.pass = mismatch.empty() && roundtrip_ok && rejected;
    o.detail = strf("%zu artifacts bit-identical across reruns%s%s%s",
                    files.size(), mismatch.empty() ? "" : (" (MISMATCH: " + mismatch + ")").c_str(),
                    roundtrip_ok ? "; reload re-serializes identically" : "; ROUNDTRIP DIFFERS",
                    rejected ? "; corrupted payload rejected" : "; CORRUPTION NOT DETECTED");
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    bool fresh = false;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--fresh") {
            fresh = true;
        } else {
            std::fprintf(stderr, "usage: %s [--fresh]\n", argv[0]);
            return 2;
        }
    }

    Workspace ws(fresh);
    Gate gate;
    std::printf("acceptance gate: 11 checks, work dir %s%s\n", ws.dir().c_str(),
                fresh ? " (fresh)" : "");
    std::fflush(stdout);

    gate.run(1, "conditioning is a no-op at initialization", 10.0, check_identity_at_init);
    gate.run(2, "noising/recovery round-trip", 10.0, check_roundtrip);
    gate.run(3, "latent-averaging bias law (quadratic oracle)", 60.0, check_bias_law);
    gate.run(4, "curvature trace estimate, h-independent", 30.0, check_trace_estimator);

    ws.ensure_trained();
    auto need_model = [&](const std::function<Outcome(Workspace&)>& fn) {
        return [&ws, fn]() -> Outcome {
            if (!ws.train_error().empty()) {
                return {false, "desk-scale training unavailable: " + ws.train_error(), -1.0};
            }
            return fn(ws);
        };
    };

    gate.run(5, "decoder near-linearity on trained model", 300.0, need_model(check_linearity));
    gate.run(6, "latent-averaging m-trend on test split", 600.0, need_model(check_m_trend));
    gate.run(7, "latent vs image averaging, 1 vs 16 decodes", 600.0,
             need_model(check_estimator_equality));
    gate.run(8, "image loss + averaging beat base ablation", 28800.0, need_model(check_ablation));
    gate.run(9, "end-to-end performance floor", 600.0, need_model(check_performance_floor));
    gate.run(10, "metric unit cases", 30.0, check_metric_units);
    gate.run(11, "determinism and checkpoint persistence", 60.0,
             [&] { return check_determinism(ws.dir()); });

    std::printf("result: %d/11 passed\n", 11 - gate.failures);
    return gate.failures;
}
