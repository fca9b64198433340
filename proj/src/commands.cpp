// Command-line front end: dataset generation, the three training stages,
// conditional inference, the evaluation protocol, and estimator diagnostics.
// Every command reads one layered configuration (code defaults, then an
// optional INI file, then --set overrides, then named flags) and writes its
// outputs into a run directory guarded by an advisory lock file.

#include "commands.hpp"

#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "CLI11.hpp"

#include "ldit/bundleio.hpp"
#include "ldit/checkpoint.hpp"
#include "ldit/config.hpp"
#include "ldit/controlnet.hpp"
#include "ldit/errors.hpp"
#include "ldit/inference.hpp"
#include "ldit/io.hpp"
#include "ldit/lasdiag.hpp"
#include "ldit/metrics.hpp"
#include "ldit/rng.hpp"
#include "ldit/schedule.hpp"
#include "ldit/synthdata.hpp"
#include "ldit/tensor.hpp"
#include "ldit/training.hpp"
#include "ldit/unet.hpp"
#include "ldit/vae.hpp"

namespace ldit {
namespace {

template <class... A>
std::string strf(const char* f, A... a) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, a...);
    return std::string(buf);
}

// ---- configuration -------------------------------------------------------

cfg::Config defaults() {
    cfg::Config c;
    c.set("data", "path", "data.ccds");
    c.set("data", "n", "200");
    c.set("data", "seed", "42");
    c.set("data", "grid", "64x64");
    c.set("data", "train_fraction", "0.80");
    c.set("data", "val_fraction", "0.05");
    c.set("data", "test_fraction", "0.15");

    c.set("run", "dir", "run");

    c.set("vae", "widths", "16,32,64");
    c.set("vae", "latent_channels", "4");
    c.set("vae", "epochs", "12");
    c.set("vae", "batch_size", "4");
    c.set("vae", "lr", "1e-4");
    c.set("vae", "kl_weight", "1e-3");
    c.set("vae", "seed", "11");

    c.set("ldm", "widths", "32,64");
    c.set("ldm", "bottleneck", "128");
    c.set("ldm", "temb_dim", "64");
    c.set("ldm", "temb_hidden", "128");
    c.set("ldm", "T", "1000");
    c.set("ldm", "beta_start", "1e-4");
    c.set("ldm", "beta_end", "0.02");
    c.set("ldm", "epochs", "12");
    c.set("ldm", "batch_size", "4");
    c.set("ldm", "lr", "1e-4");
    c.set("ldm", "seed", "12");

    c.set("controlnet", "wisl", "linear-wisl");
    c.set("controlnet", "epochs", "12");
    c.set("controlnet", "batch_size", "4");
    c.set("controlnet", "lr", "1e-4");
    c.set("controlnet", "seed", "13");

    c.set("infer", "split", "val");
    c.set("infer", "estimator", "las");
    c.set("infer", "m", "16");
    c.set("infer", "steps", "50");
    c.set("infer", "seed", "7");

    c.set("evaluate", "split", "val");
    c.set("evaluate", "n_perm", "10000");
    c.set("evaluate", "seed", "99");

    c.set("diagnose", "split", "val");
    c.set("diagnose", "n_subjects", "5");
    c.set("diagnose", "pairs_per_subject", "5");
    c.set("diagnose", "steps", "10");
    c.set("diagnose", "m_values", "1,2,4,8");
    c.set("diagnose", "n_mc", "16");
    c.set("diagnose", "n_ref", "64");
    c.set("diagnose", "seed", "5");
    return c;
}

Shape grid_from_string(const std::string& s) {
    std::vector<long long> dims;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        std::size_t x = s.find('x', pos);
        const std::string tok = s.substr(pos, x == std::string::npos ? x : x - pos);
        pos = x == std::string::npos ? s.size() + 1 : x + 1;
        try {
            dims.push_back(io::parse_int(tok, "data.grid"));
        } catch (const std::exception&) {
            throw config_error("config key data.grid: expected HxW or DxHxW, got '" + s + "'");
        }
    }
    if (dims.size() == 2) return Shape::grid(1, static_cast<int>(dims[0]), static_cast<int>(dims[1]));
    if (dims.size() == 3)
        return Shape::grid(static_cast<int>(dims[0]), static_cast<int>(dims[1]),
                           static_cast<int>(dims[2]));
    throw config_error("config key data.grid: expected HxW or DxHxW, got '" + s + "'");
}

SplitId split_from_name(const std::string& s, const std::string& where) {
    if (s == "train") return SplitId::train;
    if (s == "val") return SplitId::val;
    if (s == "test") return SplitId::test;
    throw config_error("config key " + where + ": expected train|val|test, got '" + s + "'");
}

std::string join_ints(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

// ---- run directory -------------------------------------------------------

// Advisory guard against two commands writing the same run directory at
// once. Created with exclusive semantics, removed on scope exit; a stale
// file after a crash must be removed by hand (the message says so).
class RunLock {
public:
    explicit RunLock(const std::string& run_dir) : path_(run_dir + "/lock") {
        std::FILE* f = std::fopen(path_.c_str(), "wx");
        if (!f) {
            throw config_error("run directory busy: " + path_ +
                               " exists; remove it if no other command is running");
        }
        std::fclose(f);
    }
    ~RunLock() { std::remove(path_.c_str()); }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::string path_;
};

std::string run_dir_of(const cfg::Config& conf, bool create) {
    const std::string run = conf.get_string("run", "dir");
    if (create) {
        std::error_code ec;
        std::filesystem::create_directories(run, ec);
        if (ec) throw config_error("cannot create run directory " + run + ": " + ec.message());
    }
    return run;
}

void write_resolved_config(const cfg::Config& conf, const std::string& run,
                           const std::string& command) {
    io::write_file(run + "/config-" + command + ".ini", conf.serialize());
}

std::string threshold_path(const std::string& run) { return run + "/threshold.txt"; }
std::string predictions_path(const std::string& run, const std::string& split) {
    return run + "/predictions-" + split + ".ccds";
}

using bundleio::require_stage_file;

// ---- shared data plumbing --------------------------------------------------

Dataset load_container(const std::string& path, const std::string& hint) {
    if (!io::file_exists(path)) {
        throw stage_error("dataset not found: " + path + "; run " + hint + " first");
    }
    return dsio::load(path);
}

struct TrainInputs {
    Dataset ds;  // standardized in place
    std::vector<const Tensor<float>*> xs, ys;  // train split, paired order
};

TrainInputs load_train_inputs(const cfg::Config& conf) {
    TrainInputs in;
    in.ds = load_container(conf.get_string("data", "path"), "gen-data");
    if (!in.ds.has_target) {
        throw config_error("training requires a paired container with targets: " +
                           conf.get_string("data", "path"));
    }
    standardize(in.ds);
    for (int i : in.ds.split_indices(SplitId::train)) {
        in.xs.push_back(&in.ds.subjects[static_cast<std::size_t>(i)].x);
        in.ys.push_back(&in.ds.subjects[static_cast<std::size_t>(i)].y);
    }
    if (in.xs.empty()) throw config_error("dataset has no training subjects");
    return in;
}

training::TrainConfig stage_train_config(const cfg::Config& conf, const std::string& sec) {
    training::TrainConfig tc;
    tc.epochs = static_cast<int>(conf.get_int(sec, "epochs"));
    tc.batch_size = static_cast<int>(conf.get_int(sec, "batch_size"));
    tc.lr = conf.get_double(sec, "lr");
    tc.seed = static_cast<std::uint64_t>(conf.get_int(sec, "seed"));
    if (sec == "vae") tc.kl_weight = conf.get_double("vae", "kl_weight");
    if (sec == "controlnet") {
        tc.wisl = training::wisl_mode_from_name(conf.get_string("controlnet", "wisl"));
    }
    tc.validate();
    return tc;
}

void load_bundle(ModelBundle& b, const cfg::Config& conf) {
    bundleio::load_bundle(b, conf.get_string("run", "dir"),
                          static_cast<int>(conf.get_int("infer", "steps")));
}

// ---- commands --------------------------------------------------------------

int cmd_gen_data(const cfg::Config& conf) {
    GenCfg g;
    g.n = static_cast<int>(conf.get_int("data", "n"));
    g.seed = static_cast<std::uint64_t>(conf.get_int("data", "seed"));
    g.grid = grid_from_string(conf.get_string("data", "grid"));
    g.f_train = conf.get_double("data", "train_fraction");
    g.f_val = conf.get_double("data", "val_fraction");
    g.f_test = conf.get_double("data", "test_fraction");

    const Dataset ds = generate_dataset(g);
    const std::string out = conf.get_string("data", "path");
    dsio::save(out, ds);

    int positives = 0;
    for (const Subject& s : ds.subjects) positives += s.positive ? 1 : 0;
    std::printf("wrote %s: %zu subjects (%d positive), grid %dx%dx%d, train/val/test %zu/%zu/%zu\n",
                out.c_str(), ds.subjects.size(), positives, ds.grid.d, ds.grid.h, ds.grid.w,
                ds.split_indices(SplitId::train).size(), ds.split_indices(SplitId::val).size(),
                ds.split_indices(SplitId::test).size());
    return 0;
}

void write_vae_loss_csv(const std::string& path, const std::vector<training::EpochLoss>& hist) {
    std::string csv = "epoch,total,recon,kl\n";
    for (std::size_t i = 0; i < hist.size(); ++i) {
        csv += std::to_string(i + 1) + "," + io::fmt_double(hist[i].total) + "," +
               io::fmt_double(hist[i].recon) + "," + io::fmt_double(hist[i].kl) + "\n";
    }
    io::write_file(path, csv);
}

int cmd_train_vae(const cfg::Config& conf) {
    const std::string run = run_dir_of(conf, true);
    RunLock lock(run);
    write_resolved_config(conf, run, "train-vae");

    TrainInputs in = load_train_inputs(conf);

    VAECfg vc;
    vc.image_channels = 1;
    {
        const std::vector<int> fallback = vc.widths;
        vc.widths = conf.get_int_list("vae", "widths", fallback);
    }
    vc.latent_channels = static_cast<int>(conf.get_int("vae", "latent_channels"));
    vc.volumetric = in.ds.grid.d > 1;
    vc.validate();

    const training::TrainConfig base = stage_train_config(conf, "vae");

    auto train_one = [&](const char* name, const std::vector<const Tensor<float>*>& vols,
                         std::uint64_t salt, const std::string& ckpt_path,
                         const NormStats& norm, const std::string& csv_path) {
        VAE<float> vae;
        vae.configure(vc);
        Rng init(mix_seed(base.seed, 0x171ull, salt));
        vae.init(init);
        training::TrainConfig tc = base;
        tc.seed = mix_seed(base.seed, salt);
        const auto hist = training::train_vae(vae, vols, tc, [&](int e, const training::EpochLoss& l) {
            std::fprintf(stderr, "  [%s] epoch %d/%d total %.6f recon %.6f kl %.6f\n", name, e + 1,
                         tc.epochs, l.total, l.recon, l.kl);
        });
        bundleio::save_vae(ckpt_path, vae, vc, norm);
        write_vae_loss_csv(csv_path, hist);
        std::printf("wrote %s (final loss %.6f over %d epochs)\n", ckpt_path.c_str(),
                    hist.back().total, tc.epochs);
    };

    train_one("source", in.xs, 1, bundleio::vae_source_path(run), in.ds.source_norm,
              run + "/loss-vae-source.csv");
    train_one("target", in.ys, 2, bundleio::vae_target_path(run), in.ds.target_norm,
              run + "/loss-vae-target.csv");
    return 0;
}

int cmd_train_ldm(const cfg::Config& conf) {
    const std::string run = run_dir_of(conf, true);
    RunLock lock(run);
    write_resolved_config(conf, run, "train-ldm");

    TrainInputs in = load_train_inputs(conf);

    VAE<float> target_vae;
    require_stage_file(bundleio::vae_target_path(run), "train-vae");
    const bundleio::VaeCkpt tv = bundleio::load_vae(bundleio::vae_target_path(run), target_vae);

    UNetCfg uc;
    uc.channels = tv.cfg.latent_channels;
    {
        const std::vector<int> fallback = uc.widths;
        uc.widths = conf.get_int_list("ldm", "widths", fallback);
    }
    uc.bottleneck = static_cast<int>(conf.get_int("ldm", "bottleneck"));
    uc.temb_dim = static_cast<int>(conf.get_int("ldm", "temb_dim"));
    uc.temb_hidden = static_cast<int>(conf.get_int("ldm", "temb_hidden"));
    uc.volumetric = in.ds.grid.d > 1;
    uc.validate();

    const int T = static_cast<int>(conf.get_int("ldm", "T"));
    const double b0 = conf.get_double("ldm", "beta_start");
    const double b1 = conf.get_double("ldm", "beta_end");
    const NoiseSchedule sched = make_linear_schedule(T, b0, b1);

    const training::TrainConfig tc = stage_train_config(conf, "ldm");

    UNet<float> unet;
    unet.configure(uc);
    Rng init(mix_seed(tc.seed, 0x171ull, 3));
    unet.init(init);

    const auto hist = training::train_ldm(unet, target_vae, in.ys, sched, tc, [&](int e, double l) {
        std::fprintf(stderr, "  [ldm] epoch %d/%d eps-mse %.6f\n", e + 1, tc.epochs, l);
    });

    bundleio::save_ldm(bundleio::ldm_path(run), unet, uc, T, b0, b1);
    std::string csv = "epoch,eps_mse\n";
    for (std::size_t i = 0; i < hist.size(); ++i) {
        csv += std::to_string(i + 1) + "," + io::fmt_double(hist[i]) + "\n";
    }
    io::write_file(run + "/loss-ldm.csv", csv);
    std::printf("wrote %s (final eps-mse %.6f over %d epochs)\n", bundleio::ldm_path(run).c_str(),
                hist.back(), tc.epochs);
    return 0;
}

int cmd_train_controlnet(const cfg::Config& conf) {
    const std::string run = run_dir_of(conf, true);
    RunLock lock(run);
    write_resolved_config(conf, run, "train-controlnet");

    TrainInputs in = load_train_inputs(conf);

    VAE<float> source_vae, target_vae;
    require_stage_file(bundleio::vae_source_path(run), "train-vae");
    bundleio::load_vae(bundleio::vae_source_path(run), source_vae);
    require_stage_file(bundleio::vae_target_path(run), "train-vae");
    const bundleio::VaeCkpt tv = bundleio::load_vae(bundleio::vae_target_path(run), target_vae);

    UNet<float> unet;
    require_stage_file(bundleio::ldm_path(run), "train-ldm");
    const NoiseSchedule sched = bundleio::load_ldm(bundleio::ldm_path(run), unet);
    const std::string frozen_ref = bundleio::unet_checksum(unet);

    const training::TrainConfig tc = stage_train_config(conf, "controlnet");

    ControlNet<float> cn;
    cn.configure(unet, tv.cfg.latent_channels);

    const auto hist = training::train_controlnet(
        cn, source_vae, target_vae, in.xs, in.ys, sched, tc,
        [&](int e, const training::WcnStepLoss& l) {
            std::fprintf(stderr, "  [controlnet] epoch %d/%d eps %.6f image %.6f total %.6f\n",
                         e + 1, tc.epochs, l.l_cn, l.l_wisl, l.l_wcn);
        });

    bundleio::save_controlnet(bundleio::controlnet_path(run), cn, tv.cfg.latent_channels,
                              training::wisl_mode_name(tc.wisl), frozen_ref);

    // the decoder may have been fine-tuned by the image-space term; the
    // inference bundle always reads this copy
    bundleio::save_vae(bundleio::vae_target_ft_path(run), target_vae, tv.cfg, tv.norm);

    std::string csv = "epoch,eps_mse,weighted_image_l1,total\n";
    for (std::size_t i = 0; i < hist.size(); ++i) {
        csv += std::to_string(i + 1) + "," + io::fmt_double(hist[i].l_cn) + "," +
               io::fmt_double(hist[i].l_wisl) + "," + io::fmt_double(hist[i].l_wcn) + "\n";
    }
    io::write_file(run + "/loss-controlnet.csv", csv);
    std::printf("wrote %s and %s (final total %.6f over %d epochs, image term %s)\n",
                bundleio::controlnet_path(run).c_str(), bundleio::vae_target_ft_path(run).c_str(),
                hist.back().l_wcn, tc.epochs, training::wisl_mode_name(tc.wisl));
    return 0;
}

int cmd_infer(const cfg::Config& conf) {
    const std::string run = run_dir_of(conf, true);
    RunLock lock(run);
    write_resolved_config(conf, run, "infer");

    const std::string split_nm = conf.get_string("infer", "split");
    const SplitId sp = split_from_name(split_nm, "infer.split");
    const std::string estimator = conf.get_string("infer", "estimator");
    if (estimator != "las" && estimator != "unbiased") {
        throw config_error("config key infer.estimator: expected las|unbiased, got '" + estimator +
                           "'");
    }
    const int m = static_cast<int>(conf.get_int("infer", "m"));
    const std::uint64_t seed = static_cast<std::uint64_t>(conf.get_int("infer", "seed"));

    const std::string in_path =
        conf.get_string("infer", "input", conf.get_string("data", "path"));
    Dataset in = load_container(in_path, "gen-data");
    if (in.intensity != "raw") {
        throw config_error("inference expects raw intensities in " + in_path);
    }

    ModelBundle bundle;
    load_bundle(bundle, conf);

    const std::vector<int> idx = in.split_indices(sp);
    if (idx.empty()) throw config_error("no subjects in split '" + split_nm + "' of " + in_path);

    Dataset out;
    out.grid = in.grid;
    out.seed = in.seed;
    out.has_masks = false;
    out.has_target = false;
    out.intensity = "raw";

    bundle.decoder_calls = 0;
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const Subject& s = in.subjects[static_cast<std::size_t>(idx[k])];
        const std::uint64_t sseed = mix_seed(seed, static_cast<std::uint64_t>(s.id));
        Subject o;
        o.id = s.id;
        o.split = s.split;
        o.burden = s.burden;
        o.positive = s.positive;
        o.x = estimator == "las" ? las_estimate(bundle, s.x, m, sseed)
                                 : unbiased_estimate(bundle, s.x, m, sseed);
        out.subjects.push_back(std::move(o));
        std::fprintf(stderr, "  [infer] %zu/%zu subject %d done\n", k + 1, idx.size(), s.id);
    }

    const std::string out_path =
        conf.get_string("infer", "out", predictions_path(run, split_nm));
    dsio::save(out_path, out);
    std::printf("wrote %s: %zu predictions (%s, m=%d, steps=%d, %lld decoder calls)\n",
                out_path.c_str(), out.subjects.size(), estimator.c_str(), m, bundle.steps,
                static_cast<long long>(bundle.decoder_calls));
    return 0;
}

int cmd_evaluate(const cfg::Config& conf) {
    const std::string run = run_dir_of(conf, true);
    RunLock lock(run);
    write_resolved_config(conf, run, "evaluate");

    const std::string split_nm = conf.get_string("evaluate", "split");
    const SplitId sp = split_from_name(split_nm, "evaluate.split");

    const Dataset gt = load_container(conf.get_string("data", "path"), "gen-data");
    if (!gt.has_target || !gt.has_masks) {
        throw config_error("evaluation needs the ground-truth container with targets and masks");
    }
    if (gt.intensity != "raw") throw config_error("evaluation expects raw intensities");

    const std::string pred_path =
        conf.get_string("evaluate", "pred", predictions_path(run, split_nm));
    if (!io::file_exists(pred_path)) {
        throw stage_error("missing " + pred_path + "; run infer --split " + split_nm + " first");
    }
    const Dataset pr = dsio::load(pred_path);
    std::unordered_map<int, std::size_t> by_id;
    for (std::size_t i = 0; i < pr.subjects.size(); ++i) by_id[pr.subjects[i].id] = i;

    std::vector<Tensor<float>> preds, gts;
    std::vector<double> burden;
    std::vector<int> positive;
    std::vector<int> ids;
    for (int i : gt.split_indices(sp)) {
        const Subject& s = gt.subjects[static_cast<std::size_t>(i)];
        auto it = by_id.find(s.id);
        if (it == by_id.end()) {
            throw format_error("predictions in " + pred_path + " miss subject " +
                               std::to_string(s.id) + "; re-run infer --split " + split_nm);
        }
        preds.push_back(pr.subjects[it->second].x);
        gts.push_back(s.y);
        burden.push_back(s.burden);
        positive.push_back(s.positive ? 1 : 0);
        ids.push_back(s.id);
    }
    if (preds.empty()) throw config_error("no subjects in split '" + split_nm + "'");

    const int n_perm = static_cast<int>(conf.get_int("evaluate", "n_perm"));
    const std::uint64_t seed = static_cast<std::uint64_t>(conf.get_int("evaluate", "seed"));
    metrics::MetricReport rep = metrics::evaluate(preds, gts, gt.cortex_mask, gt.hippo_mask,
                                                  burden, positive, 0.0, n_perm, seed);

    // threshold discipline: selected on val (and persisted), reused on test,
    // selected ad hoc (not persisted) on train
    double thr = 0.0;
    std::string thr_note;
    if (sp == SplitId::test) {
        if (!io::file_exists(threshold_path(run))) {
            throw stage_error("missing " + threshold_path(run) +
                              "; run evaluate --split val first");
        }
        thr = io::parse_double(cfg::detail::trim(io::read_file(threshold_path(run))),
                               threshold_path(run));
        thr_note = "loaded from " + threshold_path(run);
    } else {
        thr = metrics::select_threshold(rep.cortex_scores, positive);
        thr_note = "selected on " + split_nm;
        if (sp == SplitId::val) {
            io::write_file(threshold_path(run), io::fmt_double(thr) + "\n");
            thr_note += ", persisted to " + threshold_path(run);
        }
    }
    std::vector<int> calls(positive.size());
    for (std::size_t i = 0; i < calls.size(); ++i) calls[i] = rep.cortex_scores[i] > thr ? 1 : 0;
    rep.threshold = thr;
    rep.ba = metrics::balanced_accuracy(calls, positive);

    std::string txt;
    txt += strf("subjects:          %d (%s)\n", rep.n, split_nm.c_str());
    txt += strf("ssim window:       %d\n", rep.window);
    txt += strf("ssim:              %.6f +/- %.6f\n", rep.ssim_mean, rep.ssim_std);
    txt += strf("psnr:              %.4f +/- %.4f dB\n", rep.psnr_mean, rep.psnr_std);
    txt += strf("mse:               %.8f +/- %.8f\n", rep.mse_mean, rep.mse_std);
    txt += strf("cortical rho:      %.4f (perm p = %.6f, n_perm = %d)\n", rep.cortex_rho,
                rep.cortex_p, n_perm);
    txt += strf("hippocampal rho:   %.4f (perm p = %.6f)\n", rep.hippo_rho, rep.hippo_p);
    txt += strf("threshold:         %s (%s)\n", io::fmt_double(thr).c_str(), thr_note.c_str());
    txt += strf("balanced accuracy: %.4f\n", rep.ba);
    txt += "peak convention:   " + rep.peak_convention + "\n";
    io::write_file(run + "/metrics-" + split_nm + ".txt", txt);
    std::fputs(txt.c_str(), stdout);

    std::string csv = "id,cortex_score,hippo_score,burden,positive,called_positive\n";
    for (std::size_t i = 0; i < ids.size(); ++i) {
        csv += std::to_string(ids[i]) + "," + io::fmt_double(rep.cortex_scores[i]) + "," +
               io::fmt_double(rep.hippo_scores[i]) + "," + io::fmt_double(burden[i]) + "," +
               std::to_string(positive[i]) + "," + std::to_string(calls[i]) + "\n";
    }
    io::write_file(run + "/scores-" + split_nm + ".csv", csv);
    return 0;
}

int cmd_diagnose(const cfg::Config& conf) {
    const std::string run = run_dir_of(conf, true);
    RunLock lock(run);
    write_resolved_config(conf, run, "diagnose");

    const std::string split_nm = conf.get_string("diagnose", "split");
    const SplitId sp = split_from_name(split_nm, "diagnose.split");
    const Dataset ds = load_container(conf.get_string("data", "path"), "gen-data");
    if (ds.intensity != "raw") throw config_error("diagnostics expect raw intensities");

    ModelBundle bundle;
    load_bundle(bundle, conf);

    const std::vector<int> idx = ds.split_indices(sp);
    if (idx.empty()) throw config_error("no subjects in split '" + split_nm + "'");
    const int want = static_cast<int>(conf.get_int("diagnose", "n_subjects"));
    const int n_subjects = std::min<int>(want, static_cast<int>(idx.size()));
    std::vector<Tensor<float>> sources;
    for (int k = 0; k < n_subjects; ++k) {
        sources.push_back(ds.subjects[static_cast<std::size_t>(idx[static_cast<std::size_t>(k)])].x);
    }

    const int pairs = static_cast<int>(conf.get_int("diagnose", "pairs_per_subject"));
    const int steps = static_cast<int>(conf.get_int("diagnose", "steps"));
    const std::uint64_t seed = static_cast<std::uint64_t>(conf.get_int("diagnose", "seed"));

    std::fprintf(stderr, "  [diagnose] linearity: %d subjects x %d pairs, %d path steps\n",
                 n_subjects, pairs, steps);
    const lasdiag::LinearityReport lin =
        lasdiag::run_linearity_suite(bundle, sources, pairs, steps, mix_seed(seed, 0x11Aull));

    std::string lcsv = "pair,pcc,path_mse\n";
    for (std::size_t i = 0; i < lin.pcc.size(); ++i) {
        lcsv += std::to_string(i + 1) + "," + io::fmt_double(lin.pcc[i]) + "," +
                io::fmt_double(lin.path_mse[i]) + "\n";
    }
    io::write_file(run + "/diagnostics-linearity.csv", lcsv);

    const std::vector<int> fallback_m = {1, 2, 4, 8};
    const std::vector<int> m_values = conf.get_int_list("diagnose", "m_values", fallback_m);
    const int n_mc = static_cast<int>(conf.get_int("diagnose", "n_mc"));
    const int n_ref = static_cast<int>(conf.get_int("diagnose", "n_ref"));
    std::fprintf(stderr, "  [diagnose] averaging bias: m in {%s}, n_mc=%d, n_ref=%d\n",
                 join_ints(m_values).c_str(), n_mc, n_ref);
    const lasdiag::BiasReport bias = lasdiag::empirical_bias_curve(
        bundle, sources[0], m_values, n_mc, mix_seed(seed, 0xB1A5ull), n_ref);

    std::string bcsv = "m,bias_mean,se_mean,predicted_mean,bias_norm\n";
    for (const lasdiag::BiasPoint& p : bias.points) {
        bcsv += std::to_string(p.m) + "," + io::fmt_double(p.bias_mean) + "," +
                io::fmt_double(p.se_mean) + "," + io::fmt_double(p.predicted_mean) + "," +
                io::fmt_double(p.bias_norm) + "\n";
    }
    io::write_file(run + "/diagnostics-bias.csv", bcsv);

    std::string txt;
    txt += strf("latent-path linearity (%d pairs, %d skipped):\n", lin.pairs, lin.skipped);
    txt += strf("  pcc:      %.6f +/- %.6f\n", lin.pcc_mean, lin.pcc_std);
    txt += strf("  path mse: %.8f +/- %.8f\n", lin.mse_mean, lin.mse_std);
    txt += strf("averaging bias (n_mc=%d, n_ref=%d):\n", bias.n_mc, bias.n_ref);
    for (const lasdiag::BiasPoint& p : bias.points) {
        txt += strf("  m=%-3d bias %.6f +/- %.6f (curvature prediction %.6f)\n", p.m, p.bias_mean,
                    p.se_mean, p.predicted_mean);
    }
    txt += strf("  trace term mean %.6f, reference norm %.6f\n", bias.trace_mean, bias.ref_norm);
    io::write_file(run + "/diagnostics-summary.txt", txt);
    std::fputs(txt.c_str(), stdout);
    return 0;
}

// ---- argument wiring -------------------------------------------------------

// Every named flag routes a string into the layered configuration, so the
// typed accessors validate flag and file input identically.
class FlagBinder {
public:
    void add(CLI::App* sub, const std::string& flag, const std::string& section,
             const std::string& key, const std::string& desc) {
        entries_.push_back(std::make_unique<Entry>());
        Entry* e = entries_.back().get();
        e->section = section;
        e->key = key;
        e->opt = sub->add_option(flag, e->value, desc);
    }
    void apply(cfg::Config& conf) const {
        for (const auto& e : entries_) {
            if (e->opt->count() > 0) conf.set(e->section, e->key, e->value);
        }
    }

private:
    struct Entry {
        CLI::Option* opt = nullptr;
        std::string section, key, value;
    };
    std::vector<std::unique_ptr<Entry>> entries_;
};

}  // namespace

int run_command(const std::vector<std::string>& args) {
    CLI::App app{"conditional latent-diffusion image translation"};
    app.name("ldit");
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> sets;

    struct Sub {
        CLI::App* app = nullptr;
        FlagBinder flags;
        std::function<int(const cfg::Config&)> fn;
    };
    std::vector<std::unique_ptr<Sub>> subs;
    int rc = 0;

    auto make_sub = [&](const std::string& name, const std::string& desc,
                        std::function<int(const cfg::Config&)> fn) -> Sub* {
        subs.push_back(std::make_unique<Sub>());
        Sub* s = subs.back().get();
        s->app = app.add_subcommand(name, desc);
        s->fn = std::move(fn);
        s->app->add_option("--config", config_path, "INI configuration file");
        s->app->add_option("--set", sets, "override, e.g. --set ldm.epochs=20")
            ->take_all();
        s->app->callback([&rc, s, &config_path, &sets]() {
            cfg::Config conf = defaults();
            if (!config_path.empty()) {
                if (!io::file_exists(config_path)) {
                    throw config_error("config file not found: " + config_path);
                }
                conf.merge(cfg::Config::parse_file(config_path));
            }
            for (const std::string& e : sets) conf.set_entry(e);
            s->flags.apply(conf);
            rc = s->fn(conf);
        });
        return s;
    };

    {
        Sub* s = make_sub("gen-data", "generate the paired phantom dataset", cmd_gen_data);
        s->flags.add(s->app, "--n", "data", "n", "number of subjects");
        s->flags.add(s->app, "--seed", "data", "seed", "generator seed");
        s->flags.add(s->app, "--grid", "data", "grid", "HxW (planar) or DxHxW (volumetric)");
        s->flags.add(s->app, "--out", "data", "path", "output container path");
    }
    {
        Sub* s = make_sub("train-vae", "train both modality autoencoders", cmd_train_vae);
        s->flags.add(s->app, "--data", "data", "path", "dataset container");
        s->flags.add(s->app, "--run", "run", "dir", "run directory");
        s->flags.add(s->app, "--epochs", "vae", "epochs", "training epochs");
        s->flags.add(s->app, "--seed", "vae", "seed", "stage seed");
    }
    {
        Sub* s = make_sub("train-ldm", "train the unconditional latent denoiser", cmd_train_ldm);
        s->flags.add(s->app, "--data", "data", "path", "dataset container");
        s->flags.add(s->app, "--run", "run", "dir", "run directory");
        s->flags.add(s->app, "--epochs", "ldm", "epochs", "training epochs");
        s->flags.add(s->app, "--seed", "ldm", "seed", "stage seed");
    }
    {
        Sub* s = make_sub("train-controlnet",
                          "train the conditioning network (and fine-tune the target decoder)",
                          cmd_train_controlnet);
        s->flags.add(s->app, "--data", "data", "path", "dataset container");
        s->flags.add(s->app, "--run", "run", "dir", "run directory");
        s->flags.add(s->app, "--epochs", "controlnet", "epochs", "training epochs");
        s->flags.add(s->app, "--seed", "controlnet", "seed", "stage seed");
        s->flags.add(s->app, "--wisl", "controlnet", "wisl",
                     "image-space term: off | constant-isl | linear-wisl");
    }
    {
        Sub* s = make_sub("infer", "translate source volumes with a trained model", cmd_infer);
        s->flags.add(s->app, "--input", "infer", "input", "input container (defaults to data.path)");
        s->flags.add(s->app, "--data", "data", "path", "dataset container");
        s->flags.add(s->app, "--run", "run", "dir", "run directory");
        s->flags.add(s->app, "--split", "infer", "split", "train | val | test");
        s->flags.add(s->app, "--estimator", "infer", "estimator", "las | unbiased");
        s->flags.add(s->app, "--m", "infer", "m", "latents per prediction");
        s->flags.add(s->app, "--steps", "infer", "steps", "deterministic sampler steps");
        s->flags.add(s->app, "--seed", "infer", "seed", "base sampling seed");
        s->flags.add(s->app, "--out", "infer", "out", "predictions container path");
    }
    {
        Sub* s = make_sub("evaluate", "score predictions against ground truth", cmd_evaluate);
        s->flags.add(s->app, "--data", "data", "path", "ground-truth container");
        s->flags.add(s->app, "--run", "run", "dir", "run directory");
        s->flags.add(s->app, "--pred", "evaluate", "pred", "predictions container");
        s->flags.add(s->app, "--split", "evaluate", "split", "train | val | test");
        s->flags.add(s->app, "--n-perm", "evaluate", "n_perm", "permutations for rank tests");
        s->flags.add(s->app, "--seed", "evaluate", "seed", "permutation seed");
    }
    {
        Sub* s = make_sub("diagnose", "estimator bias curve and latent-path linearity probes",
                          cmd_diagnose);
        s->flags.add(s->app, "--data", "data", "path", "dataset container");
        s->flags.add(s->app, "--run", "run", "dir", "run directory");
        s->flags.add(s->app, "--split", "diagnose", "split", "train | val | test");
        s->flags.add(s->app, "--subjects", "diagnose", "n_subjects", "subjects to probe");
        s->flags.add(s->app, "--pairs", "diagnose", "pairs_per_subject", "latent pairs per subject");
        s->flags.add(s->app, "--steps", "diagnose", "steps", "interpolation grid points");
        s->flags.add(s->app, "--m-values", "diagnose", "m_values", "bias curve m values (csv)");
        s->flags.add(s->app, "--n-mc", "diagnose", "n_mc", "bias repetitions per m");
        s->flags.add(s->app, "--seed", "diagnose", "seed", "diagnostics seed");
    }

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(std::move(rev));
    } catch (const CLI::CallForHelp& e) {
        app.exit(e);
        return 0;
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const config_error& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const stage_error& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 2;
    } catch (const format_error& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return rc;
}

}  // namespace ldit
