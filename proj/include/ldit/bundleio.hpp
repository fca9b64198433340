#pragma once

// Checkpoint schemas for the three trained stages and assembly of a complete
// inference bundle from a run directory. Each checkpoint carries the fields
// needed to rebuild its module without any external configuration: the
// autoencoder files embed their architecture and intensity statistics, the
// denoiser file embeds its architecture and noise schedule, and the
// conditioning file embeds the channel count, the image-term mode it was
// trained with, and a checksum of the frozen denoiser it was wired to.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ldit/checkpoint.hpp"
#include "ldit/controlnet.hpp"
#include "ldit/errors.hpp"
#include "ldit/inference.hpp"
#include "ldit/io.hpp"
#include "ldit/schedule.hpp"
#include "ldit/synthdata.hpp"
#include "ldit/unet.hpp"
#include "ldit/vae.hpp"

namespace ldit::bundleio {

namespace detail {

inline std::vector<int> ints_from_csv(const std::string& v, const std::string& what) {
    std::vector<int> out;
    std::size_t pos = 0;
    while (pos <= v.size()) {
        std::size_t comma = v.find(',', pos);
        const std::string tok = v.substr(pos, comma == std::string::npos ? comma : comma - pos);
        pos = comma == std::string::npos ? v.size() + 1 : comma + 1;
        if (!tok.empty()) out.push_back(static_cast<int>(io::parse_int(tok, what)));
    }
    if (out.empty()) throw format_error("empty integer list for " + what);
    return out;
}

inline std::string join_ints(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

}  // namespace detail

// ---- file names within a run directory ----

inline std::string vae_source_path(const std::string& run) { return run + "/vae-source.ckpt"; }
inline std::string vae_target_path(const std::string& run) { return run + "/vae-target.ckpt"; }
inline std::string vae_target_ft_path(const std::string& run) {
    return run + "/vae-target-ft.ckpt";
}
inline std::string ldm_path(const std::string& run) { return run + "/ldm.ckpt"; }
inline std::string controlnet_path(const std::string& run) { return run + "/controlnet.ckpt"; }

inline void require_stage_file(const std::string& path, const std::string& hint) {
    if (!io::file_exists(path)) {
        throw stage_error("missing " + path + "; run " + hint + " first");
    }
}

// ---- autoencoder ----

inline void save_vae(const std::string& path, VAE<float>& vae, const VAECfg& c,
                     const NormStats& norm) {
    std::map<std::string, std::string> f;
    f["image_channels"] = std::to_string(c.image_channels);
    f["widths"] = detail::join_ints(c.widths);
    f["latent_channels"] = std::to_string(c.latent_channels);
    f["volumetric"] = c.volumetric ? "1" : "0";
    f["norm_mean"] = io::fmt_double(norm.mean);
    f["norm_std"] = io::fmt_double(norm.stddev);
    ParamList<float> ps;
    vae.params("vae", ps);
    ckpt::save(path, "vae", f, ps);
}

struct VaeCkpt {
    VAECfg cfg;
    NormStats norm;
};

// Configures `vae` from the stored fields and restores its weights.
inline VaeCkpt load_vae(const std::string& path, VAE<float>& vae) {
    const ckpt::File f = ckpt::load(path);
    ckpt::expect_stage(f, "vae", path);
    VaeCkpt out;
    out.cfg.image_channels =
        static_cast<int>(io::parse_int(ckpt::field(f, "image_channels"), path));
    out.cfg.widths = detail::ints_from_csv(ckpt::field(f, "widths"), path);
    out.cfg.latent_channels =
        static_cast<int>(io::parse_int(ckpt::field(f, "latent_channels"), path));
    out.cfg.volumetric = ckpt::field(f, "volumetric") == "1";
    out.norm.mean = io::parse_double(ckpt::field(f, "norm_mean"), path);
    out.norm.stddev = io::parse_double(ckpt::field(f, "norm_std"), path);
    out.norm.present = true;
    vae.configure(out.cfg);
    ParamList<float> ps;
    vae.params("vae", ps);
    ckpt::restore(f, ps);
    return out;
}

// ---- latent denoiser ----

inline void save_ldm(const std::string& path, UNet<float>& unet, const UNetCfg& c, int T,
                     double beta_start, double beta_end) {
    std::map<std::string, std::string> f;
    f["channels"] = std::to_string(c.channels);
    f["widths"] = detail::join_ints(c.widths);
    f["bottleneck"] = std::to_string(c.bottleneck);
    f["temb_dim"] = std::to_string(c.temb_dim);
    f["temb_hidden"] = std::to_string(c.temb_hidden);
    f["volumetric"] = c.volumetric ? "1" : "0";
    f["T"] = std::to_string(T);
    f["beta_start"] = io::fmt_double(beta_start);
    f["beta_end"] = io::fmt_double(beta_end);
    ParamList<float> ps;
    unet.params("unet", ps);
    ckpt::save(path, "ldm", f, ps);
}

// Configures `unet`, restores its weights, and rebuilds the stored schedule.
inline NoiseSchedule load_ldm(const std::string& path, UNet<float>& unet) {
    const ckpt::File f = ckpt::load(path);
    ckpt::expect_stage(f, "ldm", path);
    UNetCfg c;
    c.channels = static_cast<int>(io::parse_int(ckpt::field(f, "channels"), path));
    c.widths = detail::ints_from_csv(ckpt::field(f, "widths"), path);
    c.bottleneck = static_cast<int>(io::parse_int(ckpt::field(f, "bottleneck"), path));
    c.temb_dim = static_cast<int>(io::parse_int(ckpt::field(f, "temb_dim"), path));
    c.temb_hidden = static_cast<int>(io::parse_int(ckpt::field(f, "temb_hidden"), path));
    c.volumetric = ckpt::field(f, "volumetric") == "1";
    unet.configure(c);
    ParamList<float> ps;
    unet.params("unet", ps);
    ckpt::restore(f, ps);
    const int T = static_cast<int>(io::parse_int(ckpt::field(f, "T"), path));
    const double b0 = io::parse_double(ckpt::field(f, "beta_start"), path);
    const double b1 = io::parse_double(ckpt::field(f, "beta_end"), path);
    return make_linear_schedule(T, b0, b1);
}

inline std::string unet_checksum(UNet<float>& unet) {
    ParamList<float> ps;
    unet.params("unet", ps);
    return ckpt::param_group_crc(ps);
}

// ---- conditioning network ----

inline void save_controlnet(const std::string& path, ControlNet<float>& cn, int cond_channels,
                            const std::string& wisl_mode, const std::string& frozen_ref) {
    std::map<std::string, std::string> f;
    f["cond_channels"] = std::to_string(cond_channels);
    f["wisl"] = wisl_mode;
    f["frozen_ref"] = frozen_ref;
    ParamList<float> ps;
    cn.params("cn", ps);
    ckpt::save(path, "controlnet", f, ps);
}

struct CnCkpt {
    int cond_channels = 0;
    std::string wisl;
};

// Wires `cn` to `frozen` and restores its weights. Rejects the file when the
// frozen denoiser is not the one the conditioning network was trained
// against.
inline CnCkpt load_controlnet(const std::string& path, ControlNet<float>& cn,
                              UNet<float>& frozen) {
    const ckpt::File f = ckpt::load(path);
    ckpt::expect_stage(f, "controlnet", path);
    if (ckpt::field(f, "frozen_ref") != unet_checksum(frozen)) {
        throw format_error(
            "conditioning checkpoint was trained against a different denoiser "
            "(checksum mismatch in " + path + ")");
    }
    CnCkpt out;
    out.cond_channels = static_cast<int>(io::parse_int(ckpt::field(f, "cond_channels"), path));
    out.wisl = ckpt::field(f, "wisl");
    cn.configure(frozen, out.cond_channels);
    ParamList<float> ps;
    cn.params("cn", ps);
    ckpt::restore(f, ps);
    return out;
}

// ---- full inference bundle ----

// Fills `b` in place from a run directory. The conditioning network keeps a
// pointer to b.denoiser, so the bundle must not be copied or moved afterwards.
inline void load_bundle(ModelBundle& b, const std::string& run, int steps) {
    require_stage_file(controlnet_path(run), "train-controlnet");
    require_stage_file(vae_source_path(run), "train-vae");
    require_stage_file(vae_target_ft_path(run), "train-controlnet");
    require_stage_file(ldm_path(run), "train-ldm");

    const VaeCkpt src = load_vae(vae_source_path(run), b.source_vae);
    const VaeCkpt tgt = load_vae(vae_target_ft_path(run), b.target_vae);
    b.schedule = load_ldm(ldm_path(run), b.denoiser);
    load_controlnet(controlnet_path(run), b.controlnet, b.denoiser);

    b.steps = steps;
    b.source_norm = src.norm;
    b.target_norm = tgt.norm;
    b.check();
}

}  // namespace ldit::bundleio
