#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "ribsr/blocks.hpp"
#include "ribsr/tensor.hpp"
#include "ribsr/tensor_io.hpp"

namespace ribsr {

// --- losses ------------------------------------------------------------------------

template <typename T>
T l1_loss(const TensorT<T>& pred, const TensorT<T>& target) {
    detail::check_same_shape(pred, target, "l1_loss");
    T acc = T(0);
    for (std::size_t i = 0; i < pred.numel(); ++i) acc += std::abs(pred[i] - target[i]);
    return acc / static_cast<T>(pred.numel());
}

// --- image helpers -------------------------------------------------------------------

/// Mean over r x r blocks; rows are reduced first so a horizontal flip
/// commutes bit-exactly at r=2.
inline Tensor box_downsample(const Tensor& hr, int r) {
    if (hr.rank() != 3) throw DimError("box_downsample: want [H,W,C]");
    if (r < 1 || hr.dim(0) % r != 0 || hr.dim(1) % r != 0)
        throw DimError("box_downsample: dims not divisible by scale");
    const std::size_t h = hr.dim(0) / r, w = hr.dim(1) / r, c = hr.dim(2);
    Tensor lr = Tensor::zeros({h, w, c});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t cc = 0; cc < c; ++cc) {
                float acc = 0;
                for (int dy = 0; dy < r; ++dy) {
                    float row = 0;
                    for (int dx = 0; dx < r; ++dx)
                        row += hr[((y * r + dy) * hr.dim(1) + x * r + dx) * c + cc];
                    acc += row;
                }
                lr[(y * w + x) * c + cc] = acc / static_cast<float>(r * r);
            }
    return lr;
}

inline Tensor flip_horizontal(const Tensor& img) {
    if (img.rank() != 3) throw DimError("flip_horizontal: want [H,W,C]");
    const std::size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
    Tensor out = Tensor::zeros(img.dims());
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t cc = 0; cc < c; ++cc)
                out[(y * w + x) * c + cc] = img[(y * w + (w - 1 - x)) * c + cc];
    return out;
}

inline Tensor nearest_upsample_image(const Tensor& lr, int r) {
    if (lr.rank() != 3) throw DimError("nearest_upsample_image: want [H,W,C]");
    const std::size_t h = lr.dim(0), w = lr.dim(1), c = lr.dim(2);
    Tensor out = Tensor::zeros({h * r, w * r, c});
    for (std::size_t y = 0; y < h * r; ++y)
        for (std::size_t x = 0; x < w * r; ++x)
            for (std::size_t cc = 0; cc < c; ++cc)
                out[(y * w * r + x) * c + cc] = lr[((y / r) * w + x / r) * c + cc];
    return out;
}

// --- Y-channel metrics ----------------------------------------------------------------

/// Luma in the 8-bit domain from [0,1] RGB, BT.601 full-range coefficients.
/// Gray images pass through scaled by 255.
inline std::vector<float> luma_255(const Tensor& img) {
    if (img.rank() != 3 || (img.dim(2) != 3 && img.dim(2) != 1))
        throw DimError("luma: want [H,W,3] or [H,W,1], got " + format_dims(img.dims()));
    const std::size_t n = img.dim(0) * img.dim(1);
    std::vector<float> y(n);
    if (img.dim(2) == 1) {
        for (std::size_t i = 0; i < n; ++i) y[i] = 255.0f * img[i];
    } else {
        for (std::size_t i = 0; i < n; ++i)
            y[i] = 255.0f *
                   (0.299f * img[i * 3] + 0.587f * img[i * 3 + 1] + 0.114f * img[i * 3 + 2]);
    }
    return y;
}

inline Tensor crop_border(const Tensor& img, int border) {
    if (border == 0) return img;
    if (img.rank() != 3) throw DimError("crop_border: want [H,W,C]");
    const std::size_t b = static_cast<std::size_t>(border);
    if (img.dim(0) <= 2 * b || img.dim(1) <= 2 * b)
        throw DimError("crop_border: border too large for image " + format_dims(img.dims()));
    const std::size_t h = img.dim(0) - 2 * b, w = img.dim(1) - 2 * b, c = img.dim(2);
    Tensor out = Tensor::zeros({h, w, c});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t cc = 0; cc < c; ++cc)
                out[(y * w + x) * c + cc] = img[((y + b) * img.dim(1) + (x + b)) * c + cc];
    return out;
}

/// PSNR on the border-cropped Y channel, 8-bit peak. Zero MSE returns +inf.
inline double psnr_y(const Tensor& sr, const Tensor& hr, int border) {
    detail::check_same_shape(sr, hr, "psnr_y");
    const auto ys = luma_255(crop_border(sr, border));
    const auto yh = luma_255(crop_border(hr, border));
    double mse = 0;
    for (std::size_t i = 0; i < ys.size(); ++i) {
        const double d = static_cast<double>(ys[i]) - yh[i];
        mse += d * d;
    }
    mse /= static_cast<double>(ys.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(255.0 * 255.0 / mse);
}

/// SSIM on the border-cropped Y channel: 11x11 Gaussian window sigma=1.5,
/// K1=0.01, K2=0.03, L=255, mean over the valid (fully inside) positions.
inline double ssim_y(const Tensor& sr, const Tensor& hr, int border) {
    detail::check_same_shape(sr, hr, "ssim_y");
    const Tensor sc = crop_border(sr, border);
    const Tensor hc = crop_border(hr, border);
    const auto ys = luma_255(sc);
    const auto yh = luma_255(hc);
    const std::size_t h = sc.dim(0), w = sc.dim(1);
    if (h < 11 || w < 11) throw DimError("ssim_y: cropped image smaller than the 11x11 window");

    float win[11][11];
    float wsum = 0;
    for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
            const float dy = static_cast<float>(i - 5), dx = static_cast<float>(j - 5);
            win[i][j] = std::exp(-(dy * dy + dx * dx) / (2.0f * 1.5f * 1.5f));
            wsum += win[i][j];
        }
    for (auto& row : win)
        for (auto& v : row) v /= wsum;

    const double c1 = (0.01 * 255) * (0.01 * 255);
    const double c2 = (0.03 * 255) * (0.03 * 255);
    double total = 0;
    std::size_t count = 0;
    for (std::size_t y = 0; y + 11 <= h; ++y)
        for (std::size_t x = 0; x + 11 <= w; ++x) {
            double mu1 = 0, mu2 = 0, s11 = 0, s22 = 0, s12 = 0;
            for (int i = 0; i < 11; ++i)
                for (int j = 0; j < 11; ++j) {
                    const double a = ys[(y + i) * w + x + j];
                    const double b = yh[(y + i) * w + x + j];
                    const double wv = win[i][j];
                    mu1 += wv * a;
                    mu2 += wv * b;
                    s11 += wv * a * a;
                    s22 += wv * b * b;
                    s12 += wv * a * b;
                }
            const double var1 = s11 - mu1 * mu1;
            const double var2 = s22 - mu2 * mu2;
            const double cov = s12 - mu1 * mu2;
            total += ((2 * mu1 * mu2 + c1) * (2 * cov + c2)) /
                     ((mu1 * mu1 + mu2 * mu2 + c1) * (var1 + var2 + c2));
            ++count;
        }
    return total / static_cast<double>(count);
}

struct EvalResult {
    double psnr = 0;  // mean over images; +inf propagates
    double ssim = 0;
    std::vector<std::pair<double, double>> per_image;
};

inline EvalResult evaluate_pairs(const std::vector<Tensor>& sr, const std::vector<Tensor>& hr,
                                 int border) {
    if (sr.size() != hr.size() || sr.empty())
        throw DimError("evaluate_pairs: need equal non-empty image lists");
    EvalResult res;
    for (std::size_t i = 0; i < sr.size(); ++i) {
        const double p = psnr_y(sr[i], hr[i], border);
        const double s = ssim_y(sr[i], hr[i], border);
        res.per_image.emplace_back(p, s);
        res.psnr += p;
        res.ssim += s;
    }
    res.psnr /= static_cast<double>(sr.size());
    res.ssim /= static_cast<double>(sr.size());
    return res;
}

// --- synthetic dataset -----------------------------------------------------------------

struct SRPair {
    Tensor hr;  // [S,S,3] in [0,1]
    Tensor lr;  // [S/r,S/r,3]
};

/// License-free deterministic data: smooth random low-frequency fields plus
/// repeated stripe patterns (the repeated-structure case window attention is
/// meant to exploit), box-downsampled for the LR side.
inline std::vector<SRPair> make_synthetic_dataset(int count, int hr_size, int scale,
                                                  std::uint64_t seed) {
    if (hr_size % scale != 0) throw ConfigError("synthetic dataset: hr_size % scale != 0");
    std::vector<SRPair> out;
    out.reserve(count);
    Rng rng(seed);
    const std::size_t s = static_cast<std::size_t>(hr_size);
    for (int img = 0; img < count; ++img) {
        Tensor hr = Tensor::zeros({s, s, 3});
        // smooth base: three low-frequency waves per channel
        float fy[3][3], fx[3][3], ph[3][3], amp[3][3];
        for (int c = 0; c < 3; ++c)
            for (int k = 0; k < 3; ++k) {
                fy[c][k] = static_cast<float>(rng.uniform(0.3, 3.0));
                fx[c][k] = static_cast<float>(rng.uniform(0.3, 3.0));
                ph[c][k] = static_cast<float>(rng.uniform(0.0, 6.283185307));
                amp[c][k] = static_cast<float>(rng.uniform(0.05, 0.2));
            }
        // stripes: one shared direction and period per image
        const float sdir = static_cast<float>(rng.uniform(0.0, 3.14159265));
        const float period = static_cast<float>(rng.uniform(4.0, 12.0));
        const float sphase = static_cast<float>(rng.uniform(0.0, 6.283185307));
        const float samp = static_cast<float>(rng.uniform(0.1, 0.25));
        const float cs = std::cos(sdir), sn = std::sin(sdir);
        for (std::size_t y = 0; y < s; ++y)
            for (std::size_t x = 0; x < s; ++x) {
                const float t = (cs * x + sn * y) * 6.2831853f / period + sphase;
                const float stripe = samp * (std::sin(t) > 0 ? 1.0f : -1.0f);
                for (int c = 0; c < 3; ++c) {
                    float v = 0.5f + stripe;
                    for (int k = 0; k < 3; ++k)
                        v += amp[c][k] * std::sin(6.2831853f * (fy[c][k] * y + fx[c][k] * x) /
                                                      static_cast<float>(s) +
                                                  ph[c][k]);
                    hr[(y * s + x) * 3 + c] = std::min(1.0f, std::max(0.0f, v));
                }
            }
        out.push_back({hr, box_downsample(hr, scale)});
    }
    return out;
}

// --- training ----------------------------------------------------------------------------

struct TrainConfig {
    int patch = 16;   // LR patch side
    int batch = 4;
    int steps = 300;
    double lr = 2e-4;
    std::vector<int> milestones;  // steps at which lr *= gamma
    double gamma = 0.5;
    std::uint64_t seed = 7;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double weight_decay = 0.0;

    void validate() const {
        if (patch < 1 || batch < 1 || steps < 0) throw ConfigError("train config: bad sizes");
        for (std::size_t i = 1; i < milestones.size(); ++i)
            if (milestones[i] <= milestones[i - 1])
                throw ConfigError("train config: milestones must be strictly increasing");
        if (!milestones.empty() && milestones.back() >= steps)
            throw ConfigError("train config: milestones must be < steps");
    }

    static TrainConfig from_kv(const std::map<std::string, std::string>& kv) {
        using namespace kv_detail;
        TrainConfig c;
        c.patch = get_int(kv, "patch", c.patch);
        c.batch = get_int(kv, "batch", c.batch);
        c.steps = get_int(kv, "steps", c.steps);
        c.lr = get_double(kv, "lr", c.lr);
        if (kv.count("milestones"))
            c.milestones = get_int_list(kv, "milestones", c.milestones);
        c.gamma = get_double(kv, "gamma", c.gamma);
        c.seed = static_cast<std::uint64_t>(get_int(kv, "seed", static_cast<int>(c.seed)));
        c.validate();
        return c;
    }
};

struct LossPoint {
    int step = 0;
    double loss = 0;
    double lr = 0;
};

/// Adam-style moment state for one parameter set.
struct AdamState {
    std::map<std::string, Tensor> m, v;
    std::int64_t t = 0;
};

inline void adam_step(ParamStore<float>& params, const std::map<std::string, Tensor>& grads,
                      AdamState& state, const TrainConfig& cfg, double lr_now) {
    state.t += 1;
    const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
    const float bc1 = 1.0f - std::pow(b1, static_cast<float>(state.t));
    const float bc2 = 1.0f - std::pow(b2, static_cast<float>(state.t));
    for (auto& [name, p] : params) {
        const Tensor& g = grads.at(name);
        auto mit = state.m.find(name);
        if (mit == state.m.end()) {
            state.m[name] = Tensor::zeros(p.dims());
            state.v[name] = Tensor::zeros(p.dims());
            mit = state.m.find(name);
        }
        Tensor& m = mit->second;
        Tensor& v = state.v[name];
        for (std::size_t i = 0; i < p.numel(); ++i) {
            float gi = g[i];
            if (cfg.weight_decay != 0.0) gi += static_cast<float>(cfg.weight_decay) * p[i];
            m[i] = b1 * m[i] + (1.0f - b1) * gi;
            v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
            const float mhat = m[i] / bc1;
            const float vhat = v[i] / bc2;
            p[i] -= static_cast<float>(lr_now) * mhat / (std::sqrt(vhat) +
                                                         static_cast<float>(cfg.eps));
        }
    }
}

/// One forward/backward/update on a batch of (lr, hr) patch tensors
/// [B,p,p,3] / [B,rp,rp,3]. Returns the batch L1 loss.
inline double train_step(ParamStore<float>& params, const SSTConfig& model_cfg,
                         const TrainConfig& train_cfg, AdamState& state, const Tensor& lr_batch,
                         const Tensor& hr_batch, double lr_now) {
    Tape<float> tape;
    std::map<std::string, Var<float>> pv;
    for (auto& [name, t] : params) pv[name] = tape.param(name, t);
    ForwardOptions<float> opt;
    Var<float> pred = ad_sst_forward(tape, tape.leaf(lr_batch), model_cfg, pv, opt);
    Var<float> loss = ad_l1_loss(tape, pred, tape.leaf(hr_batch));
    const double lv = static_cast<double>(tape.val(loss)[0]);
    auto grads = tape.backward(loss);
    adam_step(params, grads, state, train_cfg, lr_now);
    return lv;
}

/// Deterministic single-thread loop: seeded patch sampler, x0.5 lr at each
/// milestone, loss recorded per step. Aborts on a non-finite loss.
inline std::vector<LossPoint> train_loop(ParamStore<float>& params, const SSTConfig& model_cfg,
                                         const TrainConfig& train_cfg,
                                         const std::vector<SRPair>& data) {
    model_cfg.validate();
    train_cfg.validate();
    if (data.empty()) throw ConfigError("train_loop: empty dataset");
    const int r = model_cfg.scale;
    const int p = train_cfg.patch;
    for (const auto& pair : data)
        if (pair.lr.dim(0) < static_cast<std::size_t>(p) ||
            pair.lr.dim(1) < static_cast<std::size_t>(p))
            throw ConfigError("train_loop: patch larger than LR image");

    Rng sampler(train_cfg.seed);
    AdamState state;
    std::vector<LossPoint> curve;
    double lr_now = train_cfg.lr;
    std::size_t next_ms = 0;
    for (int step = 0; step < train_cfg.steps; ++step) {
        if (next_ms < train_cfg.milestones.size() && step == train_cfg.milestones[next_ms]) {
            lr_now *= train_cfg.gamma;
            ++next_ms;
        }
        const std::size_t b = static_cast<std::size_t>(train_cfg.batch);
        Tensor lr_batch = Tensor::zeros({b, static_cast<std::size_t>(p),
                                         static_cast<std::size_t>(p), 3});
        Tensor hr_batch = Tensor::zeros({b, static_cast<std::size_t>(r * p),
                                         static_cast<std::size_t>(r * p), 3});
        for (std::size_t bi = 0; bi < b; ++bi) {
            const auto& pair = data[static_cast<std::size_t>(
                sampler.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1))];
            const std::size_t lh = pair.lr.dim(0), lw = pair.lr.dim(1);
            const std::size_t oy = static_cast<std::size_t>(
                sampler.uniform_int(0, static_cast<std::int64_t>(lh) - p));
            const std::size_t ox = static_cast<std::size_t>(
                sampler.uniform_int(0, static_cast<std::int64_t>(lw) - p));
            for (int y = 0; y < p; ++y)
                for (int x = 0; x < p; ++x)
                    for (int c = 0; c < 3; ++c)
                        lr_batch[((bi * p + y) * p + x) * 3 + c] =
                            pair.lr[((oy + y) * lw + ox + x) * 3 + c];
            const std::size_t hw = pair.hr.dim(1);
            for (int y = 0; y < r * p; ++y)
                for (int x = 0; x < r * p; ++x)
                    for (int c = 0; c < 3; ++c)
                        hr_batch[((bi * r * p + y) * r * p + x) * 3 + c] =
                            pair.hr[((oy * r + y) * hw + ox * r + x) * 3 + c];
        }
        const double lv =
            train_step(params, model_cfg, train_cfg, state, lr_batch, hr_batch, lr_now);
        if (!std::isfinite(lv))
            throw NumericError("train_loop: non-finite loss at step " + std::to_string(step));
        curve.push_back({step, lv, lr_now});
    }
    return curve;
}

inline void write_loss_csv(const std::string& path, const std::vector<LossPoint>& curve) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for write: " + path);
    f << "step,loss,lr\n";
    for (const auto& pt : curve) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g\n", pt.step, pt.loss, pt.lr);
        f << buf;
    }
}

// --- checkpoints ------------------------------------------------------------------------

inline void save_checkpoint(const std::string& dir, const SSTConfig& cfg,
                            const ParamStore<float>& params) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "params");
    {
        std::ofstream f(fs::path(dir) / "config.txt", std::ios::trunc);
        if (!f) throw IoError("cannot write checkpoint config in " + dir);
        f << cfg.to_kv_text();
    }
    {
        std::ofstream f(fs::path(dir) / "manifest.txt", std::ios::trunc);
        if (!f) throw IoError("cannot write checkpoint manifest in " + dir);
        for (const auto& [name, t] : params) f << name << "\n";
    }
    for (const auto& [name, t] : params)
        save_tensor((fs::path(dir) / "params" / (name + ".ribt")).string(), t);
}

struct Checkpoint {
    SSTConfig cfg;
    ParamStore<float> params;
};

/// Warm start: copy every checkpoint tensor whose name and shape match into
/// `params` (scale-dependent tensors like the upsampler keep their fresh
/// init). Returns the number of tensors copied.
inline std::size_t warm_start_from(ParamStore<float>& params, const ParamStore<float>& ckpt) {
    std::size_t copied = 0;
    for (auto& [name, t] : params) {
        auto it = ckpt.find(name);
        if (it != ckpt.end() && it->second.dims() == t.dims()) {
            t = it->second;
            ++copied;
        }
    }
    return copied;
}

inline Checkpoint load_checkpoint(const std::string& dir) {
    namespace fs = std::filesystem;
    Checkpoint ck;
    ck.cfg = SSTConfig::from_kv(parse_kv_file((fs::path(dir) / "config.txt").string()));
    std::ifstream mf(fs::path(dir) / "manifest.txt");
    if (!mf) throw IoError("cannot read checkpoint manifest in " + dir);
    std::string name;
    while (std::getline(mf, name)) {
        if (name.empty()) continue;
        ck.params[name] =
            load_tensor<float>((fs::path(dir) / "params" / (name + ".ribt")).string());
    }
    if (ck.params.empty()) throw FormatError("checkpoint manifest lists no parameters: " + dir);
    return ck;
}

}  // namespace ribsr
