#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "ribsr/attention.hpp"
#include "ribsr/autodiff.hpp"
#include "ribsr/conv.hpp"
#include "ribsr/posbias.hpp"
#include "ribsr/tensor.hpp"

namespace ribsr {

enum class GatingMode { cla, pwconv_only, none };

inline const char* to_string(GatingMode g) {
    switch (g) {
        case GatingMode::cla: return "cla";
        case GatingMode::pwconv_only: return "pwconv_only";
        case GatingMode::none: return "none";
    }
    return "?";
}

inline GatingMode gating_from_string(const std::string& s) {
    if (s == "cla") return GatingMode::cla;
    if (s == "pwconv_only") return GatingMode::pwconv_only;
    if (s == "none") return GatingMode::none;
    throw ConfigError("unknown gating mode: " + s);
}

// --- flat key=value config files -------------------------------------------------
//
// Grammar: one `key=value` pair per line; blank lines and lines starting with
// '#' are ignored; no whitespace inside pairs; integer lists are
// comma-separated without spaces. Doubles serialize with %.17g.

inline std::map<std::string, std::string> parse_kv_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw FormatError("config line " + std::to_string(lineno) + " has no '=': " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

inline std::map<std::string, std::string> parse_kv_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_kv_text(ss.str());
}

namespace kv_detail {

inline int get_int(const std::map<std::string, std::string>& kv, const std::string& key,
                   int fallback) {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    try {
        return std::stoi(it->second);
    } catch (...) {
        throw FormatError("config: bad integer for " + key + ": " + it->second);
    }
}

inline double get_double(const std::map<std::string, std::string>& kv, const std::string& key,
                         double fallback) {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    try {
        return std::stod(it->second);
    } catch (...) {
        throw FormatError("config: bad number for " + key + ": " + it->second);
    }
}

inline std::vector<int> get_int_list(const std::map<std::string, std::string>& kv,
                                     const std::string& key, std::vector<int> fallback) {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    std::vector<int> out;
    std::stringstream ss(it->second);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            out.push_back(std::stoi(tok));
        } catch (...) {
            throw FormatError("config: bad list entry for " + key + ": " + tok);
        }
    }
    if (out.empty()) throw FormatError("config: empty list for " + key);
    return out;
}

inline std::string join_ints(const std::vector<int>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) os << ",";
        os << v[i];
    }
    return os.str();
}

}  // namespace kv_detail

/// Full model hyperparameters. The presets mirror the published network
/// schedule table; micro() is the desk-scale instantiation used throughout
/// the tests.
struct SSTConfig {
    int dim = 180;                  // D
    int blocks = 6;
    int layers = 6;                 // per block
    std::vector<int> window_sizes{16, 32, 64, 16, 32, 64};
    int heads = 6;
    int fourier_bands = 10;         // L
    int hidden = 32;                // d_h
    std::vector<int> ranks{18, 18, 18, 34, 34, 34};  // R per layer position
    double ffn_expansion = 1.25;
    int scale = 2;                  // r
    BiasKind bias = BiasKind::rib;
    KernelKind kernel = KernelKind::streaming;
    GatingMode gating = GatingMode::cla;
    int tile = 0;                   // 0 = auto

    int window_at(int layer_index) const { return cyclic_schedule(window_sizes, layer_index); }
    int rank_at(int layer_index) const {
        return ranks[static_cast<std::size_t>(layer_index) % ranks.size()];
    }
    int d_head() const { return dim / heads; }
    int ffn_hidden() const { return static_cast<int>(ffn_expansion * dim); }

    void validate() const {
        if (dim < 1 || blocks < 1 || layers < 1 || heads < 1)
            throw ConfigError("sst config: dims/blocks/layers/heads must be >= 1");
        if (dim % heads != 0) throw ConfigError("sst config: dim not divisible by heads");
        if (window_sizes.empty() || ranks.empty())
            throw ConfigError("sst config: window/rank lists must be non-empty");
        for (int w : window_sizes)
            if (w < 1) throw ConfigError("sst config: window sizes must be >= 1");
        for (int r : ranks)
            if (r < 1) throw ConfigError("sst config: ranks must be >= 1");
        if (scale < 2 || scale > 4) throw ConfigError("sst config: scale must be 2, 3 or 4");
        if (ffn_hidden() < 1) throw ConfigError("sst config: ffn expansion too small");
        if (fourier_bands < 0) throw ConfigError("sst config: fourier bands must be >= 0");
        if (bias == BiasKind::rpb && kernel != KernelKind::naive)
            throw ConfigError("sst config: rpb requires the naive kernel");
        if (bias == BiasKind::rope && d_head() % 4 != 0)
            throw ConfigError("sst config: rope requires head dim divisible by 4");
    }

    static SSTConfig micro() {
        SSTConfig c;
        c.dim = 16;
        c.blocks = 1;
        c.layers = 3;
        c.window_sizes = {4, 8, 8};
        c.heads = 2;
        c.fourier_bands = 4;
        c.hidden = 16;
        c.ranks = {8, 8, 8};
        c.ffn_expansion = 1.25;
        c.scale = 2;
        return c;
    }

    static SSTConfig sst() { return SSTConfig(); }

    static SSTConfig sst_plus() {
        SSTConfig c;
        c.window_sizes = {16, 32, 48, 32, 48, 96};
        return c;
    }

    static SSTConfig sst_light() {
        SSTConfig c;
        c.dim = 48;
        c.blocks = 5;
        c.layers = 6;
        c.window_sizes = {8, 16, 32, 16, 32, 64};
        c.heads = 3;
        c.ranks = {16, 16, 16, 24, 24, 24};
        c.ffn_expansion = 1.5;
        return c;
    }

    static SSTConfig sst_l() {
        SSTConfig c;
        c.dim = 192;
        c.blocks = 8;
        c.ranks = {16, 16, 16, 32, 32, 32};
        c.ffn_expansion = 2.0;
        return c;
    }

    static SSTConfig from_kv(const std::map<std::string, std::string>& kv) {
        using namespace kv_detail;
        SSTConfig c;
        c.dim = get_int(kv, "dim", c.dim);
        c.blocks = get_int(kv, "blocks", c.blocks);
        c.layers = get_int(kv, "layers", c.layers);
        c.window_sizes = get_int_list(kv, "window_sizes", c.window_sizes);
        c.heads = get_int(kv, "heads", c.heads);
        c.fourier_bands = get_int(kv, "fourier_bands", c.fourier_bands);
        c.hidden = get_int(kv, "hidden", c.hidden);
        c.ranks = get_int_list(kv, "ranks", c.ranks);
        c.ffn_expansion = get_double(kv, "ffn_expansion", c.ffn_expansion);
        c.scale = get_int(kv, "scale", c.scale);
        if (kv.count("bias")) c.bias = bias_from_string(kv.at("bias"));
        if (kv.count("kernel")) c.kernel = kernel_from_string(kv.at("kernel"));
        if (kv.count("gating")) c.gating = gating_from_string(kv.at("gating"));
        c.tile = get_int(kv, "tile", c.tile);
        c.validate();
        return c;
    }

    std::string to_kv_text() const {
        std::ostringstream os;
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.17g", ffn_expansion);
        os << "dim=" << dim << "\n"
           << "blocks=" << blocks << "\n"
           << "layers=" << layers << "\n"
           << "window_sizes=" << kv_detail::join_ints(window_sizes) << "\n"
           << "heads=" << heads << "\n"
           << "fourier_bands=" << fourier_bands << "\n"
           << "hidden=" << hidden << "\n"
           << "ranks=" << kv_detail::join_ints(ranks) << "\n"
           << "ffn_expansion=" << buf << "\n"
           << "scale=" << scale << "\n"
           << "bias=" << to_string(bias) << "\n"
           << "kernel=" << to_string(kernel) << "\n"
           << "gating=" << to_string(gating) << "\n"
           << "tile=" << tile << "\n";
        return os.str();
    }
};

// --- parameter store ---------------------------------------------------------------

template <typename T>
using ParamStore = std::map<std::string, TensorT<T>>;

namespace blocks_detail {

template <typename T>
TensorT<T> fan_in_uniform(Dims dims, std::size_t fan_in, Rng& rng) {
    const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return random_uniform<T>(std::move(dims), rng, static_cast<T>(-a), static_cast<T>(a));
}

}  // namespace blocks_detail

/// Fresh parameters for a config. Draw order is fixed (shallow, blocks in
/// order with a fixed within-layer order, upsampler), so a given (config,
/// seed) always produces the same initialization.
template <typename T>
ParamStore<T> init_sst_params(const SSTConfig& cfg, Rng& rng) {
    cfg.validate();
    using blocks_detail::fan_in_uniform;
    ParamStore<T> ps;
    const std::size_t d = static_cast<std::size_t>(cfg.dim);
    ps["shallow.w"] = fan_in_uniform<T>({3, 3, 3, d}, 9 * 3, rng);
    ps["shallow.b"] = TensorT<T>::zeros({d});
    std::uint64_t rib_version = 1;
    for (int b = 0; b < cfg.blocks; ++b) {
        const std::string bp = "b" + std::to_string(b) + ".";
        for (int l = 0; l < cfg.layers; ++l) {
            const std::string lp = bp + "l" + std::to_string(l) + ".";
            ps[lp + "norm1.g"] = TensorT<T>::full({d}, T(1));
            ps[lp + "norm1.b"] = TensorT<T>::zeros({d});
            ps[lp + "attn.wq"] = fan_in_uniform<T>({d, d}, d, rng);
            ps[lp + "attn.wk"] = fan_in_uniform<T>({d, d}, d, rng);
            ps[lp + "attn.wv"] = fan_in_uniform<T>({d, d}, d, rng);
            ps[lp + "attn.wo"] = fan_in_uniform<T>({d, d}, d, rng);
            if (cfg.bias == BiasKind::rib) {
                auto rp = init_rib_params<T>(cfg.fourier_bands, cfg.hidden, cfg.rank_at(l),
                                             cfg.heads, rng);
                rp.version = rib_version++;
                ps[lp + "rib.wh"] = rp.w_h;
                ps[lp + "rib.bh"] = rp.b_h;
                ps[lp + "rib.wpq"] = rp.w_pq;
                ps[lp + "rib.wpk"] = rp.w_pk;
            } else if (cfg.bias == BiasKind::rpb) {
                const int m = cfg.window_at(l);
                const std::size_t side2 = static_cast<std::size_t>(2 * m - 1) * (2 * m - 1);
                ps[lp + "rpb.table"] = random_uniform<T>(
                    {static_cast<std::size_t>(cfg.heads), side2}, rng, T(-0.02), T(0.02));
            }
            if (cfg.gating == GatingMode::cla) {
                ps[lp + "cla.dww"] = fan_in_uniform<T>({3, 3, d}, 9, rng);
                ps[lp + "cla.dwb"] = TensorT<T>::zeros({d});
            }
            if (cfg.gating != GatingMode::none) {
                ps[lp + "cla.pww"] = fan_in_uniform<T>({d, d}, d, rng);
                ps[lp + "cla.pwb"] = TensorT<T>::zeros({d});
            }
            ps[lp + "norm2.g"] = TensorT<T>::full({d}, T(1));
            ps[lp + "norm2.b"] = TensorT<T>::zeros({d});
            const std::size_t fh = static_cast<std::size_t>(cfg.ffn_hidden());
            ps[lp + "ffn.w1"] = fan_in_uniform<T>({d, fh}, d, rng);
            ps[lp + "ffn.b1"] = TensorT<T>::zeros({fh});
            ps[lp + "ffn.dww"] = fan_in_uniform<T>({3, 3, fh}, 9, rng);
            ps[lp + "ffn.dwb"] = TensorT<T>::zeros({fh});
            ps[lp + "ffn.w2"] = fan_in_uniform<T>({fh, d}, fh, rng);
            ps[lp + "ffn.b2"] = TensorT<T>::zeros({d});
        }
        ps[bp + "conv.w"] = fan_in_uniform<T>({3, 3, d, d}, 9 * d, rng);
        ps[bp + "conv.b"] = TensorT<T>::zeros({d});
    }
    const std::size_t up_out = static_cast<std::size_t>(cfg.scale) * cfg.scale * 3;
    ps["up.w"] = fan_in_uniform<T>({3, 3, d, up_out}, 9 * d, rng);
    ps["up.b"] = TensorT<T>::zeros({up_out});
    return ps;
}

template <typename T>
std::int64_t param_count(const ParamStore<T>& ps) {
    std::int64_t n = 0;
    for (const auto& [k, t] : ps) n += static_cast<std::int64_t>(t.numel());
    return n;
}

template <typename T>
Var<T> pvar(const std::map<std::string, Var<T>>& pv, const std::string& name) {
    auto it = pv.find(name);
    if (it == pv.end()) throw ContractError("missing parameter var: " + name);
    return it->second;
}

// --- head split/merge index maps --------------------------------------------------

inline std::shared_ptr<const std::vector<std::int64_t>> split_heads_indices(std::size_t w,
                                                                            std::size_t n,
                                                                            std::size_t heads,
                                                                            std::size_t dh) {
    auto idx = std::make_shared<std::vector<std::int64_t>>(w * heads * n * dh);
    std::size_t pos = 0;
    const std::size_t d = heads * dh;
    for (std::size_t wi = 0; wi < w; ++wi)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < dh; ++c)
                    (*idx)[pos++] =
                        static_cast<std::int64_t>((wi * n + i) * d + h * dh + c);
    return idx;
}

inline std::shared_ptr<const std::vector<std::int64_t>> merge_heads_indices(std::size_t w,
                                                                            std::size_t n,
                                                                            std::size_t heads,
                                                                            std::size_t dh) {
    const std::size_t d = heads * dh;
    auto idx = std::make_shared<std::vector<std::int64_t>>(w * n * d);
    std::size_t pos = 0;
    for (std::size_t wi = 0; wi < w; ++wi)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < d; ++c) {
                const std::size_t h = c / dh, cc = c % dh;
                (*idx)[pos++] =
                    static_cast<std::int64_t>(((wi * heads + h) * n + i) * dh + cc);
            }
    return idx;
}

/// Broadcast per-layer positional tokens [heads,N,R] across W windows.
inline std::shared_ptr<const std::vector<std::int64_t>> tile_tokens_indices(std::size_t w,
                                                                            std::size_t heads,
                                                                            std::size_t n,
                                                                            std::size_t r) {
    auto idx = std::make_shared<std::vector<std::int64_t>>(w * heads * n * r);
    std::size_t pos = 0;
    for (std::size_t wi = 0; wi < w; ++wi)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < r; ++c)
                    (*idx)[pos++] = static_cast<std::int64_t>((h * n + i) * r + c);
    return idx;
}

/// Expand an RPB table var [heads,(2M-1)^2] into the dense bias [heads,N,N].
inline std::shared_ptr<const std::vector<std::int64_t>> rpb_expand_indices(int m, int heads) {
    const std::size_t n = static_cast<std::size_t>(m) * m;
    const std::size_t side2 = static_cast<std::size_t>(2 * m - 1) * (2 * m - 1);
    const auto map = rpb_index_map(m);
    auto idx = std::make_shared<std::vector<std::int64_t>>(heads * n * n);
    std::size_t pos = 0;
    for (int h = 0; h < heads; ++h)
        for (std::size_t ij = 0; ij < n * n; ++ij)
            (*idx)[pos++] = static_cast<std::int64_t>(h * side2 + map[ij]);
    return idx;
}

// --- CLA gate ----------------------------------------------------------------------

/// Gated output projection: Y = (O ⊙ G) W_o with
/// G = sigmoid(PWConv(DWConv3x3(X))) computed on the map-shaped features.
/// pwconv_only drops the depthwise stage; none makes G == 1.
template <typename T>
Var<T> ad_cla_gate(Tape<T>& tp, Var<T> x_map, Var<T> o_map, GatingMode mode, Var<T> dww,
                   Var<T> dwb, Var<T> pww, Var<T> pwb, Var<T> wo) {
    Var<T> gated = o_map;
    if (mode != GatingMode::none) {
        Var<T> pre = x_map;
        if (mode == GatingMode::cla) pre = ad_dwconv3x3(tp, pre, dww, dwb);
        Var<T> gate = ad_sigmoid(tp, ad_add_rowvec(tp, ad_matmul(tp, pre, pww), pwb));
        gated = ad_mul(tp, o_map, gate);
    }
    return ad_matmul(tp, gated, wo);
}

// --- ConvFFN -----------------------------------------------------------------------

/// Pointwise expand -> depthwise 3x3 -> GELU -> pointwise project. The 3x3
/// depthwise stage is what distinguishes this from a plain MLP mixer.
template <typename T>
Var<T> ad_conv_ffn(Tape<T>& tp, Var<T> x_map, Var<T> w1, Var<T> b1, Var<T> dww, Var<T> dwb,
                   Var<T> w2, Var<T> b2) {
    Var<T> h = ad_add_rowvec(tp, ad_matmul(tp, x_map, w1), b1);
    h = ad_gelu(tp, ad_dwconv3x3(tp, h, dww, dwb));
    return ad_add_rowvec(tp, ad_matmul(tp, h, w2), b2);
}

// --- windowed attention with positional variant --------------------------------------

template <typename T>
struct ForwardOptions {
    bool use_cache = false;
    PosTokenCacheT<T>* cache = nullptr;
    // Cache entries are keyed per layer under this version; bump it whenever
    // the parameters change (training never uses the cache).
    std::uint64_t params_version = 1;
};

/// Window-partitioned multi-head attention on a normalized feature map
/// [B,H,W,D]; returns the merged attention output map (no gating, no output
/// projection). The positional variant follows cfg.bias.
template <typename T>
Var<T> ad_windowed_attention(Tape<T>& tp, Var<T> x_map, int m, const SSTConfig& cfg,
                             int layer_index, const std::map<std::string, Var<T>>& pv,
                             const std::string& lp, const ForwardOptions<T>& opt) {
    cfg.validate();
    const TensorT<T>& xv = tp.val(x_map);
    const std::size_t b = xv.dim(0), hh = xv.dim(1), ww = xv.dim(2);
    const std::size_t d = static_cast<std::size_t>(cfg.dim);
    const std::size_t heads = static_cast<std::size_t>(cfg.heads);
    const std::size_t dh = static_cast<std::size_t>(cfg.d_head());
    const int rank = cfg.rank_at(layer_index);

    const auto info = plan_window_partition(b, hh, ww, d, m);
    const std::size_t nw = info.num_windows(), n = info.tokens();
    auto masks = window_masks(info);

    Var<T> windows = ad_gather(tp, x_map, {nw, n, d}, window_partition_indices(info));
    auto split_idx = split_heads_indices(nw, n, heads, dh);
    Var<T> qc = ad_gather(tp, ad_matmul(tp, windows, pvar(pv, lp + "attn.wq")),
                          {nw, heads, n, dh}, split_idx);
    Var<T> kc = ad_gather(tp, ad_matmul(tp, windows, pvar(pv, lp + "attn.wk")),
                          {nw, heads, n, dh}, split_idx);
    Var<T> v = ad_gather(tp, ad_matmul(tp, windows, pvar(pv, lp + "attn.wv")),
                         {nw, heads, n, dh}, split_idx);

    const T content_scale = T(1) / std::sqrt(static_cast<T>(dh));
    Var<T> q, k;
    Var<T> rpb_bias{};
    const auto geom = make_window_geometry<T>(m);
    switch (cfg.bias) {
        case BiasKind::none:
            q = ad_scale(tp, qc, content_scale);
            k = kc;
            break;
        case BiasKind::rpb:
            q = ad_scale(tp, qc, content_scale);
            k = kc;
            rpb_bias = ad_gather(tp, pvar(pv, lp + "rpb.table"), {heads, n, n},
                                 rpb_expand_indices(m, cfg.heads));
            break;
        case BiasKind::rope:
            q = ad_scale(tp, ad_rope_rotate(tp, qc, geom, make_rope_config(static_cast<int>(dh))),
                         content_scale);
            k = ad_rope_rotate(tp, kc, geom, make_rope_config(static_cast<int>(dh)));
            break;
        case BiasKind::rib: {
            Var<T> qp, kp;
            if (opt.use_cache && opt.cache) {
                RIBParamsT<T> rp;
                rp.bands = cfg.fourier_bands;
                rp.hidden = cfg.hidden;
                rp.rank = rank;
                rp.heads = cfg.heads;
                rp.w_h = tp.val(pvar(pv, lp + "rib.wh"));
                rp.b_h = tp.val(pvar(pv, lp + "rib.bh"));
                rp.w_pq = tp.val(pvar(pv, lp + "rib.wpq"));
                rp.w_pk = tp.val(pvar(pv, lp + "rib.wpk"));
                rp.version = opt.params_version * 10000 +
                             static_cast<std::uint64_t>(layer_index);
                auto cached = opt.cache->get_or_compute(geom, rp);
                qp = tp.leaf(std::move(cached.first));
                kp = tp.leaf(std::move(cached.second));
            } else {
                auto tokens = rib_positional_tokens_ad(
                    tp, geom, cfg.fourier_bands, pvar(pv, lp + "rib.wh"),
                    pvar(pv, lp + "rib.bh"), pvar(pv, lp + "rib.wpq"),
                    pvar(pv, lp + "rib.wpk"));
                qp = tokens.first;
                kp = tokens.second;
            }
            const std::size_t r = static_cast<std::size_t>(rank);
            auto tile_idx = tile_tokens_indices(nw, heads, n, r);
            Var<T> qp_t = ad_scale(tp, ad_gather(tp, qp, {nw, heads, n, r}, tile_idx),
                                   T(1) / std::sqrt(static_cast<T>(rank)));
            Var<T> kp_t = ad_gather(tp, kp, {nw, heads, n, r}, tile_idx);
            q = ad_concat_last(tp, ad_scale(tp, qc, content_scale), qp_t);
            k = ad_concat_last(tp, kc, kp_t);
            break;
        }
    }

    Var<T> o;
    if (cfg.kernel == KernelKind::naive) {  // validate() forces naive for rpb
        o = ad_attend_naive(tp, q, k, v, masks, rpb_bias);
    } else {
        o = ad_attend_streaming(tp, q, k, v, masks,
                                cfg.tile > 0 ? cfg.tile : std::min<int>(static_cast<int>(n), 64));
    }

    Var<T> merged = ad_gather(tp, o, {nw, n, d}, merge_heads_indices(nw, n, heads, dh));
    return ad_gather(tp, merged, {b, hh, ww, d}, window_reverse_indices(info));
}

// --- SST layer / block / model --------------------------------------------------------

template <typename T>
Var<T> ad_sst_layer(Tape<T>& tp, Var<T> x, const SSTConfig& cfg, int layer_index,
                    const std::map<std::string, Var<T>>& pv, const std::string& lp,
                    const ForwardOptions<T>& opt) {
    const int m = cfg.window_at(layer_index);
    const T eps = T(1e-6);

    // pre-norm attention with gated output projection
    Var<T> xn = ad_layer_norm(tp, x, pvar(pv, lp + "norm1.g"), pvar(pv, lp + "norm1.b"), eps);
    Var<T> o = ad_windowed_attention(tp, xn, m, cfg, layer_index, pv, lp, opt);
    Var<T> dww{}, dwb{}, pww{}, pwb{};
    if (cfg.gating == GatingMode::cla) {
        dww = pvar(pv, lp + "cla.dww");
        dwb = pvar(pv, lp + "cla.dwb");
    }
    if (cfg.gating != GatingMode::none) {
        pww = pvar(pv, lp + "cla.pww");
        pwb = pvar(pv, lp + "cla.pwb");
    }
    Var<T> y = ad_cla_gate(tp, xn, o, cfg.gating, dww, dwb, pww, pwb, pvar(pv, lp + "attn.wo"));
    x = ad_add(tp, x, y);

    // pre-norm ConvFFN
    Var<T> xn2 = ad_layer_norm(tp, x, pvar(pv, lp + "norm2.g"), pvar(pv, lp + "norm2.b"), eps);
    Var<T> f = ad_conv_ffn(tp, xn2, pvar(pv, lp + "ffn.w1"), pvar(pv, lp + "ffn.b1"),
                           pvar(pv, lp + "ffn.dww"), pvar(pv, lp + "ffn.dwb"),
                           pvar(pv, lp + "ffn.w2"), pvar(pv, lp + "ffn.b2"));
    return ad_add(tp, x, f);
}

template <typename T>
Var<T> ad_sst_block(Tape<T>& tp, Var<T> x, const SSTConfig& cfg,
                    const std::map<std::string, Var<T>>& pv, const std::string& bp,
                    const ForwardOptions<T>& opt) {
    Var<T> cur = x;
    for (int l = 0; l < cfg.layers; ++l)
        cur = ad_sst_layer(tp, cur, cfg, l, pv, bp + "l" + std::to_string(l) + ".", opt);
    cur = ad_conv3x3(tp, cur, pvar(pv, bp + "conv.w"), pvar(pv, bp + "conv.b"));
    return ad_add(tp, x, cur);
}

/// Full model: shallow conv, residual blocks, global skip, one-shot
/// conv + pixel-shuffle upsampler, plus the nearest-neighbor image skip.
template <typename T>
Var<T> ad_sst_forward(Tape<T>& tp, Var<T> i_lr, const SSTConfig& cfg,
                      const std::map<std::string, Var<T>>& pv, const ForwardOptions<T>& opt) {
    cfg.validate();
    const TensorT<T>& in = tp.val(i_lr);
    if (in.rank() != 4 || in.dim(3) != 3)
        throw DimError("sst_forward: want I_LR [B,H,W,3], got " + format_dims(in.dims()));
    const std::size_t b = in.dim(0), h = in.dim(1), w = in.dim(2);
    const int r = cfg.scale;

    Var<T> fs = ad_conv3x3(tp, i_lr, pvar(pv, "shallow.w"), pvar(pv, "shallow.b"));
    Var<T> x = fs;
    for (int bb = 0; bb < cfg.blocks; ++bb)
        x = ad_sst_block(tp, x, cfg, pv, "b" + std::to_string(bb) + ".", opt);
    Var<T> feat = ad_add(tp, fs, x);

    Var<T> up = ad_conv3x3(tp, feat, pvar(pv, "up.w"), pvar(pv, "up.b"));
    Var<T> sr = ad_gather(tp, up, {b, h * r, w * r, 3}, pixel_shuffle_indices(b, h, w, 3, r));
    Var<T> skip = ad_gather(tp, i_lr, {b, h * r, w * r, 3},
                            nearest_upsample_indices(b, h, w, 3, r));
    return ad_add(tp, sr, skip);
}

/// Convenience non-training forward: runs a fresh tape and returns the value.
template <typename T>
TensorT<T> sst_forward(const TensorT<T>& i_lr, const SSTConfig& cfg, const ParamStore<T>& ps,
                       const ForwardOptions<T>& opt = {}) {
    Tape<T> tape;
    std::map<std::string, Var<T>> pv;
    for (const auto& [name, t] : ps) pv[name] = tape.param(name, t);
    Var<T> out = ad_sst_forward(tape, tape.leaf(i_lr), cfg, pv, opt);
    return tape.val(out);
}

}  // namespace ribsr
