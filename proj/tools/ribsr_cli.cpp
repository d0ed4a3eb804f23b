// Command-line front end: verification suites, attention benchmarks,
// desk-scale training/inference, bias fitting and bias visualization.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "ribsr/bench.hpp"
#include "ribsr/blocks.hpp"
#include "ribsr/ppm.hpp"
#include "ribsr/report.hpp"
#include "ribsr/train_eval.hpp"
#include "ribsr/verify.hpp"

namespace {

using namespace ribsr;

std::uint64_t seed_override(std::uint64_t fallback) {
    if (const char* env = std::getenv("RIB_SEED")) {
        try {
            return std::stoull(env);
        } catch (...) {
            throw ConfigError(std::string("RIB_SEED is not an integer: ") + env);
        }
    }
    return fallback;
}

int cmd_verify(bool use_f64, bool break_eq6, const std::string& out_path) {
    VerifyOptions opt;
    opt.use_f64 = use_f64;
    opt.break_eq6 = break_eq6;
    auto cases = run_verify_suites(opt);

    std::printf("%-28s %-6s %-12s %-12s %s\n", "suite", "state", "metric", "tolerance",
                "detail");
    bool all_pass = true;
    std::vector<std::string> lines;
    for (const auto& c : cases) {
        all_pass = all_pass && c.pass;
        std::printf("%-28s %-6s %-12.3e %-12.3e %s\n", c.name.c_str(),
                    c.pass ? "pass" : "FAIL", c.metric, c.tolerance, c.detail.c_str());
        Record rec;
        rec.put("suite", c.name)
            .put("pass", std::string(c.pass ? "1" : "0"))
            .put("metric", c.metric)
            .put("tolerance", c.tolerance)
            .put("dtype", std::string(use_f64 ? "f64" : "f32"));
        lines.push_back(rec.line());
    }
    if (!out_path.empty()) {
        std::ofstream f(out_path, std::ios::trunc);
        if (!f) throw IoError("cannot write " + out_path);
        for (const auto& l : lines) f << l << "\n";
    } else {
        for (const auto& l : lines) std::printf("%s\n", l.c_str());
    }
    std::printf("verify: %s\n", all_pass ? "all suites passed" : "FAILURES PRESENT");
    return all_pass ? 0 : 1;
}

int cmd_bench(const std::vector<int>& ns, const std::string& bias, const std::string& kernel,
              int heads, int d_head, int rank, int tile, int runs, int threads, int windows,
              const std::string& out_path) {
    std::vector<std::string> lines;
    for (int n : ns) {
        BenchCaseSpec spec;
        spec.id = std::string(kernel) + "_" + bias + "_n" + std::to_string(n);
        spec.n = n;
        spec.heads = heads;
        spec.d_head = d_head;
        spec.rank = rank;
        spec.bias = bias_from_string(bias);
        spec.kernel = kernel_from_string(kernel);
        spec.tile = tile;
        spec.runs = runs;
        spec.threads = threads;
        spec.windows = windows;
        if (spec.kernel == KernelKind::naive && n > 8192) {
            std::fprintf(stderr,
                         "bench: skipping naive at N=%d (score matrix would be huge)\n", n);
            continue;
        }
        auto res = bench_attention(spec);
        if (!res.thread_consistent) {
            std::fprintf(stderr, "bench: multi-thread result mismatch at N=%d\n", n);
            return 1;
        }
        auto rec = bench_record(res);
        lines.push_back(rec.line());
        std::printf("%s\n", lines.back().c_str());
    }
    if (!out_path.empty()) {
        std::ofstream f(out_path, std::ios::trunc);
        if (!f) throw IoError("cannot write " + out_path);
        for (const auto& l : lines) f << l << "\n";
    }
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
    auto kv = parse_kv_file(config_path);
    SSTConfig cfg = SSTConfig::from_kv(kv);
    TrainConfig tc = TrainConfig::from_kv(kv);
    tc.seed = seed_override(tc.seed);
    const int images = kv_detail::get_int(kv, "images", 200);
    const int image_size = kv_detail::get_int(kv, "image_size", 32);
    const std::uint64_t data_seed =
        static_cast<std::uint64_t>(kv_detail::get_int(kv, "data_seed", 1234));

    auto data = make_synthetic_dataset(images, image_size, cfg.scale, data_seed);
    Rng init_rng(tc.seed);
    auto params = init_sst_params<float>(cfg, init_rng);
    if (kv.count("init_ckpt")) {
        auto warm = load_checkpoint(kv.at("init_ckpt"));
        const std::size_t copied = warm_start_from(params, warm.params);
        std::printf("warm start: %zu/%zu tensors from %s\n", copied, params.size(),
                    kv.at("init_ckpt").c_str());
    }
    std::printf("training: %lld parameters, %d steps, %d images\n",
                static_cast<long long>(param_count(params)), tc.steps, images);
    auto curve = train_loop(params, cfg, tc, data);

    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    save_checkpoint(out_dir, cfg, params);
    write_loss_csv((fs::path(out_dir) / "loss.csv").string(), curve);
    if (!curve.empty())
        std::printf("loss: first %.6f last %.6f (curve in %s/loss.csv)\n", curve.front().loss,
                    curve.back().loss, out_dir.c_str());
    std::printf("checkpoint written to %s\n", out_dir.c_str());
    return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& in_path, int scale,
              const std::string& out_path, const std::string& ref_path) {
    auto ck = load_checkpoint(ckpt);
    if (scale != 0 && scale != ck.cfg.scale)
        throw ConfigError("infer: --scale " + std::to_string(scale) +
                          " does not match checkpoint scale " + std::to_string(ck.cfg.scale));
    Tensor img = load_ppm(in_path);
    if (img.dim(2) != 3) throw ConfigError("infer: need a color (P6) input image");
    Tensor batch = img.reshaped({1, img.dim(0), img.dim(1), 3});

    PosTokenCache cache;
    ForwardOptions<float> opt;
    opt.use_cache = true;
    opt.cache = &cache;
    Tensor out = sst_forward(batch, ck.cfg, ck.params, opt);
    Tensor sr = out.reshaped({out.dim(1), out.dim(2), 3});
    for (std::size_t i = 0; i < sr.numel(); ++i)
        sr[i] = std::min(1.0f, std::max(0.0f, sr[i]));
    if (!out_path.empty()) save_ppm(out_path, sr);
    std::printf("inferred %zux%zu -> %zux%zu%s%s\n", img.dim(1), img.dim(0), sr.dim(1),
                sr.dim(0), out_path.empty() ? "" : ", wrote ", out_path.c_str());
    if (!ref_path.empty()) {
        Tensor ref = load_ppm(ref_path);
        const double p = psnr_y(sr, ref, ck.cfg.scale);
        const double s = ssim_y(sr, ref, ck.cfg.scale);
        std::printf("psnr_y=%.4f ssim_y=%.6f (border crop %d)\n", p, s, ck.cfg.scale);
    }
    return 0;
}

int cmd_fit_rpb(int m, int rank, int steps, double lr, int heads, std::uint64_t seed,
                const std::string& out_path) {
    seed = seed_override(seed);
    // smooth Gaussian-bump target over relative offsets
    const int side = 2 * m - 1;
    Tensor table = Tensor::zeros({static_cast<std::size_t>(heads),
                                  static_cast<std::size_t>(side * side)});
    for (int h = 0; h < heads; ++h) {
        const float sigma = 1.5f + 0.5f * h;
        for (int dy = -(m - 1); dy <= m - 1; ++dy)
            for (int dx = -(m - 1); dx <= m - 1; ++dx)
                table[h * side * side + (dy + m - 1) * side + dx + m - 1] =
                    std::exp(-(dy * dy + dx * dx) / (2.0f * sigma * sigma));
    }
    auto target = make_rpb_table<float>(m, heads, table);
    Rng rng(seed);
    auto p0 = init_rib_params<float>(6, 32, rank, heads, rng);
    auto res = fit_rib_to_rpb(target, p0, steps, lr);
    Record rec;
    rec.put("op", std::string("fit-rpb"))
        .put("m", static_cast<std::int64_t>(m))
        .put("rank", static_cast<std::int64_t>(rank))
        .put("heads", static_cast<std::int64_t>(heads))
        .put("steps", static_cast<std::int64_t>(steps))
        .put("lr", lr)
        .put("final_mse", res.final_mse);
    std::printf("%s\n", rec.line().c_str());
    if (!out_path.empty()) {
        std::ofstream f(out_path, std::ios::trunc);
        if (!f) throw IoError("cannot write " + out_path);
        f << "step,mse\n";
        for (std::size_t i = 0; i < res.curve.size(); ++i)
            f << i << "," << res.curve[i] << "\n";
    }
    return 0;
}

int cmd_viz_bias(const std::string& ckpt, int layer, int head, const std::string& out_csv) {
    auto ck = load_checkpoint(ckpt);
    if (ck.cfg.bias != BiasKind::rib)
        throw ConfigError("viz-bias: checkpoint does not use the rib bias");
    const int total_layers = ck.cfg.blocks * ck.cfg.layers;
    if (layer < 0 || layer >= total_layers)
        throw ConfigError("viz-bias: layer index out of range [0," +
                          std::to_string(total_layers) + ")");
    if (head < 0 || head >= ck.cfg.heads) throw ConfigError("viz-bias: head index out of range");
    const int b = layer / ck.cfg.layers, l = layer % ck.cfg.layers;
    const std::string lp = "b" + std::to_string(b) + ".l" + std::to_string(l) + ".";

    RIBParamsT<float> rp;
    rp.bands = ck.cfg.fourier_bands;
    rp.hidden = ck.cfg.hidden;
    rp.rank = ck.cfg.rank_at(l);
    rp.heads = ck.cfg.heads;
    rp.w_h = ck.params.at(lp + "rib.wh");
    rp.b_h = ck.params.at(lp + "rib.bh");
    rp.w_pq = ck.params.at(lp + "rib.wpq");
    rp.w_pk = ck.params.at(lp + "rib.wpk");

    const int m = ck.cfg.window_at(l);
    auto geom = make_window_geometry<float>(m);
    auto [qp, kp] = rib_positional_tokens(geom, rp);
    const std::size_t n = static_cast<std::size_t>(geom.n);
    const std::size_t r = static_cast<std::size_t>(rp.rank);
    Tensor sp = Tensor::zeros({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            float acc = 0;
            for (std::size_t d = 0; d < r; ++d)
                acc += qp[(head * n + i) * r + d] * kp[(head * n + j) * r + d];
            sp.at2(i, j) = acc / std::sqrt(static_cast<float>(rp.rank));
        }
    Tensor offsets = bias_by_offset(sp, m);

    std::ofstream f(out_csv, std::ios::trunc);
    if (!f) throw IoError("cannot write " + out_csv);
    f << "dy,dx,mean_bias\n";
    const int side = 2 * m - 1;
    for (int dy = -(m - 1); dy <= m - 1; ++dy)
        for (int dx = -(m - 1); dx <= m - 1; ++dx) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%d,%d,%.9g\n", dy, dx,
                          static_cast<double>(offsets[(dy + m - 1) * side + dx + m - 1]));
            f << buf;
        }
    std::printf("wrote %d offsets for layer %d head %d (M=%d) to %s\n", side * side, layer,
                head, m, out_csv.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"windowed attention with rank-factorized implicit positional bias"};
    app.require_subcommand(1);

    auto* verify = app.add_subcommand("verify", "run the equivalence and gradient suites");
    bool use_f64 = false, break_eq6 = false;
    std::string verify_out;
    verify->add_flag("--f64", use_f64, "run at double precision with tighter tolerances");
    verify->add_flag("--break-eq6", break_eq6,
                     "fault injection: perturb one route of the score decomposition");
    verify->add_option("--out", verify_out, "write machine-readable records to this file");

    auto* bench = app.add_subcommand("bench", "benchmark the attention kernels");
    std::vector<int> bench_n{256, 1024, 4096};
    std::string bench_bias = "none", bench_kernel = "streaming", bench_out;
    int bench_heads = 1, bench_dhead = 32, bench_rank = 16, bench_tile = 64, bench_runs = 5,
        bench_threads = 1, bench_windows = 1;
    bench->add_option("--n", bench_n, "token counts per window");
    bench->add_option("--bias", bench_bias, "none|rpb|rope|rib");
    bench->add_option("--kernel", bench_kernel, "naive|streaming");
    bench->add_option("--heads", bench_heads, "attention heads");
    bench->add_option("--dhead", bench_dhead, "content dim per head");
    bench->add_option("--rank", bench_rank, "positional rank (rib)");
    bench->add_option("--tile", bench_tile, "streaming key tile");
    bench->add_option("--runs", bench_runs, "timed runs per case (median, >= 5)");
    bench->add_option("--threads", bench_threads, "window-parallel workers");
    bench->add_option("--windows", bench_windows, "windows per run");
    bench->add_option("--out", bench_out, "write records to this file");

    auto* train = app.add_subcommand("train", "train on the synthetic dataset");
    std::string train_config, train_out = "ckpt";
    train->add_option("--config", train_config, "key=value config file")->required();
    train->add_option("--out", train_out, "output directory");

    auto* infer = app.add_subcommand("infer", "super-resolve a PPM image");
    std::string infer_ckpt, infer_in, infer_out, infer_ref;
    int infer_scale = 0;
    infer->add_option("--ckpt", infer_ckpt, "checkpoint directory")->required();
    infer->add_option("--in", infer_in, "input PPM (P6)")->required();
    infer->add_option("--scale", infer_scale, "expected upscale factor (checked)");
    infer->add_option("--out", infer_out, "output PPM path");
    infer->add_option("--ref", infer_ref, "ground-truth PPM for PSNR/SSIM");

    auto* fit = app.add_subcommand("fit-rpb", "fit the implicit bias to a smooth offset table");
    int fit_m = 8, fit_rank = 16, fit_steps = 2000, fit_heads = 1;
    double fit_lr = 0.1;
    std::uint64_t fit_seed = 7;
    std::string fit_out;
    fit->add_option("--m", fit_m, "window side")->required();
    fit->add_option("--rank", fit_rank, "factorization rank")->required();
    fit->add_option("--steps", fit_steps, "gradient-descent steps")->required();
    fit->add_option("--lr", fit_lr, "learning rate");
    fit->add_option("--heads", fit_heads, "heads");
    fit->add_option("--seed", fit_seed, "init seed");
    fit->add_option("--out", fit_out, "write the mse curve CSV here");

    auto* viz = app.add_subcommand("viz-bias", "offset-averaged bias table as CSV");
    std::string viz_ckpt, viz_out;
    int viz_layer = 0, viz_head = 0;
    viz->add_option("--ckpt", viz_ckpt, "checkpoint directory")->required();
    viz->add_option("--layer", viz_layer, "global layer index (block*layers + layer)");
    viz->add_option("--head", viz_head, "head index");
    viz->add_option("--out", viz_out, "output CSV path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (verify->parsed()) return cmd_verify(use_f64, break_eq6, verify_out);
        if (bench->parsed())
            return cmd_bench(bench_n, bench_bias, bench_kernel, bench_heads, bench_dhead,
                             bench_rank, bench_tile, bench_runs, bench_threads, bench_windows,
                             bench_out);
        if (train->parsed()) return cmd_train(train_config, train_out);
        if (infer->parsed())
            return cmd_infer(infer_ckpt, infer_in, infer_scale, infer_out, infer_ref);
        if (fit->parsed())
            return cmd_fit_rpb(fit_m, fit_rank, fit_steps, fit_lr, fit_heads, fit_seed, fit_out);
        if (viz->parsed()) return cmd_viz_bias(viz_ckpt, viz_layer, viz_head, viz_out);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
