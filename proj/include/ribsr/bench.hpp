#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "ribsr/attention.hpp"
#include "ribsr/report.hpp"

namespace ribsr {

// Attention-kernel benchmark: synthetic per-window Q/K/V at a given token
// count, timed over >= 5 runs (median), with the instrumented scratch peak
// and the flop counter from the kernels themselves. Wall times are the only
// unreproducible field and are labeled as such.

struct BenchCaseSpec {
    std::string id;
    int n = 1024;        // tokens per window
    int heads = 1;
    int d_head = 32;
    int rank = 16;       // rib positional width
    BiasKind bias = BiasKind::none;
    KernelKind kernel = KernelKind::streaming;
    int tile = 64;
    int runs = 5;
    int threads = 1;
    int windows = 1;     // batch of windows evaluated per run
};

struct BenchCaseResult {
    BenchCaseSpec spec;
    std::int64_t wall_ns_median = 0;
    std::int64_t peak_aux_scalars = 0;
    std::int64_t flops = 0;
    bool thread_consistent = true;  // multi-thread output bitwise equals 1-thread
};

inline BenchCaseResult bench_attention(const BenchCaseSpec& spec) {
    if (spec.runs < 5) throw ConfigError("bench: medians need >= 5 runs");
    if (spec.bias == BiasKind::rpb && spec.kernel == KernelKind::streaming)
        throw ConfigError("bench: rpb requires the naive kernel");
    Rng rng(424242);
    const std::size_t w = static_cast<std::size_t>(spec.windows);
    const std::size_t h = static_cast<std::size_t>(spec.heads);
    const std::size_t n = static_cast<std::size_t>(spec.n);
    const std::size_t dh = static_cast<std::size_t>(spec.d_head);
    const std::size_t dq = spec.bias == BiasKind::rib
                               ? dh + static_cast<std::size_t>(spec.rank)
                               : dh;

    std::vector<Tensor> qs, ks, vs;
    for (std::size_t i = 0; i < w; ++i) {
        qs.push_back(random_uniform<float>({h, n, dq}, rng, -0.5f, 0.5f));
        ks.push_back(random_uniform<float>({h, n, dq}, rng, -0.5f, 0.5f));
        vs.push_back(random_uniform<float>({h, n, dh}, rng, -0.5f, 0.5f));
    }
    Tensor bias_table;
    if (spec.bias == BiasKind::rpb) {
        const int m = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
        if (static_cast<std::size_t>(m) * m != n)
            throw ConfigError("bench: rpb needs a square token count");
        Rng brng(7);
        bias_table = rpb_bias_matrix(init_rpb_table<float>(m, spec.heads, brng));
    }

    static const std::vector<std::uint8_t> no_mask;
    auto run_once = [&](int threads, std::vector<Tensor>& outs, AttentionStats* stats) {
        outs.assign(w, Tensor());
        parallel_for(w, threads, [&](std::size_t i) {
            if (spec.kernel == KernelKind::naive) {
                auto res = attend_naive(qs[i], ks[i], vs[i], no_mask,
                                        spec.bias == BiasKind::rpb ? &bias_table : nullptr);
                outs[i] = std::move(res.out);
                if (stats && i == 0) *stats = res.stats;
            } else {
                auto res = attend_streaming(qs[i], ks[i], vs[i], no_mask, spec.tile);
                outs[i] = std::move(res.out);
                if (stats && i == 0) *stats = res.stats;
            }
        });
    };

    BenchCaseResult out;
    out.spec = spec;

    // instrumented single pass for the memory/flop columns
    AttentionStats stats;
    std::vector<Tensor> ref;
    run_once(1, ref, &stats);
    out.peak_aux_scalars = stats.peak_aux_scalars;
    out.flops = stats.flops;

    if (spec.threads > 1) {
        std::vector<Tensor> par;
        run_once(spec.threads, par, nullptr);
        for (std::size_t i = 0; i < w; ++i)
            if (!par[i].bit_equal(ref[i])) out.thread_consistent = false;
    }

    std::vector<std::int64_t> times;
    for (int r = 0; r < spec.runs; ++r) {
        std::vector<Tensor> outs;
        const auto t0 = std::chrono::steady_clock::now();
        run_once(spec.threads, outs, nullptr);
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(
            std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    out.wall_ns_median = times[times.size() / 2];
    return out;
}

inline Record bench_record(const BenchCaseResult& r) {
    const int m = static_cast<int>(std::lround(std::sqrt(static_cast<double>(r.spec.n))));
    Record rec;
    rec.put("case", r.spec.id)
        .put("n", static_cast<std::int64_t>(r.spec.n))
        .put("m", static_cast<std::int64_t>(
                      static_cast<std::size_t>(m) * m == static_cast<std::size_t>(r.spec.n) ? m
                                                                                            : 0))
        .put("heads", static_cast<std::int64_t>(r.spec.heads))
        .put("d_head", static_cast<std::int64_t>(r.spec.d_head))
        .put("rank", static_cast<std::int64_t>(r.spec.rank))
        .put("bias", to_string(r.spec.bias))
        .put("kernel", to_string(r.spec.kernel))
        .put("tile", static_cast<std::int64_t>(r.spec.tile))
        .put("runs", static_cast<std::int64_t>(r.spec.runs))
        .put("threads", static_cast<std::int64_t>(r.spec.threads))
        .put("wall_ns_median", r.wall_ns_median)
        .put("peak_aux_scalars", r.peak_aux_scalars)
        .put("flops", r.flops)
        .put("thread_consistent", std::string(r.thread_consistent ? "1" : "0"));
    return rec;
}

}  // namespace ribsr
