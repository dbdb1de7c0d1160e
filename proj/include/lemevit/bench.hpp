#pragma once

// Single-threaded forward-only latency benchmarks on the steady clock.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lemevit/complexity.hpp"

namespace lemevit {

struct BenchOptions {
  std::size_t warmup = 10;
  std::size_t iters = 30;
  std::uint64_t seed = 0;

  /// Throws UsageError when warmup < 10 or iters < 30.
  void validate() const;
};

struct BenchResult {
  std::string name;
  std::string kind;
  std::size_t n = 0, m = 0, d = 0, e = 0;
  std::size_t warmup = 0;
  std::size_t iters = 0;
  double median_s = 0.0;
  double mean_s = 0.0;
  double stddev_s = 0.0;
  double total_s = 0.0;        // sum of measured iterations
  double items_per_sec = 0.0;  // iters / total_s
};

struct BlockPairResult {
  BenchResult dca;
  BenchResult sa;
  double speedup() const { return sa.median_s / dca.median_s; }
};

/// Times `fn` for opts.warmup untimed then opts.iters timed calls.
BenchResult time_loop(const std::string& name, const std::function<void()>& fn,
                      const BenchOptions& opts);

/// Grid used for N image tokens: the factorization h×w = N with h ≤ w
/// closest to square. Throws UsageError unless some h ≥ 2 exists.
std::pair<std::size_t, std::size_t> grid_for(std::size_t n);

/// DCA and SA blocks of identical width and identical initial weights on
/// identical inputs.
BlockPairResult bench_block_pair(std::size_t n, std::size_t m, std::size_t d, std::size_t e,
                                 const BenchOptions& opts = {});

/// Full forward pass; items are images.
BenchResult bench_model(const VariantSpec& spec, std::size_t height, std::size_t width,
                        const BenchOptions& opts = {});

inline constexpr std::string_view kBenchCsvHeader =
    "name,kind,n,m,d,e,warmup,iters,median_s,mean_s,stddev_s,items_per_s";

std::string emit_bench(const std::vector<BenchResult>& results, ReportFormat format);

}  // namespace lemevit
