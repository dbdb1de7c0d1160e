#include "lemevit/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace lemevit {

void BenchOptions::validate() const {
  if (warmup < 10) throw UsageError("benchmark warmup must be at least 10 iterations");
  if (iters < 30) throw UsageError("benchmark needs at least 30 measured iterations");
}

BenchResult time_loop(const std::string& name, const std::function<void()>& fn,
                      const BenchOptions& opts) {
  opts.validate();
  using clock = std::chrono::steady_clock;
  for (std::size_t i = 0; i < opts.warmup; ++i) fn();
  std::vector<double> samples(opts.iters);
  for (auto& s : samples) {
    const auto t0 = clock::now();
    fn();
    s = std::chrono::duration<double>(clock::now() - t0).count();
  }
  BenchResult r;
  r.name = name;
  r.warmup = opts.warmup;
  r.iters = opts.iters;
  r.total_s = std::accumulate(samples.begin(), samples.end(), 0.0);
  r.mean_s = r.total_s / static_cast<double>(samples.size());
  double var = 0.0;
  for (double s : samples) var += (s - r.mean_s) * (s - r.mean_s);
  r.stddev_s = std::sqrt(var / static_cast<double>(samples.size() - 1));
  std::sort(samples.begin(), samples.end());
  const std::size_t mid = samples.size() / 2;
  r.median_s = samples.size() % 2 ? samples[mid] : 0.5 * (samples[mid - 1] + samples[mid]);
  r.items_per_sec = static_cast<double>(r.iters) / r.total_s;
  return r;
}

std::pair<std::size_t, std::size_t> grid_for(std::size_t n) {
  for (auto h = static_cast<std::size_t>(std::sqrt(static_cast<double>(n))) + 1; h >= 2; --h) {
    if (h * h <= n && n % h == 0) return {h, n / h};
  }
  throw UsageError("cannot lay out " + std::to_string(n) + " tokens on a grid at least 2 wide");
}

BlockPairResult bench_block_pair(std::size_t n, std::size_t m, std::size_t d, std::size_t e,
                                 const BenchOptions& opts) {
  opts.validate();
  const auto [h, w] = grid_for(n);
  BlockConfig cfg;
  cfg.dim = d;
  cfg.expansion = e;
  cfg.head_dim = std::min<std::size_t>(32, d);

  auto run = [&, h = h, w = w](BlockKind kind) {
    cfg.kind = kind;
    std::mt19937_64 rng(opts.seed);
    BlockParams<float> params(cfg, rng);
    std::mt19937_64 data_rng(opts.seed + 1);
    const Tensor<float> image = random_uniform<float>({n, d}, data_rng, -1.0f, 1.0f);
    const Tensor<float> meta = random_uniform<float>({m, d}, data_rng, -1.0f, 1.0f);
    auto fn = [&] {
      Graph<float> g(GradMode::Disabled);
      run_block(TokenGrid<float>{g.constant(image), h, w}, g.constant(meta), params);
    };
    BenchResult r = time_loop(to_string(kind) + "-block", fn, opts);
    r.kind = to_string(kind);
    r.n = n;
    r.m = m;
    r.d = d;
    r.e = e;
    return r;
  };
  BlockPairResult pair;
  pair.dca = run(BlockKind::DualCrossAttention);
  pair.sa = run(BlockKind::StandardAttention);
  return pair;
}

BenchResult bench_model(const VariantSpec& spec, std::size_t height, std::size_t width,
                        const BenchOptions& opts) {
  opts.validate();
  check_input_extent(height, width);
  Model<float> model = Model<float>::build(spec, opts.seed);
  std::mt19937_64 rng(opts.seed + 1);
  const Tensor<float> image =
      random_uniform<float>({spec.in_channels, height, width}, rng, -1.0f, 1.0f);
  BenchResult r = time_loop(spec.name + "-model", [&] { forward_classify(model, image); }, opts);
  r.kind = "model";
  r.n = (height / 4) * (width / 4);
  r.m = spec.meta_len;
  r.d = spec.dims[0];
  r.e = spec.expansion;
  return r;
}

std::string emit_bench(const std::vector<BenchResult>& results, ReportFormat format) {
  std::ostringstream os;
  switch (format) {
    case ReportFormat::Csv:
      os << kBenchCsvHeader << '\n';
      os << std::setprecision(9);
      for (const auto& r : results) {
        os << r.name << ',' << r.kind << ',' << r.n << ',' << r.m << ',' << r.d << ',' << r.e << ','
           << r.warmup << ',' << r.iters << ',' << r.median_s << ',' << r.mean_s << ','
           << r.stddev_s << ',' << r.items_per_sec << '\n';
      }
      break;
    case ReportFormat::Json: {
      nlohmann::ordered_json j;
      j["clock"] = "steady";
      auto& entries = j["entries"] = nlohmann::ordered_json::array();
      for (const auto& r : results) {
        entries.push_back({{"name", r.name},
                           {"kind", r.kind},
                           {"n", r.n},
                           {"m", r.m},
                           {"d", r.d},
                           {"e", r.e},
                           {"warmup", r.warmup},
                           {"iters", r.iters},
                           {"median_s", r.median_s},
                           {"mean_s", r.mean_s},
                           {"stddev_s", r.stddev_s},
                           {"items_per_s", r.items_per_sec}});
      }
      os << j.dump(2) << '\n';
      break;
    }
    case ReportFormat::Table:
      os << std::left << std::setw(18) << "name" << std::right << std::setw(7) << "N"
         << std::setw(5) << "M" << std::setw(6) << "D" << std::setw(7) << "iters" << std::setw(13)
         << "median_ms" << std::setw(11) << "mean_ms" << std::setw(11) << "stddev_ms"
         << std::setw(12) << "items/s" << '\n';
      os << std::fixed;
      for (const auto& r : results) {
        os << std::left << std::setw(18) << r.name << std::right << std::setw(7) << r.n
           << std::setw(5) << r.m << std::setw(6) << r.d << std::setw(7) << r.iters
           << std::setprecision(3) << std::setw(13) << r.median_s * 1e3 << std::setw(11)
           << r.mean_s * 1e3 << std::setw(11) << r.stddev_s * 1e3 << std::setprecision(2)
           << std::setw(12) << r.items_per_sec << '\n';
      }
      break;
  }
  return os.str();
}

}  // namespace lemevit
