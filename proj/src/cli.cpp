#include "lemevit/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "lemevit/bench.hpp"
#include "lemevit/checkpoint.hpp"
#include "lemevit/complexity.hpp"
#include "lemevit/gradcheck.hpp"
#include "lemevit/image_io.hpp"
#include "lemevit/trainer.hpp"

namespace lemevit::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::size_t> parse_list(const std::string& text, std::size_t expected, const char* what) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
      throw UsageError(std::string(what) + ": '" + text + "' is not a comma-separated list of integers");
    }
    out.push_back(std::stoull(item));
  }
  if (out.size() != expected) {
    throw UsageError(std::string(what) + " needs " + std::to_string(expected) + " values, got " +
                     std::to_string(out.size()));
  }
  return out;
}

struct VariantOptions {
  std::string name;
  std::size_t meta_len = 0;
  std::size_t classes = 0;
  std::string dims;
  std::string blocks;
  bool use_ca_stage = true;
  bool use_meta_stem = true;
  bool use_meta_pooling = true;
  bool dca_sequential = false;
  CLI::Option* meta_len_opt = nullptr;
  CLI::Option* classes_opt = nullptr;

  void add_to(CLI::App* app, const std::string& default_variant) {
    name = default_variant;
    app->add_option("--variant", name, "tiny, small, base or tiny-narrow")->capture_default_str();
    meta_len_opt = app->add_option("--meta-len", meta_len, "meta token count M (default 16)");
    classes_opt = app->add_option("--classes", classes, "classifier width (variant default)");
    app->add_option("--dims", dims, "override D1..D4, e.g. 64,128,192,320");
    app->add_option("--blocks", blocks, "override S0..S4 block counts, e.g. 1,2,2,8,2");
    app->add_option("--use-ca-stage", use_ca_stage, "run the CA stage")->capture_default_str();
    app->add_option("--use-meta-stem", use_meta_stem, "run the meta-token stem")->capture_default_str();
    app->add_option("--use-meta-pooling", use_meta_pooling, "add pooled meta tokens in the head")
        ->capture_default_str();
    app->add_option("--dca-sequential", dca_sequential, "sequential instead of parallel DCA")
        ->capture_default_str();
  }

  VariantSpec resolve() const {
    VariantSpec spec = variant(name);
    if (meta_len_opt->count()) spec.meta_len = meta_len;
    if (classes_opt->count()) spec.num_classes = classes;
    if (!dims.empty()) {
      const auto d = parse_list(dims, 4, "--dims");
      std::copy(d.begin(), d.end(), spec.dims.begin());
    }
    if (!blocks.empty()) {
      const auto b = parse_list(blocks, 5, "--blocks");
      std::copy(b.begin(), b.end(), spec.blocks.begin());
    }
    spec.use_ca_stage = use_ca_stage;
    spec.use_meta_stem = use_meta_stem;
    spec.use_meta_pooling = use_meta_pooling;
    spec.dca_sequential = dca_sequential;
    spec.validate();
    return spec;
  }
};

void write_text(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text;
    return;
  }
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
  if (!f) throw std::runtime_error("write failed for " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

class Dispatcher {
 public:
  Dispatcher(std::ostream& out, std::ostream& err) : out_(out), err_(err) {
    app_.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    app_.require_subcommand(1);
    app_.fallthrough();
    app_.add_option("--config", config_path_, "key=value file; flags override its values");
    setup_analyze();
    setup_bench();
    setup_gradcheck();
    setup_train();
    setup_infer();
    setup_attmap();
  }

  int run(std::vector<std::string> args) {
    try {
      args = expand_config(std::move(args));
      std::vector<const char*> argv;
      for (const auto& a : args) argv.push_back(a.c_str());
      app_.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
      out_ << (app_.get_subcommands().empty() ? app_.help() : app_.get_subcommands()[0]->help());
      return kExitOk;
    } catch (const CLI::ParseError& e) {
      err_ << "error: " << e.what() << "\n\n" << app_.help();
      return kExitUsage;
    } catch (const UsageError& e) {
      err_ << "error: " << e.what() << '\n';
      return kExitUsage;
    } catch (const std::exception& e) {
      err_ << "error: " << e.what() << '\n';
      return kExitData;
    }
    try {
      return action_();
    } catch (const UsageError& e) {
      err_ << "error: " << e.what() << '\n';
      return kExitUsage;
    } catch (const ConfigError& e) {
      err_ << "error: " << e.what() << '\n';
      return kExitUsage;
    } catch (const std::exception& e) {
      err_ << "error: " << e.what() << '\n';
      return kExitData;
    }
  }

 private:
  /// Inserts config-file values as --key=value right after the subcommand,
  /// so anything given on the command line wins (options take the last value).
  std::vector<std::string> expand_config(std::vector<std::string> args) {
    std::string path;
    for (std::size_t i = 1; i < args.size(); ++i) {
      if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
      if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
    }
    if (path.empty() || args.size() < 2) return args;
    CLI::App* sub = nullptr;
    for (auto* s : app_.get_subcommands({})) {
      if (s->get_name() == args[1]) sub = s;
    }
    if (!sub) return args;  // let the parser report the bad subcommand
    const auto values = parse_config_text(read_text(path));
    std::vector<std::string> injected;
    for (const auto& [key, value] : values) {
      if (key == "config" || !sub->get_option_no_throw("--" + key)) {
        throw UsageError("unknown config key '" + key + "' for subcommand " + args[1]);
      }
      injected.push_back("--" + key + "=" + value);
    }
    args.insert(args.begin() + 2, injected.begin(), injected.end());
    return args;
  }

  void announce_seed(std::uint64_t seed) { err_ << "seed: " << seed << '\n'; }

  void setup_analyze() {
    auto* sub = app_.add_subcommand("analyze", "complexity report for a variant and input size");
    analyze_.variant.add_to(sub, "tiny");
    sub->add_option("--input", analyze_.input, "square input side, multiple of 32")->capture_default_str();
    sub->add_option("--format", analyze_.format, "table, csv or json")->capture_default_str();
    sub->add_flag("--strict", analyze_.strict, "count both DCA attention branches (4NMD)");
    sub->add_option("--output", analyze_.output, "write the report here instead of stdout");
    sub->add_option("--seed", analyze_.seed, "unused by the analytic counter; echoed")->capture_default_str();
    sub->callback([this] {
      action_ = [this] {
        announce_seed(analyze_.seed);
        const VariantSpec spec = analyze_.variant.resolve();
        const auto report =
            count_model(spec, analyze_.input, analyze_.input,
                        analyze_.strict ? CostConvention::Strict : CostConvention::Table);
        write_text(analyze_.output, emit_report(report, analyze_.format), out_);
        return kExitOk;
      };
    });
  }

  void setup_bench() {
    auto* sub = app_.add_subcommand("bench", "DCA-vs-SA block pair or whole-model latency");
    bench_.variant.add_to(sub, "tiny");
    sub->add_option("--case", bench_.which, "block or model")->capture_default_str();
    sub->add_option("--n", bench_.n, "image tokens (block case)")->capture_default_str();
    sub->add_option("--m", bench_.m, "meta tokens (block case)")->capture_default_str();
    sub->add_option("--d", bench_.d, "width (block case)")->capture_default_str();
    sub->add_option("--e", bench_.e, "FFN expansion (block case)")->capture_default_str();
    sub->add_option("--input", bench_.input, "square input side (model case)")->capture_default_str();
    sub->add_option("--iters", bench_.opts.iters, "measured iterations, at least 30")->capture_default_str();
    sub->add_option("--warmup", bench_.opts.warmup, "untimed iterations, at least 10")->capture_default_str();
    sub->add_option("--runs", bench_.runs, "independent repetitions")->capture_default_str();
    sub->add_option("--format", bench_.format, "table, csv or json")->capture_default_str();
    sub->add_option("--output", bench_.output, "write results here instead of stdout");
    sub->add_option("--seed", bench_.opts.seed, "weight and input seed")->capture_default_str();
    sub->callback([this] {
      action_ = [this] {
        announce_seed(bench_.opts.seed);
        const ReportFormat format = parse_report_format(bench_.format);
        if (bench_.runs == 0) throw UsageError("--runs must be at least 1");
        std::vector<BenchResult> results;
        std::vector<double> speedups;
        if (bench_.which == "block") {
          for (std::size_t r = 0; r < bench_.runs; ++r) {
            const auto pair = bench_block_pair(bench_.n, bench_.m, bench_.d, bench_.e, bench_.opts);
            results.push_back(pair.dca);
            results.push_back(pair.sa);
            speedups.push_back(pair.speedup());
          }
        } else if (bench_.which == "model") {
          const VariantSpec spec = bench_.variant.resolve();
          for (std::size_t r = 0; r < bench_.runs; ++r) {
            results.push_back(bench_model(spec, bench_.input, bench_.input, bench_.opts));
          }
        } else {
          throw UsageError("--case must be block or model, got '" + bench_.which + "'");
        }
        write_text(bench_.output, emit_bench(results, format), out_);
        for (std::size_t r = 0; r < speedups.size(); ++r) {
          err_ << "run " << r + 1 << ": speedup (sa median / dca median) " << std::fixed
               << std::setprecision(3) << speedups[r] << '\n';
        }
        return kExitOk;
      };
    });
  }

  void setup_gradcheck() {
    auto* sub = app_.add_subcommand("gradcheck", "64-bit finite-difference gradient suite");
    sub->add_option("--step", gradcheck_.opts.step, "central-difference step")->capture_default_str();
    sub->add_option("--floor", gradcheck_.opts.floor, "relative-error denominator floor")
        ->capture_default_str();
    sub->add_option("--coords", gradcheck_.model_coords, "sampled coordinates per model tensor")
        ->capture_default_str();
    sub->add_option("--only", gradcheck_.only, "all, ca, dca, dca-seq, sa or model")->capture_default_str();
    sub->add_option("--seed", gradcheck_.opts.seed, "parameter and input seed")->capture_default_str();
    sub->callback([this] {
      action_ = [this] {
        announce_seed(gradcheck_.opts.seed);
        GradcheckOptions model_opts = gradcheck_.opts;
        model_opts.coords_per_tensor = gradcheck_.model_coords;
        const std::string& only = gradcheck_.only;
        std::vector<GradcheckResult> results;
        const auto want = [&](const char* key) { return only == "all" || only == key; };
        if (want("ca")) results.push_back(gradcheck_block(BlockKind::CrossAttention, false, gradcheck_.opts));
        if (want("dca")) results.push_back(gradcheck_block(BlockKind::DualCrossAttention, false, gradcheck_.opts));
        if (want("dca-seq")) results.push_back(gradcheck_block(BlockKind::DualCrossAttention, true, gradcheck_.opts));
        if (want("sa")) results.push_back(gradcheck_block(BlockKind::StandardAttention, false, gradcheck_.opts));
        if (want("model")) results.push_back(gradcheck_model(model_opts));
        if (results.empty()) throw UsageError("--only must be all, ca, dca, dca-seq, sa or model");
        double worst = 0.0;
        for (const auto& r : results) {
          out_ << std::left << std::setw(22) << r.name << " coords " << std::setw(6) << r.coords
               << " max_rel_err " << std::scientific << std::setprecision(3) << r.max_rel_err
               << std::defaultfloat << "  " << (r.passed() ? "PASS" : "FAIL") << "  worst "
               << r.worst << '\n';
          worst = std::max(worst, r.max_rel_err);
        }
        out_ << "max rel err: " << std::scientific << std::setprecision(3) << worst
             << std::defaultfloat << '\n';
        return worst < 1e-4 ? kExitOk : kExitData;
      };
    });
  }

  void setup_train() {
    auto* sub = app_.add_subcommand("train", "train on the synthetic stripes/checkerboard task");
    train_.variant.add_to(sub, "tiny-narrow");
    TrainConfig& c = train_.cfg;
    sub->add_option("--samples", train_.samples, "dataset size")->capture_default_str();
    sub->add_option("--noise", train_.noise, "Gaussian noise sigma")->capture_default_str();
    sub->add_option("--steps", c.steps, "optimizer steps")->capture_default_str();
    sub->add_option("--batch", c.batch_size, "samples per step")->capture_default_str();
    sub->add_option("--lr", c.lr, "learning rate")->capture_default_str();
    sub->add_option("--optimizer", train_.optimizer, "adamw-lite or sgd-momentum")->capture_default_str();
    sub->add_option("--weight-decay", c.weight_decay, "decoupled weight decay")->capture_default_str();
    sub->add_option("--momentum", c.momentum, "sgd-momentum coefficient")->capture_default_str();
    sub->add_option("--label-smoothing", c.label_smoothing, "cross-entropy smoothing")->capture_default_str();
    sub->add_option("--seed", c.seed, "data, init and shuffle seed")->capture_default_str();
    sub->add_option("--checkpoint", train_.checkpoint, "output checkpoint")->capture_default_str();
    sub->add_option("--history", train_.history, "output history CSV")->capture_default_str();
    sub->add_option("--log-every", train_.log_every, "progress line interval (0 = quiet)")
        ->capture_default_str();
    sub->callback([this] {
      action_ = [this] {
        TrainConfig cfg = train_.cfg;
        announce_seed(cfg.seed);
        cfg.optimizer = parse_optimizer(train_.optimizer);
        cfg.validate();
        const VariantSpec spec = train_.variant.resolve();
        const SynthDataset ds = make_synth(train_.samples, train_.noise, cfg.seed);
        Model<float> model = Model<float>::build(spec, cfg.seed);
        const auto history = train_toy(model, ds, cfg, [&](const HistoryEntry& h) {
          if (train_.log_every && (h.step % train_.log_every == 0 || h.step + 1 == cfg.steps)) {
            out_ << "step " << h.step << " loss " << std::fixed << std::setprecision(4) << h.loss
                 << " acc " << std::setprecision(3) << h.accuracy << std::defaultfloat << '\n';
          }
        });
        save_checkpoint(model, train_.checkpoint);
        write_text(train_.history, history_csv(history), out_);
        out_ << "train accuracy " << std::fixed << std::setprecision(4) << evaluate(model, ds)
             << std::defaultfloat << '\n';
        out_ << "checkpoint " << train_.checkpoint << ", history " << train_.history << '\n';
        return kExitOk;
      };
    });
  }

  void setup_infer() {
    auto* sub = app_.add_subcommand("infer", "print logits for an image");
    infer_.variant.add_to(sub, "tiny");
    sub->add_option("--checkpoint", infer_.checkpoint, "LMVT checkpoint")->required();
    sub->add_option("--image", infer_.image, ".ten tensor file or .ppm image")->required();
    sub->add_option("--seed", infer_.seed, "echoed; weights come from the checkpoint")->capture_default_str();
    sub->callback([this] {
      action_ = [this] {
        announce_seed(infer_.seed);
        const VariantSpec spec = infer_.variant.resolve();
        Model<float> model = load_checkpoint(spec, infer_.checkpoint);
        const Tensor<float> logits = forward_classify(model, load_image(infer_.image));
        out_ << "logits";
        out_ << std::setprecision(9);
        for (float v : logits.data()) out_ << ' ' << v;
        out_ << std::defaultfloat << "\nclass " << argmax(logits.data()) << '\n';
        return kExitOk;
      };
    });
  }

  void setup_attmap() {
    auto* sub = app_.add_subcommand("attmap", "write per-meta-token attention maps");
    attmap_.variant.add_to(sub, "tiny");
    sub->add_option("--checkpoint", attmap_.checkpoint, "LMVT checkpoint (default: seeded init)");
    sub->add_option("--image", attmap_.image, ".ten tensor file or .ppm image")->required();
    sub->add_option("--out-dir", attmap_.out_dir, "output directory")->capture_default_str();
    sub->add_option("--seed", attmap_.seed, "init seed when no checkpoint is given")->capture_default_str();
    sub->callback([this] {
      action_ = [this] {
        announce_seed(attmap_.seed);
        const VariantSpec spec = attmap_.variant.resolve();
        Model<float> model = attmap_.checkpoint.empty()
                                 ? Model<float>::build(spec, attmap_.seed)
                                 : load_checkpoint(spec, attmap_.checkpoint);
        const auto maps = export_attention_maps(model, load_image(attmap_.image));
        const std::filesystem::path dir(attmap_.out_dir);
        std::filesystem::create_directories(dir);
        std::ostringstream csv;
        csv << "meta,y,x,weight\n" << std::setprecision(9);
        for (const auto& m : maps) {
          char file[32];
          std::snprintf(file, sizeof file, "meta_%02zu.pgm", m.meta_index);
          write_pgm16(dir / file, m.map);
          const std::size_t h = m.map.dim(0), w = m.map.dim(1);
          for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
              csv << m.meta_index << ',' << y << ',' << x << ',' << m.map.at(y, x) << '\n';
            }
          }
        }
        write_text((dir / "maps.csv").string(), csv.str(), out_);
        out_ << "wrote " << maps.size() << " maps to " << dir.string() << '\n';
        return kExitOk;
      };
    });
  }

  std::ostream& out_;
  std::ostream& err_;
  CLI::App app_{"Meta-token vision transformer: analysis, benchmarks, gradient checks, toy training",
                "lemevit"};
  std::string config_path_;
  std::function<int()> action_;

  struct {
    VariantOptions variant;
    std::size_t input = 224;
    std::string format = "table";
    bool strict = false;
    std::string output;
    std::uint64_t seed = 0;
  } analyze_;
  struct {
    VariantOptions variant;
    std::string which = "block";
    std::size_t n = 3136, m = 16, d = 64, e = 4;
    std::size_t input = 64;
    std::size_t runs = 1;
    BenchOptions opts;
    std::string format = "table";
    std::string output;
  } bench_;
  struct {
    GradcheckOptions opts;
    std::size_t model_coords = 3;
    std::string only = "all";
  } gradcheck_;
  struct {
    VariantOptions variant;
    TrainConfig cfg;
    std::size_t samples = 300;
    double noise = 0.1;
    std::string optimizer = "adamw-lite";
    std::string checkpoint = "model.lmvt";
    std::string history = "history.csv";
    std::size_t log_every = 25;
  } train_;
  struct {
    VariantOptions variant;
    std::string checkpoint;
    std::string image;
    std::uint64_t seed = 0;
  } infer_;
  struct {
    VariantOptions variant;
    std::string checkpoint;
    std::string image;
    std::string out_dir = "attmaps";
    std::uint64_t seed = 0;
  } attmap_;
};

}  // namespace

std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> out;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config line " + std::to_string(lineno) + ": expected key=value");
    }
    std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw UsageError("config line " + std::to_string(lineno) + ": empty key");
    std::replace(key.begin(), key.end(), '_', '-');
    if (!out.emplace(key, value).second) {
      throw UsageError("config line " + std::to_string(lineno) + ": repeated key '" + key + "'");
    }
  }
  return out;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Dispatcher d(out, err);
  return d.run(args);
}

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  return dispatch(std::vector<std::string>(argv, argv + argc), out, err);
}

}  // namespace lemevit::cli
