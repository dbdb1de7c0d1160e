#include "lemevit/complexity.hpp"

#include <cstdio>
#include <iomanip>
#include <sstream>

#include "json.hpp"

namespace lemevit {

namespace {

using u64 = std::uint64_t;

u64 linear_params(u64 in, u64 out) { return in * out + out; }
u64 norm_params(u64 d) { return 2 * d; }
u64 conv_params(u64 cin, u64 cout, u64 k, u64 groups) { return k * k * (cin / groups) * cout + cout; }
u64 conv_macs(u64 cin, u64 cout, u64 k, u64 groups, u64 out_pixels) {
  return k * k * (cin / groups) * cout * out_pixels;
}

std::string fmt_giga(u64 v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", static_cast<double>(v) / 1e9);
  return buf;
}

}  // namespace

std::string to_string(CostConvention c) { return c == CostConvention::Table ? "table" : "strict"; }

u64 count_block(BlockKind kind, u64 n, u64 m, u64 d, u64 e, CostConvention convention) {
  switch (kind) {
    case BlockKind::DualCrossAttention: {
      const u64 attn = convention == CostConvention::Strict ? 4 * n * m * d : 2 * n * m * d;
      return (2 * e + 4) * (n + m) * d * d + attn;
    }
    case BlockKind::StandardAttention:
      return (2 * e + 4) * n * d * d + 2 * n * n * d;
    case BlockKind::CrossAttention:
      return 2 * m * d * d + 2 * n * d * d + 2 * n * m * d + 2 * e * (n + m) * d * d;
  }
  return 0;
}

u64 block_macs(const BlockConfig& cfg, u64 n, u64 m, CostConvention convention) {
  const u64 d = cfg.dim, e = cfg.expansion;
  const u64 cpe = cfg.has_cpe() ? conv_macs(d, d, cfg.cpe_kernel, d, n) : 0;
  switch (cfg.kind) {
    case BlockKind::DualCrossAttention:
      return cpe + count_block(cfg.kind, n, m, d, e, convention);
    case BlockKind::StandardAttention:
      return cpe + count_block(cfg.kind, n, 0, d, e) + count_block(cfg.kind, m, 0, d, e);
    case BlockKind::CrossAttention:
      return 2 * m * d * d + 2 * n * d * d + 2 * n * m * d + 2 * e * m * d * d;
  }
  return 0;
}

u64 block_params(const BlockConfig& cfg) {
  const u64 d = cfg.dim, e = cfg.expansion;
  const u64 norms = cfg.kind == BlockKind::CrossAttention ? 3 : 4;
  u64 p = norms * norm_params(d) + 4 * linear_params(d, d) + linear_params(d, e * d) +
          linear_params(e * d, d);
  if (cfg.has_cpe()) p += conv_params(d, d, cfg.cpe_kernel, d);
  return p;
}

void ComplexityReport::sum_totals() {
  totals = {};
  for (const auto& e : entries) {
    totals.formula_units += e.formula_units;
    totals.macs += e.macs;
    totals.params += e.params;
  }
}

std::string ComplexityReport::convention_note() const {
  std::string note =
      "formula_units: attention-block cost as defined by the published cost table; "
      "macs: executed multiply-accumulates of convs, linears and attention products "
      "(norms, activations, softmax excluded); ";
  note += convention == CostConvention::Table
              ? "DCA attention counted as 2NMD (table convention)"
              : "DCA attention counted as 4NMD (strict: both branches)";
  return note;
}

ComplexityReport count_model(const VariantSpec& spec, std::size_t height, std::size_t width,
                             CostConvention convention) {
  spec.validate();
  check_input_extent(height, width);
  ComplexityReport r;
  r.variant = spec.name;
  r.input_height = height;
  r.input_width = width;
  r.convention = convention;

  const u64 m = spec.meta_len, e = spec.expansion;
  const u64 d1 = spec.dims[0];
  // M is reported only on rows that touch the meta tokens.
  auto push = [&](std::string name, std::string kind, u64 n, u64 d, u64 units, u64 macs, u64 params) {
    ComplexityEntry entry;
    const bool image_only = kind == "conv" || name == "head.norm_image" || name == "head.fc";
    entry.name = std::move(name);
    entry.kind = std::move(kind);
    entry.n = n;
    entry.m = image_only ? 0 : m;
    entry.d = d;
    entry.e = e;
    entry.formula_units = units;
    entry.macs = macs;
    entry.params = params;
    r.entries.push_back(std::move(entry));
  };

  push("meta_tokens", "tokens", 0, spec.initial_meta_dim(), 0, 0, m * spec.initial_meta_dim());

  // Stem: two 3x3 stride-2 convs, padding 1.
  u64 h = (height + 1) / 2, w = (width + 1) / 2;
  const u64 half = d1 / 2;
  push("stem.image.conv1", "conv", h * w, half, 0, conv_macs(spec.in_channels, half, 3, 1, h * w),
       conv_params(spec.in_channels, half, 3, 1));
  h = (h + 1) / 2;
  w = (w + 1) / 2;
  push("stem.image.conv2", "conv", h * w, d1, 0, conv_macs(half, d1, 3, 1, h * w),
       conv_params(half, d1, 3, 1));
  if (spec.use_meta_stem) {
    push("stem.meta.fc1", "linear", m, d1, 0, m * spec.meta_dim0 * d1, linear_params(spec.meta_dim0, d1));
    push("stem.meta.fc2", "linear", m, d1, 0, m * d1 * d1, linear_params(d1, d1));
  }

  const BlockKind stage_kind[4] = {BlockKind::DualCrossAttention, BlockKind::DualCrossAttention,
                                   BlockKind::StandardAttention, BlockKind::StandardAttention};
  auto add_block = [&](const std::string& name, BlockKind kind, u64 d, u64 n) {
    BlockConfig cfg;
    cfg.kind = kind;
    cfg.dim = d;
    cfg.head_dim = spec.head_dim;
    cfg.expansion = spec.expansion;
    cfg.cpe_kernel = spec.cpe_kernel;
    cfg.dca_sequential = spec.dca_sequential;
    push(name, to_string(kind), n, d, count_block(kind, n, m, d, e, convention),
         block_macs(cfg, n, m, convention), block_params(cfg));
  };

  std::size_t first_index = 0;
  for (std::size_t i = 0; i < spec.ca_blocks(); ++i, ++first_index) {
    add_block("stage1.blocks." + std::to_string(first_index), BlockKind::CrossAttention, d1, h * w);
  }
  for (std::size_t s = 0; s < 4; ++s) {
    const std::string stage = "stage" + std::to_string(s + 1);
    const u64 d = spec.dims[s];
    std::size_t index = 0;
    if (s > 0) {
      const u64 din = spec.dims[s - 1];
      h = (h + 1) / 2;
      w = (w + 1) / 2;
      push(stage + ".downsample.conv", "conv", h * w, d, 0, conv_macs(din, d, 3, 1, h * w),
           conv_params(din, d, 3, 1));
      push(stage + ".meta_proj", "linear", m, d, 0, m * din * d, linear_params(din, d));
    } else {
      index = first_index;
    }
    for (std::size_t i = 0; i < spec.blocks[s + 1]; ++i, ++index) {
      add_block(stage + ".blocks." + std::to_string(index), stage_kind[s], d, h * w);
    }
  }

  const u64 d4 = spec.dims[3];
  push("head.norm_image", "norm", h * w, d4, 0, 0, norm_params(d4));
  if (spec.use_meta_pooling) push("head.norm_meta", "norm", m, d4, 0, 0, norm_params(d4));
  push("head.fc", "linear", 1, d4, 0, d4 * spec.num_classes, linear_params(d4, spec.num_classes));

  r.sum_totals();
  return r;
}

ReportFormat parse_report_format(std::string_view name) {
  if (name == "table") return ReportFormat::Table;
  if (name == "csv") return ReportFormat::Csv;
  if (name == "json") return ReportFormat::Json;
  throw UsageError("unknown report format '" + std::string(name) + "' (expected table, csv or json)");
}

std::string emit_report(const ComplexityReport& report, std::string_view format) {
  return emit_report(report, parse_report_format(format));
}

std::string emit_report(const ComplexityReport& r, ReportFormat format) {
  std::ostringstream os;
  switch (format) {
    case ReportFormat::Csv: {
      os << kReportCsvHeader << '\n';
      for (const auto& e : r.entries) {
        os << e.name << ',' << e.kind << ',' << e.n << ',' << e.m << ',' << e.d << ',' << e.e << ','
           << e.formula_units << ',' << e.macs << ',' << e.params << '\n';
      }
      os << "TOTAL,total,,,,," << r.totals.formula_units << ',' << r.totals.macs << ','
         << r.totals.params << '\n';
      break;
    }
    case ReportFormat::Json: {
      nlohmann::ordered_json j;
      j["variant"] = r.variant;
      j["input"] = {r.input_height, r.input_width};
      j["convention"] = to_string(r.convention);
      j["convention_note"] = r.convention_note();
      auto& entries = j["entries"] = nlohmann::ordered_json::array();
      for (const auto& e : r.entries) {
        entries.push_back({{"name", e.name},
                           {"kind", e.kind},
                           {"n", e.n},
                           {"m", e.m},
                           {"d", e.d},
                           {"e", e.e},
                           {"formula_units", e.formula_units},
                           {"macs", e.macs},
                           {"params", e.params}});
      }
      j["totals"] = {{"formula_units", r.totals.formula_units},
                     {"macs", r.totals.macs},
                     {"params", r.totals.params}};
      os << j.dump(2) << '\n';
      break;
    }
    case ReportFormat::Table: {
      os << "variant " << r.variant << "  input " << r.input_height << "x" << r.input_width
         << "  convention " << to_string(r.convention) << '\n';
      os << std::left << std::setw(26) << "name" << std::setw(8) << "kind" << std::right
         << std::setw(7) << "N" << std::setw(5) << "M" << std::setw(6) << "D" << std::setw(16)
         << "formula_units" << std::setw(10) << "units(G)" << std::setw(14) << "macs"
         << std::setw(10) << "macs(G)" << std::setw(11) << "params" << '\n';
      auto row = [&](const std::string& name, const std::string& kind, const std::string& n,
                     const std::string& mm, const std::string& d, u64 units, u64 macs, u64 params) {
        os << std::left << std::setw(26) << name << std::setw(8) << kind << std::right
           << std::setw(7) << n << std::setw(5) << mm << std::setw(6) << d << std::setw(16)
           << units << std::setw(10) << fmt_giga(units) << std::setw(14) << macs << std::setw(10)
           << fmt_giga(macs) << std::setw(11) << params << '\n';
      };
      for (const auto& e : r.entries) {
        row(e.name, e.kind, std::to_string(e.n), std::to_string(e.m), std::to_string(e.d),
            e.formula_units, e.macs, e.params);
      }
      row("TOTAL", "", "", "", "", r.totals.formula_units, r.totals.macs, r.totals.params);
      os << "params " << std::fixed << std::setprecision(2)
         << static_cast<double>(r.totals.params) / 1e6 << " M, macs "
         << fmt_giga(r.totals.macs) << " G\n";
      os << "note: " << r.convention_note() << '\n';
      break;
    }
  }
  return os.str();
}

namespace {

std::vector<std::string> split(std::string_view line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.emplace_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

u64 parse_u64(const std::string& s, std::size_t offset) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw FormatError("expected an unsigned integer, got '" + s + "'", offset);
  }
  return std::stoull(s);
}

}  // namespace

ComplexityReport parse_report_csv(std::string_view text) {
  ComplexityReport r;
  std::size_t offset = 0;
  bool header = true, saw_total = false;
  while (offset < text.size()) {
    auto end = text.find('\n', offset);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(offset, end - offset);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    const std::size_t line_at = offset;
    offset = end + 1;
    if (line.empty()) continue;
    if (header) {
      if (line != kReportCsvHeader) throw FormatError("unexpected CSV header", line_at);
      header = false;
      continue;
    }
    if (saw_total) throw FormatError("rows after TOTAL", line_at);
    const auto f = split(line, ',');
    if (f.size() != 9) throw FormatError("expected 9 columns", line_at);
    if (f[0] == "TOTAL") {
      r.totals = {parse_u64(f[6], line_at), parse_u64(f[7], line_at), parse_u64(f[8], line_at)};
      saw_total = true;
      continue;
    }
    ComplexityEntry e;
    e.name = f[0];
    e.kind = f[1];
    e.n = parse_u64(f[2], line_at);
    e.m = parse_u64(f[3], line_at);
    e.d = parse_u64(f[4], line_at);
    e.e = parse_u64(f[5], line_at);
    e.formula_units = parse_u64(f[6], line_at);
    e.macs = parse_u64(f[7], line_at);
    e.params = parse_u64(f[8], line_at);
    r.entries.push_back(std::move(e));
  }
  if (header) throw FormatError("empty CSV", 0);
  if (!saw_total) throw FormatError("missing TOTAL row", text.size());
  return r;
}

ComplexityReport parse_report_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& err) {
    throw FormatError(std::string("invalid JSON: ") + err.what(), err.byte);
  }
  try {
    ComplexityReport r;
    r.variant = j.at("variant").get<std::string>();
    r.input_height = j.at("input").at(0).get<std::size_t>();
    r.input_width = j.at("input").at(1).get<std::size_t>();
    const auto conv = j.at("convention").get<std::string>();
    if (conv != "table" && conv != "strict") throw FormatError("unknown convention " + conv, 0);
    r.convention = conv == "table" ? CostConvention::Table : CostConvention::Strict;
    for (const auto& e : j.at("entries")) {
      r.entries.push_back({e.at("name").get<std::string>(), e.at("kind").get<std::string>(),
                           e.at("n").get<u64>(), e.at("m").get<u64>(), e.at("d").get<u64>(),
                           e.at("e").get<u64>(), e.at("formula_units").get<u64>(),
                           e.at("macs").get<u64>(), e.at("params").get<u64>()});
    }
    const auto& t = j.at("totals");
    r.totals = {t.at("formula_units").get<u64>(), t.at("macs").get<u64>(), t.at("params").get<u64>()};
    return r;
  } catch (const nlohmann::json::exception& err) {
    throw FormatError(std::string("report JSON does not match schema: ") + err.what(), 0);
  }
}

}  // namespace lemevit
