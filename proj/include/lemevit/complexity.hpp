#pragma once

// Analytic cost accounting.
//
// formula_units is the attention-block cost exactly as the published cost
// table defines it. macs counts multiply-accumulates of what the code
// executes: convs k²·(Cin/groups)·Cout·H'·W', linears fan-in·fan-out per
// token, attention 2·N_query·N_key·D per attention. Norms, activations,
// softmax and residual adds are not counted.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "lemevit/model.hpp"

namespace lemevit {

enum class CostConvention {
  Table,   // DCA attention term 2NMD, as in the published table
  Strict,  // DCA attention term 4NMD: both branches counted
};

std::string to_string(CostConvention c);

/// DCA: (2E+4)(N+M)D² + 2NMD (4NMD under Strict)
/// SA:  (2E+4)ND² + 2N²D
/// CA:  2MD² + 2ND² + 2NMD + 2E(N+M)D²
std::uint64_t count_block(BlockKind kind, std::uint64_t n, std::uint64_t m, std::uint64_t d,
                          std::uint64_t e, CostConvention convention = CostConvention::Table);

/// MACs the block implementation executes, CPE included when present. SA
/// counts both streams, CA runs its FFN on meta tokens only.
std::uint64_t block_macs(const BlockConfig& cfg, std::uint64_t n, std::uint64_t m,
                         CostConvention convention = CostConvention::Table);

std::uint64_t block_params(const BlockConfig& cfg);

struct ComplexityEntry {
  std::string name;
  std::string kind;  // ca, dca, sa, conv, linear, tokens, norm
  std::uint64_t n = 0, m = 0, d = 0, e = 0;
  std::uint64_t formula_units = 0;  // zero outside attention blocks
  std::uint64_t macs = 0;
  std::uint64_t params = 0;

  bool operator==(const ComplexityEntry&) const = default;
};

struct ComplexityTotals {
  std::uint64_t formula_units = 0;
  std::uint64_t macs = 0;
  std::uint64_t params = 0;

  bool operator==(const ComplexityTotals&) const = default;
};

struct ComplexityReport {
  std::string variant;
  std::size_t input_height = 0;
  std::size_t input_width = 0;
  CostConvention convention = CostConvention::Table;
  std::vector<ComplexityEntry> entries;
  ComplexityTotals totals;

  /// Recomputes totals from entries.
  void sum_totals();
  std::string convention_note() const;
};

/// Walks the exact stage layout Model::build produces. Entry names match
/// parameter prefixes, so per-entry params can be checked against a model.
ComplexityReport count_model(const VariantSpec& spec, std::size_t height, std::size_t width,
                             CostConvention convention = CostConvention::Table);

enum class ReportFormat { Table, Csv, Json };

/// Throws UsageError for anything but "table", "csv", "json".
ReportFormat parse_report_format(std::string_view name);

std::string emit_report(const ComplexityReport& report, ReportFormat format);
std::string emit_report(const ComplexityReport& report, std::string_view format);

/// Inverse of the csv and json emitters. Throws FormatError.
ComplexityReport parse_report_csv(std::string_view text);
ComplexityReport parse_report_json(std::string_view text);

inline constexpr std::string_view kReportCsvHeader = "name,kind,n,m,d,e,formula_units,macs,params";

}  // namespace lemevit
