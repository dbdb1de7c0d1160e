#pragma once

// Central finite-difference gradient checks in 64-bit.
//
// rel_err = |analytic − numeric| / max(|analytic|, |numeric|, floor)

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "lemevit/model.hpp"

namespace lemevit {

struct GradcheckOptions {
  double step = 1e-5;
  double floor = 1e-5;
  /// Coordinates checked per leaf tensor; 0 checks every coordinate.
  std::size_t coords_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GradcheckResult {
  std::string name;
  std::size_t coords = 0;
  double max_rel_err = 0.0;
  std::string worst;  // "tensor[index]" of the largest error

  bool passed(double tolerance = 1e-4) const { return max_rel_err < tolerance; }
};

using GradLeaves = std::vector<std::pair<std::string, Tensor<double>*>>;
/// Builds a scalar loss; every leaf must enter the graph through Graph::param.
using GradLossFn = std::function<Var<double>(Graph<double>&)>;

GradcheckResult check_gradients(const std::string& name, const GradLeaves& leaves,
                                const GradLossFn& loss, const GradcheckOptions& opts = {});

/// One block (D=8, head_dim 4, 4×4 image grid, M=4, E=4) with perturbed
/// random parameters; image tokens and meta tokens are checked too.
GradcheckResult gradcheck_block(BlockKind kind, bool dca_sequential, const GradcheckOptions& opts = {});

/// tiny-narrow with M=4 on a 64×64 input, coordinates sampled per tensor.
GradcheckResult gradcheck_model(const GradcheckOptions& opts = {});

/// Blocks CA, DCA parallel, DCA sequential, SA, then the model.
std::vector<GradcheckResult> run_gradcheck_suite(const GradcheckOptions& opts = {});

}  // namespace lemevit
