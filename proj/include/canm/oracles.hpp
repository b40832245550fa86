#pragma once

// Independent brute-force reference implementations. Everything here is
// written as plain scalar loops over raw buffers and never calls the
// vectorized tensor-op path it is used to check.

#include <cstddef>
#include <string>
#include <vector>

#include "canm/attention.hpp"
#include "canm/matching.hpp"

namespace canm::oracle {

/// Window attention computed with literal per-window, per-head loops.
std::vector<double> wab_reference(const std::vector<double>& x, size_t B, size_t C, size_t H,
                                  size_t W, const WabParams& p);

/// Pyramid channel attention computed directly: downsample, project, form
/// the per-head channel affinities, mix by alpha1/alpha2, softmax, apply to
/// the full-scale V, project.
std::vector<double> cab_reference(const std::vector<double>& x, size_t B, size_t C, size_t H,
                                  size_t W, const CabParams& p);

/// Neighborhood matching computed with a double loop over queries and
/// neighborhood offsets (patch tensors are [M, L] for a single sample).
struct NbfmReference {
  std::vector<double> similarity;  // [M, K], 0 where invalid
  std::vector<double> attention;   // [M, K], exactly 0 where invalid
  std::vector<double> matched;     // [M, L]
};
NbfmReference nbfm_reference(const std::vector<double>& p_deg, const std::vector<double>& p_ref,
                             size_t grid_h, size_t grid_w, size_t L, size_t nh, size_t nw,
                             const std::vector<double>& w);

struct OracleResult {
  std::string name;
  double max_diff = 0.0;
  double threshold = 0.0;
  bool pass = false;
};

struct OracleReport {
  std::vector<OracleResult> results;
  bool all_pass() const {
    for (const auto& r : results)
      if (!r.pass) return false;
    return true;
  }
};

/// Runs the named brute-force oracle suites ("wab", "cab", "nbfm",
/// "spectral", "fold") against the vectorized implementations on a fixed
/// seed matrix.
OracleReport run_oracles(const std::vector<std::string>& suites);

}  // namespace canm::oracle
