#pragma once

// AdaIN style alignment and neighborhood-based feature matching with soft
// attention and a learnable neighborhood weight matrix.

#include <atomic>
#include <cstdint>

#include "canm/attention.hpp"
#include "canm/tensor.hpp"

namespace canm {

// ============================================================================
// AdaIN
// ============================================================================

struct AdainParams {
  Conv conv_gamma;  // 3x3, C -> C, producing the full spatial gamma map
  Conv conv_beta;   // 3x3, C -> C, producing the full spatial beta map

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, Tensor&)>& fn) {
    conv_gamma.visit_params(prefix + ".conv_gamma", fn);
    conv_beta.visit_params(prefix + ".conv_beta", fn);
  }
};

/// Epsilon guard shared by the instance-norm denominator and cosine norms.
inline constexpr double kMatchEps = 1e-8;

/// Normalizes x_ref per sample and channel to zero mean / unit deviation over
/// its spatial extent, then restyles with the gamma/beta maps predicted from
/// x_deg.
Tensor adain(const Tensor& x_ref, const Tensor& x_deg, const AdainParams& p);

// ============================================================================
// Patch extraction
// ============================================================================

/// Dense overlapping unfold, stride 1, zero padding (p-1)/2: patch i is
/// centered at pixel i, so the patch grid equals the feature grid.
/// Returns [B, H*W, C*ph*pw] and reports the grid dims.
Tensor unfold_patches(const Tensor& x, size_t ph, size_t pw, size_t* grid_h, size_t* grid_w);

/// Overlap-normalized inverse of unfold_patches.
Tensor fold_patches(const Tensor& patches, size_t C, size_t H, size_t W, size_t ph, size_t pw);

// ============================================================================
// Matching
// ============================================================================

struct NbfmParams {
  size_t patch_h = 3, patch_w = 3;
  size_t neigh_h = 3, neigh_w = 3;  // odd, in patch-grid steps
  Tensor weight;                    // [neigh_h * neigh_w], shared across queries
  Conv fuse;                        // 1x1, 2C -> C

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, Tensor&)>& fn) {
    fn(prefix + ".w", weight);
    fuse.visit_params(prefix + ".fuse", fn);
  }
};

struct MatchResult {
  Tensor similarity;  // [B, M, K] for nbfm, [B, M, M] for global matching
  Tensor attention;   // same shape; rows sum to 1 over valid entries,
                      // exactly 0 at invalid entries
  Tensor matched;     // [B, M, L] matched reference patches
  std::vector<uint8_t> validity;  // per-query validity of each column
  size_t grid_h = 0, grid_w = 0;
  uint64_t similarity_count = 0;  // cosine evaluations performed by this call
};

/// Process-wide accumulated count of cosine similarity evaluations.
std::atomic<uint64_t>& similarity_counter();
void reset_similarity_counter();

/// For each query patch i, cosine similarity against the neighborhood of
/// reference patches centered on i's grid position, elementwise-weighted by
/// the learnable matrix, soft-attention combined. Out-of-grid offsets are
/// masked before the softmax and carry exactly zero attention.
MatchResult nbfm_match(const Tensor& p_deg, const Tensor& p_ref, size_t grid_h, size_t grid_w,
                       const NbfmParams& p);

/// Identical contract except every reference patch is a candidate for every
/// query (the GFM ablation). The neighborhood weight applies to candidates
/// whose grid offset falls inside the neighborhood window.
MatchResult global_match(const Tensor& p_deg, const Tensor& p_ref, size_t grid_h, size_t grid_w,
                         const NbfmParams& p);

/// Channel-concatenates the matched map with the LR features and reduces back
/// to C with the 1x1 fusion convolution.
Tensor nbfm_fuse(const Tensor& matched, const Tensor& x_deg, const Conv& fuse);

}  // namespace canm
