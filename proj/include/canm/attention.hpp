#pragma once

// Compound transformer layer and its constituents: window attention,
// pyramid channel attention, gated feed-forward block, and the encoder /
// decoder stages built from them.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "canm/tensor.hpp"

namespace canm {

/// Convolution parameter bundle (weight [O, C/g, kh, kw], bias [O]).
struct Conv {
  Tensor weight;
  Tensor bias;
  size_t stride = 1;
  size_t pad = 0;
  size_t groups = 1;

  Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad, groups); }
  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, Tensor&)>& fn) {
    fn(prefix + ".weight", weight);
    fn(prefix + ".bias", bias);
  }
};

/// Per-pixel channel normalization (LayerNorm over the channel axis) with a
/// learnable per-channel gain and bias.
struct NormParams {
  Tensor gain;  // [C]
  Tensor bias;  // [C]
  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, Tensor&)>& fn) {
    fn(prefix + ".gain", gain);
    fn(prefix + ".bias", bias);
  }
};

Tensor channel_layernorm(const Tensor& x, const NormParams& p, double eps = 1e-6);

// ============================================================================
// Window attention
// ============================================================================

struct WabParams {
  Conv to_q, to_k, to_v, proj;  // 1x1 projections
  size_t heads = 1;
  size_t window = 8;  // clamped to min(H, W) for maps smaller than the window
  bool shift = false;
};

/// Effective window size for an HxW map: the configured size clamped to the
/// full map when the map is smaller.
size_t effective_window(size_t window, size_t H, size_t W);

/// [B,C,H,W] -> [B*nWindows, C, w, w]. When shift is set the map is first
/// rolled by (-w/2, -w/2) so pixels exchange windows; window_reverse with the
/// same flags is an exact inverse.
Tensor window_partition(const Tensor& x, size_t w, bool shift);
Tensor window_reverse(const Tensor& windows, size_t w, bool shift, size_t B, size_t H, size_t W);

/// Per-window multi-head self-attention, pixels as tokens, d = C/heads.
Tensor wab_forward(const Tensor& x, const WabParams& p);

// ============================================================================
// Channel attention (pyramid)
// ============================================================================

struct CabParams {
  Conv to_v, proj;
  size_t heads = 1;
  bool pyramid = true;
  // Pyramid path: Q/K extracted after 2x and 4x downsampling, mixed by the
  // learnable scalars alpha1/alpha2.
  Conv to_q2, to_k2;
  Conv to_q4, to_k4;
  Tensor alpha1, alpha2;  // [1]
  // Single full-scale path (pyramid disabled).
  Conv to_q1, to_k1;
};

/// Channel self-attention with (C/h)x(C/h) per-head affinities; V flattened
/// at full scale.
Tensor cab_forward(const Tensor& x, const CabParams& p);

// ============================================================================
// Feed-forward block
// ============================================================================

/// 1x1 expansion to 2*r*C, gelu gate over split halves, depthwise 3x3,
/// 1x1 projection back to C.
struct FfbParams {
  Conv expand;
  Conv dwconv;
  Conv project;
};

Tensor ffb_forward(const Tensor& x, const FfbParams& p);

// ============================================================================
// Compound transformer layer
// ============================================================================

struct CtlParams {
  NormParams norm1, norm2;
  std::optional<WabParams> wab;
  std::optional<CabParams> cab;
  std::optional<Conv> cnn;  // CNN-only ablation: 3x3 conv producing 2C
  Conv dr;                  // dimensional reduction back to C
  FfbParams ffb;

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, Tensor&)>& fn);
};

/// CTL(x) = x + FFB(norm2(dr(concat(WAB(norm1(x)), CAB(norm1(x)))))).
/// Input and output shapes are identical.
Tensor ctl_forward(const Tensor& x, const CtlParams& p);

// ============================================================================
// Stages
// ============================================================================

struct StageParams {
  std::vector<CtlParams> ctls;
  bool is_decoder = false;
  // Encoder: optional trailing 3x3 stride-2 downsampler.
  std::optional<Conv> down;
  // Decoder: leading upsampler (1x1 channel expansion + pixel shuffle) and
  // 1x1 skip fusion.
  std::optional<Conv> up_expand;
  std::optional<Conv> skip_fuse;

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, Tensor&)>& fn);
};

struct CteOutput {
  Tensor feature;  // CTL-stack output at the stage's level (skip/match source)
  Tensor down;     // downsampled output (defined when the stage has a downsampler)
};

CteOutput cte_forward(const Tensor& x, const StageParams& p);
Tensor ctd_forward(const Tensor& deep, const Tensor& skip, const StageParams& p);

/// Spec-shaped stage entry point: encoder stages return the (downsampled)
/// output, decoder stages require the skip input.
Tensor stage_forward(const Tensor& x, const StageParams& p, const Tensor* skip = nullptr);

}  // namespace canm
