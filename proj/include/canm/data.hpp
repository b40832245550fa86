#pragma once

// Retrospective k-space degradation, normalization, misalignment
// augmentation, synthetic paired-phantom generation, and PNG image IO.

#include <cstdint>
#include <string>
#include <utility>

#include "canm/tensor.hpp"

namespace canm {

// ============================================================================
// Normalization
// ============================================================================

struct NormalizationRecord {
  double min = 0.0;
  double max = 1.0;
};

/// Min-max normalization to [0,1]; a constant image maps to zeros with
/// min == max recorded.
std::pair<Tensor, NormalizationRecord> normalize(const Tensor& img);
Tensor denormalize(const Tensor& img, const NormalizationRecord& rec);

// ============================================================================
// k-space degradation
// ============================================================================

struct DegradeResult {
  Tensor lr_small;   // [H/s, W/s]
  Tensor lr_interp;  // [H, W] zero-filled reconstruction
};

/// Orthonormal centered 2-D FFT, retention of the central (H/s, W/s) block,
/// inverse transforms at both sizes. lr_small carries a 1/s intensity rescale
/// so constant images keep their value. The unpaired Nyquist row/column of
/// the even-sized crop is zeroed so the kept band stays conjugate-symmetric
/// and the real-part reconstruction is exact; kept_band_halfwidth() reports
/// the per-axis extent of the surviving frequencies.
DegradeResult kspace_degrade(const Tensor& img, size_t s);

/// Highest absolute frequency preserved per axis: N/(2s) - 1.
inline size_t kept_band_halfwidth(size_t n, size_t s) { return n / (2 * s) - 1; }

// ============================================================================
// Misalignment augmentation
// ============================================================================

struct MisalignSpec {
  double tx = 0.0;         // pixels, [-4, 4]
  double ty = 0.0;         // pixels, [-4, 4]
  double theta_deg = 0.0;  // degrees, [-3, 3]
};

/// Rotates about the image center then translates, bilinear sampling with
/// edge-replicate fill. A zero spec is a bitwise identity; integer
/// translations are exact.
Tensor misalign(const Tensor& img, const MisalignSpec& spec);

// ============================================================================
// Synthetic pairs
// ============================================================================

struct ImagePair {
  Tensor ref;        // [H, W], contrast A
  Tensor hr_target;  // [H, W], contrast B
  Tensor lr_small;   // [H/s, W/s]
  Tensor lr_interp;  // [H, W]
  size_t scale = 4;
  uint64_t seed = 0;
  NormalizationRecord ref_norm, target_norm;
};

/// Shared-geometry soft-ellipse phantom rendered under two intensity
/// transfer curves; the target contrast is degraded through k-space.
/// Pure function of (seed, H, W, s).
ImagePair synth_pair(uint64_t seed, size_t H, size_t W, size_t s);

// ============================================================================
// Image IO
// ============================================================================

/// Reads an 8- or 16-bit grayscale PNG into [0,1].
Tensor read_image(const std::string& path);

/// Writes [0,1] values quantized with round-half-even at the given bit depth
/// (8 or 16). Values outside [0,1] are clamped at quantization.
void write_image(const Tensor& img, const std::string& path, int bit_depth = 8);

/// Writes {ref.png, hr.png, lr_small.png, lr_interp.png, meta.json}.
void export_pair(const ImagePair& pair, const std::string& dir);

}  // namespace canm
