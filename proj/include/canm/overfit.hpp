#pragma once

// Desk-scale overfit-training harness: Adam on the L1 objective over a
// single synthetic pair, deterministic in the seed.

#include <cstdint>
#include <string>
#include <vector>

#include "canm/data.hpp"
#include "canm/metrics.hpp"
#include "canm/network.hpp"

namespace canm {

struct OverfitOptions {
  size_t steps = 200;
  size_t steps_per_epoch = 100;  // lr attenuates by 0.988 every such block
  double base_lr = 1e-4;
};

struct OverfitResult {
  std::vector<double> loss_curve;  // per-step training loss
  std::vector<double> lr_curve;    // effective lr per step
  double baseline_psnr = 0;        // zero-filled lr_interp vs target
  double baseline_ssim = 0;
  double final_psnr = 0;  // network output vs target
  double final_ssim = 0;
  double step0_loss = 0;
  double final_loss = 0;
  Tensor output;  // final network output [H, W]
};

/// Trains net in place on the pair (batch 1). Aborts with UsageError naming
/// the step index if the loss turns non-finite.
OverfitResult overfit_train(Network& net, const ImagePair& pair, const OverfitOptions& opts);

}  // namespace canm
