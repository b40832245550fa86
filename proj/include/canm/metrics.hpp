#pragma once

// Loss, image-quality metrics, optimizer, and the finite-difference gradient
// checker used throughout verification.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "canm/tensor.hpp"

namespace canm {

// ============================================================================
// Loss and image metrics
// ============================================================================

/// Mean absolute error (mean reduction, invariant to batch size).
Tensor l1_loss(const Tensor& y, const Tensor& t);

/// 10*log10(data_range^2 / MSE); identical inputs give +infinity.
double psnr(const Tensor& y, const Tensor& t, double data_range = 1.0);

/// Single-scale SSIM, 11x11 Gaussian window sigma=1.5, C1=(0.01 L)^2,
/// C2=(0.03 L)^2, averaged over valid window positions. 2-d inputs.
double ssim(const Tensor& y, const Tensor& t, double data_range = 1.0);

struct MetricReport {
  std::vector<double> psnr_per_image;
  std::vector<double> ssim_per_image;
  std::vector<double> l1_per_image;
  double psnr_mean = 0, psnr_std = 0;
  double ssim_mean = 0, ssim_std = 0;
  double l1_mean = 0, l1_std = 0;

  static MetricReport from_pairs(const std::vector<Tensor>& outputs,
                                 const std::vector<Tensor>& targets, double data_range = 1.0);
};

// ============================================================================
// Optimizer
// ============================================================================

/// Adam state over a named parameter set. Learning rate starts at 1e-4 and
/// attenuates by 0.988 per epoch.
struct OptimState {
  double base_lr = 1e-4;
  double decay = 0.988;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  size_t step = 0;
  size_t epoch = 0;

  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;

  double effective_lr() const;
};

/// Full-training defaults (batch size and epoch budget) from the training
/// strategy; the desk harness trains with batch 1 and a step budget instead.
struct TrainSpec {
  size_t batch_size = 4;
  size_t max_epochs = 200;
};

/// One bias-corrected Adam update over every parameter in the map. Every
/// parameter must carry a gradient.
void adam_step(std::map<std::string, Tensor>& params, OptimState& state);

// ============================================================================
// Finite-difference gradient checking
// ============================================================================

struct GradCheckReport {
  double max_rel_err = 0.0;
  size_t coords_checked = 0;
  double tolerance = 0.0;
  bool pass = true;
  std::vector<std::string> failures;  // capped listing of failing coordinates
};

/// Central differences (default step 1e-4) against recorded adjoints for
/// every coordinate of every input. Relative error uses
/// |fd - ad| / max(1, |fd|, |ad|). fn must be pure and return a scalar.
/// Clears the calling thread's autodiff graph.
GradCheckReport gradcheck(const std::function<Tensor(std::vector<Tensor>&)>& fn,
                          std::vector<Tensor> inputs, double tolerance = 1e-6,
                          double step = 1e-4);

}  // namespace canm
