#include "canm/overfit.hpp"

#include <cmath>

namespace canm {

OverfitResult overfit_train(Network& net, const ImagePair& pair, const OverfitOptions& opts) {
  const NetworkConfig& cfg = net.config;
  if (pair.ref.size(0) != cfg.input_h || pair.ref.size(1) != cfg.input_w)
    throw ShapeError("overfit_train: pair resolution " + shape_str(pair.ref.shape()) +
                     " does not match config " + std::to_string(cfg.input_h) + "x" +
                     std::to_string(cfg.input_w));

  size_t H = cfg.input_h, W = cfg.input_w;
  Tensor ref = reshape(pair.ref, {1, 1, H, W});
  Tensor lr = reshape(pair.lr_interp, {1, 1, H, W});
  Tensor target = reshape(pair.hr_target, {1, 1, H, W});

  OverfitResult result;
  result.baseline_psnr = psnr(pair.lr_interp, pair.hr_target);
  result.baseline_ssim = ssim(pair.lr_interp, pair.hr_target);

  std::map<std::string, Tensor> params = net.params();
  OptimState state;
  state.base_lr = opts.base_lr;

  auto& graph = autodiff::GraphT<double>::tls();
  for (size_t step = 0; step < opts.steps; ++step) {
    state.epoch = step / opts.steps_per_epoch;
    graph.clear();
    for (auto& [name, p] : params) p.set_requires_grad(true);
    Tensor out = forward(net, ref, lr);
    Tensor loss = l1_loss(out, target);
    double loss_v = loss.item();
    if (!std::isfinite(loss_v))
      throw UsageError("overfit_train: loss diverged (non-finite) at step " + std::to_string(step));
    result.loss_curve.push_back(loss_v);
    result.lr_curve.push_back(state.effective_lr());
    loss.backward();
    graph.clear();
    adam_step(params, state);
    for (auto& [name, p] : params) p.zero_grad();
  }
  graph.clear();

  // Final evaluation with frozen weights.
  Tensor out;
  {
    NoGradGuard ng;
    for (auto& [name, p] : params) p.set_requires_grad(false);
    out = forward(net, ref, lr);
    Tensor final_loss = l1_loss(out, target);
    result.final_loss = final_loss.item();
  }
  Tensor out2d = reshape(out, {H, W});
  result.output = out2d;
  result.final_psnr = psnr(out2d, pair.hr_target);
  result.final_ssim = ssim(out2d, pair.hr_target);
  result.step0_loss = result.loss_curve.empty() ? result.final_loss : result.loss_curve.front();
  return result;
}

}  // namespace canm
