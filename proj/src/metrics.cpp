#include "canm/metrics.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace canm {

Tensor l1_loss(const Tensor& y, const Tensor& t) {
  if (y.shape() != t.shape())
    throw ShapeError("l1_loss: shapes " + shape_str(y.shape()) + " vs " + shape_str(t.shape()));
  return mean_all(abs_t(sub(y, t)));
}

double psnr(const Tensor& y, const Tensor& t, double data_range) {
  if (y.shape() != t.shape())
    throw ShapeError("psnr: shapes " + shape_str(y.shape()) + " vs " + shape_str(t.shape()));
  double mse = 0;
  for (size_t i = 0; i < y.numel(); ++i) {
    double d = y.data()[i] - t.data()[i];
    mse += d * d;
  }
  mse /= static_cast<double>(y.numel());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(data_range * data_range / mse);
}

namespace {

std::vector<double> gaussian_window11() {
  constexpr int k = 11;
  constexpr double sigma = 1.5;
  std::vector<double> w(k);
  double s = 0;
  for (int i = 0; i < k; ++i) {
    double d = i - (k - 1) / 2.0;
    w[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    s += w[i];
  }
  for (auto& v : w) v /= s;
  return w;
}

// Valid-mode separable filtering with a 1-d window along rows then columns.
std::vector<double> filter_valid(const std::vector<double>& img, size_t H, size_t W,
                                 const std::vector<double>& win) {
  size_t k = win.size();
  size_t Wo = W - k + 1, Ho = H - k + 1;
  std::vector<double> tmp(H * Wo);
  for (size_t y = 0; y < H; ++y)
    for (size_t x = 0; x < Wo; ++x) {
      double s = 0;
      for (size_t i = 0; i < k; ++i) s += win[i] * img[y * W + x + i];
      tmp[y * Wo + x] = s;
    }
  std::vector<double> out(Ho * Wo);
  for (size_t y = 0; y < Ho; ++y)
    for (size_t x = 0; x < Wo; ++x) {
      double s = 0;
      for (size_t i = 0; i < k; ++i) s += win[i] * tmp[(y + i) * Wo + x];
      out[y * Wo + x] = s;
    }
  return out;
}

}  // namespace

double ssim(const Tensor& y, const Tensor& t, double data_range) {
  if (y.shape() != t.shape())
    throw ShapeError("ssim: shapes " + shape_str(y.shape()) + " vs " + shape_str(t.shape()));
  if (y.ndim() != 2) throw UsageError("ssim: expected 2-d images, got " + shape_str(y.shape()));
  size_t H = y.size(0), W = y.size(1);
  if (H < 11 || W < 11)
    throw UsageError("ssim: image " + shape_str(y.shape()) + " smaller than the 11x11 window");

  const std::vector<double> win = gaussian_window11();
  const std::vector<double>& a = y.vec();
  const std::vector<double>& b = t.vec();
  std::vector<double> aa(a.size()), bb(b.size()), ab(a.size());
  for (size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  std::vector<double> mu_a = filter_valid(a, H, W, win);
  std::vector<double> mu_b = filter_valid(b, H, W, win);
  std::vector<double> m_aa = filter_valid(aa, H, W, win);
  std::vector<double> m_bb = filter_valid(bb, H, W, win);
  std::vector<double> m_ab = filter_valid(ab, H, W, win);

  const double c1 = (0.01 * data_range) * (0.01 * data_range);
  const double c2 = (0.03 * data_range) * (0.03 * data_range);
  double acc = 0;
  for (size_t i = 0; i < mu_a.size(); ++i) {
    double ma = mu_a[i], mb = mu_b[i];
    double va = m_aa[i] - ma * ma;
    double vb = m_bb[i] - mb * mb;
    double cov = m_ab[i] - ma * mb;
    acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return acc / static_cast<double>(mu_a.size());
}

MetricReport MetricReport::from_pairs(const std::vector<Tensor>& outputs,
                                      const std::vector<Tensor>& targets, double data_range) {
  if (outputs.size() != targets.size()) throw UsageError("MetricReport: list size mismatch");
  MetricReport r;
  for (size_t i = 0; i < outputs.size(); ++i) {
    r.psnr_per_image.push_back(psnr(outputs[i], targets[i], data_range));
    r.ssim_per_image.push_back(ssim(outputs[i], targets[i], data_range));
    NoGradGuard ng;
    r.l1_per_image.push_back(l1_loss(outputs[i], targets[i]).item());
  }
  auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = 0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    sd = 0;
    for (double x : v) sd += (x - mean) * (x - mean);
    sd = std::sqrt(sd / static_cast<double>(v.size()));
  };
  if (!outputs.empty()) {
    stats(r.psnr_per_image, r.psnr_mean, r.psnr_std);
    stats(r.ssim_per_image, r.ssim_mean, r.ssim_std);
    stats(r.l1_per_image, r.l1_mean, r.l1_std);
  }
  return r;
}

// ============================================================================
// Adam
// ============================================================================

double OptimState::effective_lr() const { return base_lr * std::pow(decay, static_cast<double>(epoch)); }

void adam_step(std::map<std::string, Tensor>& params, OptimState& state) {
  // Validate first so a missing gradient never leaves a half-applied step.
  for (auto& [name, p] : params) {
    if (!p.has_grad()) throw UsageError("adam_step: parameter '" + name + "' has no gradient");
  }
  state.step += 1;
  const double lr = state.effective_lr();
  const double b1 = state.beta1, b2 = state.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    const std::vector<double>& g = p.grad();
    std::vector<double>& m = state.m[name];
    std::vector<double>& v = state.v[name];
    if (m.empty()) m.assign(p.numel(), 0.0);
    if (v.empty()) v.assign(p.numel(), 0.0);
    if (m.size() != p.numel())
      throw UsageError("adam_step: moment shape mismatch for '" + name + "'");
    double* d = p.data();
    for (size_t i = 0; i < p.numel(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      d[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

// ============================================================================
// Gradient checking
// ============================================================================

GradCheckReport gradcheck(const std::function<Tensor(std::vector<Tensor>&)>& fn,
                          std::vector<Tensor> inputs, double tolerance, double step) {
  GradCheckReport report;
  report.tolerance = tolerance;

  auto& graph = autodiff::GraphT<double>::tls();
  graph.clear();
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  Tensor out = fn(inputs);
  if (out.numel() != 1) throw UsageError("gradcheck: fn must return a scalar");
  out.backward();

  std::vector<std::vector<double>> adjoints;
  for (auto& in : inputs)
    adjoints.push_back(in.has_grad() ? in.grad() : std::vector<double>(in.numel(), 0.0));
  for (auto& in : inputs) in.zero_grad();
  graph.clear();

  {
    NoGradGuard ng;
    for (size_t k = 0; k < inputs.size(); ++k) {
      Tensor& x = inputs[k];
      for (size_t i = 0; i < x.numel(); ++i) {
        double orig = x.data()[i];
        x.data()[i] = orig + step;
        double fp = fn(inputs).item();
        x.data()[i] = orig - step;
        double fm = fn(inputs).item();
        x.data()[i] = orig;
        double fd = (fp - fm) / (2.0 * step);
        double ad = adjoints[k][i];
        double rel = std::abs(fd - ad) / std::max({1.0, std::abs(fd), std::abs(ad)});
        report.max_rel_err = std::max(report.max_rel_err, rel);
        ++report.coords_checked;
        if (rel >= tolerance && report.failures.size() < 10) {
          std::ostringstream os;
          os << "input" << k << "[" << i << "]: fd=" << fd << " ad=" << ad << " rel=" << rel;
          report.failures.push_back(os.str());
        }
      }
    }
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

}  // namespace canm
