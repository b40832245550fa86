#include "canm/oracles.hpp"

#include <cmath>
#include <complex>
#include <random>

#include "canm/data.hpp"

namespace canm::oracle {

namespace {

// Plain 1x1 convolution: y[b,o,p] = bias[o] + sum_c w[o,c] x[b,c,p].
std::vector<double> conv1x1_ref(const std::vector<double>& x, size_t B, size_t C, size_t HW,
                                const Conv& conv) {
  size_t O = conv.weight.size(0);
  std::vector<double> y(B * O * HW, 0.0);
  const double* w = conv.weight.data();
  const double* bias = conv.bias.data();
  for (size_t b = 0; b < B; ++b)
    for (size_t o = 0; o < O; ++o)
      for (size_t p = 0; p < HW; ++p) {
        double s = bias[o];
        for (size_t c = 0; c < C; ++c) s += w[o * C + c] * x[(b * C + c) * HW + p];
        y[(b * O + o) * HW + p] = s;
      }
  return y;
}

std::vector<double> avgpool_ref(const std::vector<double>& x, size_t B, size_t C, size_t H,
                                size_t W, size_t f) {
  size_t Ho = H / f, Wo = W / f;
  std::vector<double> y(B * C * Ho * Wo);
  for (size_t bc = 0; bc < B * C; ++bc)
    for (size_t oy = 0; oy < Ho; ++oy)
      for (size_t ox = 0; ox < Wo; ++ox) {
        double s = 0;
        for (size_t fy = 0; fy < f; ++fy)
          for (size_t fx = 0; fx < f; ++fx) s += x[bc * H * W + (oy * f + fy) * W + ox * f + fx];
        y[bc * Ho * Wo + oy * Wo + ox] = s / static_cast<double>(f * f);
      }
  return y;
}

void softmax_row(std::vector<double>& row) {
  double mx = row[0];
  for (double v : row) mx = std::max(mx, v);
  double s = 0;
  for (auto& v : row) {
    v = std::exp(v - mx);
    s += v;
  }
  for (auto& v : row) v /= s;
}

}  // namespace

std::vector<double> wab_reference(const std::vector<double>& x, size_t B, size_t C, size_t H,
                                  size_t W, const WabParams& p) {
  size_t w = effective_window(p.window, H, W);
  size_t h = p.heads, d = C / h, T = w * w;
  size_t HW = H * W;
  size_t s = p.shift ? w / 2 : 0;

  std::vector<double> q = conv1x1_ref(x, B, C, HW, p.to_q);
  std::vector<double> k = conv1x1_ref(x, B, C, HW, p.to_k);
  std::vector<double> v = conv1x1_ref(x, B, C, HW, p.to_v);

  auto rolled = [&](const std::vector<double>& m, size_t b, size_t c, size_t y, size_t xx) {
    return m[(b * C + c) * HW + ((y + s) % H) * W + ((xx + s) % W)];
  };

  std::vector<double> attn_out(B * C * HW, 0.0);  // rolled coordinates
  for (size_t b = 0; b < B; ++b)
    for (size_t wy = 0; wy < H / w; ++wy)
      for (size_t wx = 0; wx < W / w; ++wx)
        for (size_t hh = 0; hh < h; ++hh) {
          std::vector<std::vector<double>> logits(T, std::vector<double>(T, 0.0));
          for (size_t t = 0; t < T; ++t) {
            size_t ty = wy * w + t / w, tx = wx * w + t % w;
            for (size_t u = 0; u < T; ++u) {
              size_t uy = wy * w + u / w, ux = wx * w + u % w;
              double dot = 0;
              for (size_t j = 0; j < d; ++j)
                dot += rolled(q, b, hh * d + j, ty, tx) * rolled(k, b, hh * d + j, uy, ux);
              logits[t][u] = dot / std::sqrt(static_cast<double>(d));
            }
          }
          for (auto& row : logits) softmax_row(row);
          for (size_t t = 0; t < T; ++t) {
            size_t ty = wy * w + t / w, tx = wx * w + t % w;
            for (size_t j = 0; j < d; ++j) {
              double acc = 0;
              for (size_t u = 0; u < T; ++u) {
                size_t uy = wy * w + u / w, ux = wx * w + u % w;
                acc += logits[t][u] * rolled(v, b, hh * d + j, uy, ux);
              }
              attn_out[(b * C + hh * d + j) * HW + ty * W + tx] = acc;
            }
          }
        }

  // Undo the roll, then project.
  std::vector<double> unrolled(B * C * HW);
  for (size_t b = 0; b < B; ++b)
    for (size_t c = 0; c < C; ++c)
      for (size_t y = 0; y < H; ++y)
        for (size_t xx = 0; xx < W; ++xx)
          unrolled[(b * C + c) * HW + y * W + xx] =
              attn_out[(b * C + c) * HW + ((y + H - s) % H) * W + ((xx + W - s) % W)];
  return conv1x1_ref(unrolled, B, C, HW, p.proj);
}

std::vector<double> cab_reference(const std::vector<double>& x, size_t B, size_t C, size_t H,
                                  size_t W, const CabParams& p) {
  size_t h = p.heads, d = C / h, HW = H * W;
  std::vector<double> v = conv1x1_ref(x, B, C, HW, p.to_v);
  std::vector<double> out(B * C * HW, 0.0);

  for (size_t b = 0; b < B; ++b)
    for (size_t hh = 0; hh < h; ++hh) {
      std::vector<std::vector<double>> mixed(d, std::vector<double>(d, 0.0));
      if (p.pyramid) {
        std::vector<double> x2 = avgpool_ref(x, B, C, H, W, 2);
        std::vector<double> x4 = avgpool_ref(x, B, C, H, W, 4);
        size_t hw2 = (H / 2) * (W / 2), hw4 = (H / 4) * (W / 4);
        std::vector<double> q2 = conv1x1_ref(x2, B, C, hw2, p.to_q2);
        std::vector<double> k2 = conv1x1_ref(x2, B, C, hw2, p.to_k2);
        std::vector<double> q4 = conv1x1_ref(x4, B, C, hw4, p.to_q4);
        std::vector<double> k4 = conv1x1_ref(x4, B, C, hw4, p.to_k4);
        double a1 = p.alpha1.item(), a2 = p.alpha2.item();
        for (size_t i = 0; i < d; ++i)
          for (size_t j = 0; j < d; ++j) {
            double s2 = 0, s4 = 0;
            for (size_t pp = 0; pp < hw2; ++pp)
              s2 += q2[(b * C + hh * d + i) * hw2 + pp] * k2[(b * C + hh * d + j) * hw2 + pp];
            for (size_t pp = 0; pp < hw4; ++pp)
              s4 += q4[(b * C + hh * d + i) * hw4 + pp] * k4[(b * C + hh * d + j) * hw4 + pp];
            mixed[i][j] = (a1 * s2 + a2 * s4) / std::sqrt(static_cast<double>(d));
          }
      } else {
        std::vector<double> q1 = conv1x1_ref(x, B, C, HW, p.to_q1);
        std::vector<double> k1 = conv1x1_ref(x, B, C, HW, p.to_k1);
        for (size_t i = 0; i < d; ++i)
          for (size_t j = 0; j < d; ++j) {
            double s = 0;
            for (size_t pp = 0; pp < HW; ++pp)
              s += q1[(b * C + hh * d + i) * HW + pp] * k1[(b * C + hh * d + j) * HW + pp];
            mixed[i][j] = s / std::sqrt(static_cast<double>(d));
          }
      }
      for (auto& row : mixed) softmax_row(row);
      for (size_t i = 0; i < d; ++i)
        for (size_t pp = 0; pp < HW; ++pp) {
          double acc = 0;
          for (size_t j = 0; j < d; ++j) acc += mixed[i][j] * v[(b * C + hh * d + j) * HW + pp];
          out[(b * C + hh * d + i) * HW + pp] = acc;
        }
    }
  return conv1x1_ref(out, B, C, HW, p.proj);
}

NbfmReference nbfm_reference(const std::vector<double>& p_deg, const std::vector<double>& p_ref,
                             size_t grid_h, size_t grid_w, size_t L, size_t nh, size_t nw,
                             const std::vector<double>& w) {
  size_t M = grid_h * grid_w, K = nh * nw;
  long rh = static_cast<long>(nh / 2), rw = static_cast<long>(nw / 2);
  NbfmReference out;
  out.similarity.assign(M * K, 0.0);
  out.attention.assign(M * K, 0.0);
  out.matched.assign(M * L, 0.0);

  for (size_t i = 0; i < M; ++i) {
    long iy = static_cast<long>(i / grid_w), ix = static_cast<long>(i % grid_w);
    std::vector<double> logits(K, 0.0);
    std::vector<bool> valid(K, false);
    for (long dy = -rh; dy <= rh; ++dy)
      for (long dx = -rw; dx <= rw; ++dx) {
        size_t k = static_cast<size_t>(dy + rh) * nw + static_cast<size_t>(dx + rw);
        long jy = iy + dy, jx = ix + dx;
        if (jy < 0 || jy >= static_cast<long>(grid_h) || jx < 0 || jx >= static_cast<long>(grid_w))
          continue;
        size_t j = static_cast<size_t>(jy) * grid_w + static_cast<size_t>(jx);
        double dot = 0, na = 0, nb = 0;
        for (size_t l = 0; l < L; ++l) {
          dot += p_deg[i * L + l] * p_ref[j * L + l];
          na += p_deg[i * L + l] * p_deg[i * L + l];
          nb += p_ref[j * L + l] * p_ref[j * L + l];
        }
        double denom = std::max(std::sqrt(na), kMatchEps) * std::max(std::sqrt(nb), kMatchEps);
        out.similarity[i * K + k] = dot / denom;
        logits[k] = out.similarity[i * K + k] * w[k];
        valid[k] = true;
      }
    double mx = -1e300;
    for (size_t k = 0; k < K; ++k)
      if (valid[k]) mx = std::max(mx, logits[k]);
    double sum = 0;
    for (size_t k = 0; k < K; ++k)
      if (valid[k]) {
        out.attention[i * K + k] = std::exp(logits[k] - mx);
        sum += out.attention[i * K + k];
      }
    for (size_t k = 0; k < K; ++k) out.attention[i * K + k] /= sum;
    for (long dy = -rh; dy <= rh; ++dy)
      for (long dx = -rw; dx <= rw; ++dx) {
        size_t k = static_cast<size_t>(dy + rh) * nw + static_cast<size_t>(dx + rw);
        if (!valid[k]) continue;
        size_t j = static_cast<size_t>(iy + dy) * grid_w + static_cast<size_t>(ix + dx);
        for (size_t l = 0; l < L; ++l)
          out.matched[i * L + l] += out.attention[i * K + k] * p_ref[j * L + l];
      }
  }
  return out;
}

// ============================================================================
// Suite runner
// ============================================================================

namespace {

Conv random_conv1x1(size_t out_c, size_t in_c, std::mt19937_64& gen) {
  Conv c;
  c.weight = Tensor::randn({out_c, in_c, 1, 1}, gen, 0.3);
  c.bias = Tensor::randn({out_c}, gen, 0.1);
  return c;
}

WabParams random_wab(size_t C, size_t heads, size_t window, bool shift, std::mt19937_64& gen) {
  WabParams p;
  p.to_q = random_conv1x1(C, C, gen);
  p.to_k = random_conv1x1(C, C, gen);
  p.to_v = random_conv1x1(C, C, gen);
  p.proj = random_conv1x1(C, C, gen);
  p.heads = heads;
  p.window = window;
  p.shift = shift;
  return p;
}

CabParams random_cab(size_t C, size_t heads, std::mt19937_64& gen) {
  CabParams p;
  p.to_v = random_conv1x1(C, C, gen);
  p.proj = random_conv1x1(C, C, gen);
  p.heads = heads;
  p.to_q2 = random_conv1x1(C, C, gen);
  p.to_k2 = random_conv1x1(C, C, gen);
  p.to_q4 = random_conv1x1(C, C, gen);
  p.to_k4 = random_conv1x1(C, C, gen);
  p.alpha1 = Tensor::from_vector({1}, {0.8});
  p.alpha2 = Tensor::from_vector({1}, {1.3});
  return p;
}

OracleResult run_wab_suite() {
  OracleResult r{"wab", 0.0, 1e-10, false};
  NoGradGuard ng;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 gen(seed);
    size_t B = 1, C = 4, H = 8, W = 8;
    Tensor x = Tensor::uniform({B, C, H, W}, gen, -1.0, 1.0);
    WabParams p = random_wab(C, 2, 4, seed % 2 == 0, gen);
    Tensor y = wab_forward(x, p);
    std::vector<double> ref = wab_reference(x.vec(), B, C, H, W, p);
    for (size_t i = 0; i < ref.size(); ++i)
      r.max_diff = std::max(r.max_diff, std::abs(ref[i] - y.data()[i]));
  }
  r.pass = r.max_diff < r.threshold;
  return r;
}

OracleResult run_cab_suite() {
  OracleResult r{"cab", 0.0, 1e-10, false};
  NoGradGuard ng;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 gen(seed + 100);
    size_t B = 1, C = 4, H = 8, W = 8;
    size_t heads = seed % 2 == 0 ? 2 : 1;
    Tensor x = Tensor::uniform({B, C, H, W}, gen, -1.0, 1.0);
    CabParams p = random_cab(C, heads, gen);
    Tensor y = cab_forward(x, p);
    std::vector<double> ref = cab_reference(x.vec(), B, C, H, W, p);
    for (size_t i = 0; i < ref.size(); ++i)
      r.max_diff = std::max(r.max_diff, std::abs(ref[i] - y.data()[i]));
  }
  r.pass = r.max_diff < r.threshold;
  return r;
}

OracleResult run_nbfm_suite() {
  OracleResult r{"nbfm", 0.0, 1e-10, false};
  NoGradGuard ng;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 gen(seed + 200);
    size_t gh = 8, gw = 8, L = 18;
    NbfmParams p;
    p.neigh_h = 3;
    p.neigh_w = 3;
    p.weight = Tensor::uniform({9}, gen, 0.5, 1.5);
    Tensor pd = Tensor::uniform({1, gh * gw, L}, gen, -1.0, 1.0);
    Tensor pr = Tensor::uniform({1, gh * gw, L}, gen, -1.0, 1.0);
    MatchResult m = nbfm_match(pd, pr, gh, gw, p);
    NbfmReference ref = nbfm_reference(pd.vec(), pr.vec(), gh, gw, L, 3, 3, p.weight.vec());
    for (size_t i = 0; i < ref.similarity.size(); ++i) {
      r.max_diff = std::max(r.max_diff, std::abs(ref.similarity[i] - m.similarity.data()[i]));
      r.max_diff = std::max(r.max_diff, std::abs(ref.attention[i] - m.attention.data()[i]));
    }
    for (size_t i = 0; i < ref.matched.size(); ++i)
      r.max_diff = std::max(r.max_diff, std::abs(ref.matched[i] - m.matched.data()[i]));
  }
  r.pass = r.max_diff < r.threshold;
  return r;
}

OracleResult run_gfm_coverage_suite() {
  // A neighborhood covering the whole grid makes global matching identical.
  OracleResult r{"gfm_coverage", 0.0, 1e-12, false};
  NoGradGuard ng;
  for (uint64_t seed = 1; seed <= 3; ++seed) {
    std::mt19937_64 gen(seed + 300);
    size_t gh = 4, gw = 4, L = 10;
    NbfmParams p;
    p.neigh_h = 7;
    p.neigh_w = 7;
    p.weight = Tensor::uniform({49}, gen, 0.5, 1.5);
    Tensor pd = Tensor::uniform({1, gh * gw, L}, gen, -1.0, 1.0);
    Tensor pr = Tensor::uniform({1, gh * gw, L}, gen, -1.0, 1.0);
    MatchResult a = nbfm_match(pd, pr, gh, gw, p);
    MatchResult b = global_match(pd, pr, gh, gw, p);
    r.max_diff = std::max(r.max_diff, max_abs_diff(a.matched, b.matched));
  }
  r.pass = r.max_diff < r.threshold;
  return r;
}

// Kept-band DFT coefficients by separable direct summation (independent of
// the FFT library used by the implementation).
std::vector<std::complex<double>> band_dft(const Tensor& img, long bh, long bw) {
  size_t H = img.size(0), W = img.size(1);
  size_t nfy = static_cast<size_t>(2 * bh + 1), nfx = static_cast<size_t>(2 * bw + 1);
  std::vector<std::complex<double>> rows(nfy * W, 0.0);
  for (long fy = -bh; fy <= bh; ++fy) {
    size_t r = static_cast<size_t>(fy + bh);
    for (size_t x = 0; x < W; ++x) {
      std::complex<double> acc = 0.0;
      for (size_t y = 0; y < H; ++y) {
        double ang = -2.0 * M_PI * static_cast<double>(fy) * static_cast<double>(y) /
                     static_cast<double>(H);
        acc += img.data()[y * W + x] * std::complex<double>(std::cos(ang), std::sin(ang));
      }
      rows[r * W + x] = acc;
    }
  }
  std::vector<std::complex<double>> band(nfy * nfx, 0.0);
  for (size_t r = 0; r < nfy; ++r)
    for (long fx = -bw; fx <= bw; ++fx) {
      std::complex<double> acc = 0.0;
      for (size_t x = 0; x < W; ++x) {
        double ang = -2.0 * M_PI * static_cast<double>(fx) * static_cast<double>(x) /
                     static_cast<double>(W);
        acc += rows[r * W + x] * std::complex<double>(std::cos(ang), std::sin(ang));
      }
      band[r * nfx + static_cast<size_t>(fx + bw)] = acc;
    }
  return band;
}

OracleResult run_spectral_suite() {
  OracleResult r{"spectral", 0.0, 1e-9, false};
  for (uint64_t seed = 1; seed <= 3; ++seed) {
    std::mt19937_64 gen(seed + 400);
    for (size_t n : {16u, 64u}) {
      for (size_t s : {2u, 4u}) {
        Tensor img = Tensor::uniform({n, n}, gen, 0.0, 1.0);
        DegradeResult deg = kspace_degrade(img, s);
        long b = static_cast<long>(kept_band_halfwidth(n, s));
        auto band_hr = band_dft(img, b, b);
        auto band_lr = band_dft(deg.lr_interp, b, b);
        for (size_t i = 0; i < band_hr.size(); ++i)
          r.max_diff = std::max(r.max_diff, std::abs(band_hr[i] - band_lr[i]) /
                                                std::sqrt(static_cast<double>(n * n)));
      }
    }
  }
  r.pass = r.max_diff < r.threshold;
  return r;
}

OracleResult run_fold_suite() {
  OracleResult r{"fold", 0.0, 1e-12, false};
  NoGradGuard ng;
  for (uint64_t seed = 1; seed <= 3; ++seed) {
    std::mt19937_64 gen(seed + 500);
    Tensor x = Tensor::uniform({1, 3, 7, 6}, gen, -1.0, 1.0);
    Tensor p = unfold(x, 3, 3);
    // Direct index oracle for the unfold layout.
    size_t C = 3, H = 7, W = 6;
    for (size_t y = 0; y < H; ++y)
      for (size_t xx = 0; xx < W; ++xx)
        for (size_t c = 0; c < C; ++c)
          for (size_t py = 0; py < 3; ++py)
            for (size_t px = 0; px < 3; ++px) {
              long iy = static_cast<long>(y) + static_cast<long>(py) - 1;
              long ix = static_cast<long>(xx) + static_cast<long>(px) - 1;
              double expect = 0.0;
              if (iy >= 0 && iy < static_cast<long>(H) && ix >= 0 && ix < static_cast<long>(W))
                expect = x.data()[c * H * W + iy * W + ix];
              double got = p.data()[(y * W + xx) * (C * 9) + (c * 3 + py) * 3 + px];
              r.max_diff = std::max(r.max_diff, std::abs(expect - got));
            }
    Tensor back = fold(p, C, H, W, 3, 3);
    r.max_diff = std::max(r.max_diff, max_abs_diff(back, x));
  }
  r.pass = r.max_diff < r.threshold;
  return r;
}

}  // namespace

OracleReport run_oracles(const std::vector<std::string>& suites) {
  OracleReport report;
  for (const auto& name : suites) {
    if (name == "wab")
      report.results.push_back(run_wab_suite());
    else if (name == "cab")
      report.results.push_back(run_cab_suite());
    else if (name == "nbfm") {
      report.results.push_back(run_nbfm_suite());
      report.results.push_back(run_gfm_coverage_suite());
    } else if (name == "spectral")
      report.results.push_back(run_spectral_suite());
    else if (name == "fold")
      report.results.push_back(run_fold_suite());
    else
      throw UsageError("run_oracles: unknown suite '" + name + "'");
  }
  return report;
}

}  // namespace canm::oracle
