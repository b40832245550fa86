#include "canm/matching.hpp"

#include <cmath>

namespace canm {

Tensor adain(const Tensor& x_ref, const Tensor& x_deg, const AdainParams& p) {
  if (x_ref.shape() != x_deg.shape())
    throw ShapeError("adain: reference " + shape_str(x_ref.shape()) + " vs degraded " +
                     shape_str(x_deg.shape()));
  if (x_ref.ndim() != 4) throw ShapeError("adain: expected 4-d features");
  Tensor mu = mean_axes(x_ref, {2, 3}, true);
  Tensor d = sub(x_ref, mu);
  Tensor var = mean_axes(mul(d, d), {2, 3}, true);
  Tensor sigma = clamp_min(sqrt_t(var), kMatchEps);
  Tensor normalized = divt(d, sigma);
  Tensor gamma = p.conv_gamma.forward(x_deg);
  Tensor beta = p.conv_beta.forward(x_deg);
  return add(mul(gamma, normalized), beta);
}

Tensor unfold_patches(const Tensor& x, size_t ph, size_t pw, size_t* grid_h, size_t* grid_w) {
  if (x.ndim() != 4) throw ShapeError("unfold_patches: expected 4-d input, got " + shape_str(x.shape()));
  if (grid_h) *grid_h = x.size(2);
  if (grid_w) *grid_w = x.size(3);
  return unfold(x, ph, pw);
}

Tensor fold_patches(const Tensor& patches, size_t C, size_t H, size_t W, size_t ph, size_t pw) {
  return fold(patches, C, H, W, ph, pw);
}

std::atomic<uint64_t>& similarity_counter() {
  static std::atomic<uint64_t> counter{0};
  return counter;
}
void reset_similarity_counter() { similarity_counter().store(0); }

namespace {

constexpr double kMaskNeg = -1e30;

void validate_patch_sets(const Tensor& p_deg, const Tensor& p_ref, size_t grid_h, size_t grid_w,
                         const NbfmParams& p, const char* op) {
  if (p_deg.ndim() != 3 || p_ref.ndim() != 3)
    throw ShapeError(std::string(op) + ": expected [B, M, L] patch tensors");
  if (p_deg.shape() != p_ref.shape())
    throw ShapeError(std::string(op) + ": patch sets disagree: " + shape_str(p_deg.shape()) +
                     " vs " + shape_str(p_ref.shape()));
  if (p_deg.size(1) != grid_h * grid_w)
    throw ShapeError(std::string(op) + ": M=" + std::to_string(p_deg.size(1)) +
                     " does not match grid " + std::to_string(grid_h) + "x" +
                     std::to_string(grid_w));
  if (p.neigh_h % 2 == 0 || p.neigh_w % 2 == 0)
    throw ShapeError(std::string(op) + ": neighborhood (" + std::to_string(p.neigh_h) + "," +
                     std::to_string(p.neigh_w) + ") must be odd");
  if (p.weight.numel() != p.neigh_h * p.neigh_w)
    throw ShapeError(std::string(op) + ": weight matrix has " + std::to_string(p.weight.numel()) +
                     " entries, neighborhood needs " + std::to_string(p.neigh_h * p.neigh_w));
}

// Patch norms clamped by the epsilon guard: [B, M, 1].
Tensor clamped_norms(const Tensor& patches) {
  Tensor sq = sum_axes(mul(patches, patches), {2}, true);
  return clamp_min(sqrt_t(sq), kMatchEps);
}

}  // namespace

MatchResult nbfm_match(const Tensor& p_deg, const Tensor& p_ref, size_t grid_h, size_t grid_w,
                       const NbfmParams& p) {
  validate_patch_sets(p_deg, p_ref, grid_h, grid_w, p, "nbfm_match");
  size_t B = p_deg.size(0), M = p_deg.size(1), L = p_deg.size(2);
  size_t K = p.neigh_h * p.neigh_w;
  long rh = static_cast<long>(p.neigh_h / 2), rw = static_cast<long>(p.neigh_w / 2);

  Tensor nd = clamped_norms(p_deg);  // [B, M, 1]
  Tensor nr = clamped_norms(p_ref);
  Tensor deg4 = reshape(p_deg, {B, grid_h, grid_w, L});
  Tensor ref4 = reshape(p_ref, {B, grid_h, grid_w, L});
  Tensor nd3 = reshape(nd, {B, grid_h, grid_w});
  Tensor nr3 = reshape(nr, {B, grid_h, grid_w});

  std::vector<uint8_t> validity(M * K, 0);
  std::vector<double> maskneg(M * K, 0.0);
  uint64_t count = 0;

  std::vector<Tensor> sim_cols;    // K columns of [B, M, 1]
  std::vector<Tensor> ref_shifts;  // K aligned reference patch tensors [B, M, L]
  sim_cols.reserve(K);
  ref_shifts.reserve(K);

  size_t k = 0;
  for (long dy = -rh; dy <= rh; ++dy) {
    for (long dx = -rw; dx <= rw; ++dx, ++k) {
      // Valid query rectangle for this offset.
      size_t y0 = static_cast<size_t>(std::max(0L, -dy));
      size_t y1 = static_cast<size_t>(std::min<long>(grid_h, static_cast<long>(grid_h) - dy));
      size_t x0 = static_cast<size_t>(std::max(0L, -dx));
      size_t x1 = static_cast<size_t>(std::min<long>(grid_w, static_cast<long>(grid_w) - dx));
      size_t hv = y1 > y0 ? y1 - y0 : 0, wv = x1 > x0 ? x1 - x0 : 0;
      for (size_t y = y0; y < y1; ++y)
        for (size_t x = x0; x < x1; ++x) validity[(y * grid_w + x) * K + k] = 1;
      for (size_t m = 0; m < M; ++m)
        if (!validity[m * K + k]) maskneg[m * K + k] = kMaskNeg;

      if (hv == 0 || wv == 0) {
        sim_cols.push_back(Tensor::zeros({B, M, 1}));
        ref_shifts.push_back(Tensor::zeros({B, M, L}));
        continue;
      }
      // Queries in the rectangle; references shifted by the offset. Only the
      // valid pairs are ever touched, which keeps matching local and makes
      // the similarity count exact.
      Tensor q = slice(slice(deg4, 1, y0, hv), 2, x0, wv);
      Tensor r = slice(slice(ref4, 1, static_cast<size_t>(y0 + dy), hv), 2,
                       static_cast<size_t>(x0 + dx), wv);
      Tensor qs = slice(slice(nd3, 1, y0, hv), 2, x0, wv);
      Tensor rs = slice(slice(nr3, 1, static_cast<size_t>(y0 + dy), hv), 2,
                        static_cast<size_t>(x0 + dx), wv);
      Tensor dots = sum_axes(mul(q, r), {3}, false);  // [B, hv, wv]
      Tensor sim = divt(dots, mul(qs, rs));
      count += static_cast<uint64_t>(B) * hv * wv;

      Tensor sim_full = pad_axis(pad_axis(sim, 1, y0, grid_h - y1), 2, x0, grid_w - x1);
      sim_cols.push_back(reshape(sim_full, {B, M, 1}));
      Tensor r_full = pad_axis(pad_axis(r, 1, y0, grid_h - y1), 2, x0, grid_w - x1);
      ref_shifts.push_back(reshape(r_full, {B, M, L}));
    }
  }
  similarity_counter() += count;

  MatchResult res;
  res.similarity = concat(sim_cols, 2);  // [B, M, K]
  res.grid_h = grid_h;
  res.grid_w = grid_w;
  res.validity = std::move(validity);
  res.similarity_count = count;

  Tensor w_row = reshape(p.weight, {1, 1, K});
  Tensor logits = add(mul(res.similarity, w_row), Tensor::from_vector({M, K}, maskneg));
  res.attention = softmax(logits, 2);

  Tensor matched = Tensor::zeros({B, M, L});
  for (size_t j = 0; j < K; ++j) {
    Tensor a = slice(res.attention, 2, j, 1);  // [B, M, 1]
    matched = add(matched, mul(a, ref_shifts[j]));
  }
  res.matched = matched;
  return res;
}

MatchResult global_match(const Tensor& p_deg, const Tensor& p_ref, size_t grid_h, size_t grid_w,
                         const NbfmParams& p) {
  validate_patch_sets(p_deg, p_ref, grid_h, grid_w, p, "global_match");
  size_t B = p_deg.size(0), M = p_deg.size(1);
  size_t K = p.neigh_h * p.neigh_w;
  long rh = static_cast<long>(p.neigh_h / 2), rw = static_cast<long>(p.neigh_w / 2);

  Tensor nd = clamped_norms(p_deg);
  Tensor nr = clamped_norms(p_ref);
  Tensor dhat = divt(p_deg, nd);
  Tensor rhat = divt(p_ref, nr);
  Tensor sim = matmul(dhat, transpose_last2(rhat));  // [B, M, M]
  uint64_t count = static_cast<uint64_t>(B) * M * M;
  similarity_counter() += count;

  // Neighborhood weight placement: candidate j multiplies W at its grid
  // offset from query i when inside the window; candidates beyond the window
  // (which have no offset of their own) take the neutral extension mean(W).
  std::vector<double> outside(M * M, 1.0);
  std::vector<std::vector<double>> offset_masks(K, std::vector<double>(M * M, 0.0));
  for (size_t i = 0; i < M; ++i) {
    long iy = static_cast<long>(i / grid_w), ix = static_cast<long>(i % grid_w);
    for (size_t j = 0; j < M; ++j) {
      long jy = static_cast<long>(j / grid_w), jx = static_cast<long>(j % grid_w);
      long dy = jy - iy, dx = jx - ix;
      if (dy >= -rh && dy <= rh && dx >= -rw && dx <= rw) {
        size_t k = static_cast<size_t>(dy + rh) * p.neigh_w + static_cast<size_t>(dx + rw);
        offset_masks[k][i * M + j] = 1.0;
        outside[i * M + j] = 0.0;
      }
    }
  }
  Tensor gate = mul(Tensor::from_vector({M, M}, std::move(outside)), mean_all(p.weight));
  for (size_t k = 0; k < K; ++k) {
    Tensor wk = slice(p.weight, 0, k, 1);  // [1]
    gate = add(gate, mul(Tensor::from_vector({M, M}, offset_masks[k]), wk));
  }

  MatchResult res;
  res.similarity = sim;
  res.grid_h = grid_h;
  res.grid_w = grid_w;
  res.validity.assign(M * M, 1);
  res.similarity_count = count;
  res.attention = softmax(mul(sim, gate), 2);
  res.matched = matmul(res.attention, p_ref);
  return res;
}

Tensor nbfm_fuse(const Tensor& matched, const Tensor& x_deg, const Conv& fuse) {
  if (matched.shape() != x_deg.shape())
    throw ShapeError("nbfm_fuse: matched " + shape_str(matched.shape()) + " vs features " +
                     shape_str(x_deg.shape()));
  return fuse.forward(concat({matched, x_deg}, 1));
}

}  // namespace canm
