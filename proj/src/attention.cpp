#include "canm/attention.hpp"

#include <cmath>

namespace canm {

Tensor channel_layernorm(const Tensor& x, const NormParams& p, double eps) {
  if (x.ndim() != 4) throw ShapeError("channel_layernorm: expected 4-d input, got " + shape_str(x.shape()));
  size_t C = x.size(1);
  if (p.gain.numel() != C || p.bias.numel() != C)
    throw ShapeError("channel_layernorm: gain/bias size does not match C=" + std::to_string(C));
  Tensor mu = mean_axes(x, {1}, true);
  Tensor d = sub(x, mu);
  Tensor var = mean_axes(mul(d, d), {1}, true);
  Tensor xn = divt(d, sqrt_t(add_const(var, eps)));
  Tensor g = reshape(p.gain, {C, 1, 1});
  Tensor b = reshape(p.bias, {C, 1, 1});
  return add(mul(xn, g), b);
}

// ============================================================================
// Window attention
// ============================================================================

size_t effective_window(size_t window, size_t H, size_t W) {
  return std::min(window, std::min(H, W));
}

Tensor window_partition(const Tensor& x, size_t w, bool shift) {
  if (x.ndim() != 4) throw ShapeError("window_partition: expected 4-d input, got " + shape_str(x.shape()));
  size_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  if (w == 0 || H % w != 0 || W % w != 0)
    throw ShapeError("window_partition: map " + shape_str(x.shape()) +
                     " not divisible by window " + std::to_string(w));
  Tensor t = x;
  if (shift) {
    long s = static_cast<long>(w / 2);
    t = roll2d(t, -s, -s);
  }
  size_t nh = H / w, nw = W / w;
  t = reshape(t, {B, C, nh, w, nw, w});
  t = permute(t, {0, 2, 4, 1, 3, 5});  // [B, nh, nw, C, w, w]
  return reshape(t, {B * nh * nw, C, w, w});
}

Tensor window_reverse(const Tensor& windows, size_t w, bool shift, size_t B, size_t H, size_t W) {
  if (windows.ndim() != 4) throw ShapeError("window_reverse: expected 4-d input");
  size_t C = windows.size(1);
  size_t nh = H / w, nw = W / w;
  if (windows.size(0) != B * nh * nw || windows.size(2) != w || windows.size(3) != w)
    throw ShapeError("window_reverse: window tensor " + shape_str(windows.shape()) +
                     " does not match B=" + std::to_string(B) + " H=" + std::to_string(H) +
                     " W=" + std::to_string(W) + " w=" + std::to_string(w));
  Tensor t = reshape(windows, {B, nh, nw, C, w, w});
  t = permute(t, {0, 3, 1, 4, 2, 5});  // [B, C, nh, w, nw, w]
  t = reshape(t, {B, C, H, W});
  if (shift) {
    long s = static_cast<long>(w / 2);
    t = roll2d(t, s, s);
  }
  return t;
}

Tensor wab_forward(const Tensor& x, const WabParams& p) {
  size_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  size_t h = p.heads;
  if (h == 0 || C % h != 0)
    throw ShapeError("wab_forward: C=" + std::to_string(C) + " not divisible by heads " +
                     std::to_string(h));
  size_t w = effective_window(p.window, H, W);
  size_t d = C / h;
  size_t tokens = w * w;

  Tensor q = p.to_q.forward(x);
  Tensor k = p.to_k.forward(x);
  Tensor v = p.to_v.forward(x);

  auto to_heads = [&](const Tensor& t) {
    Tensor win = window_partition(t, w, p.shift);  // [Bn, C, w, w]
    size_t Bn = win.size(0);
    Tensor r = reshape(win, {Bn, h, d, tokens});
    return permute(r, {0, 1, 3, 2});  // [Bn, h, tokens, d]
  };
  Tensor qh = to_heads(q);
  Tensor kh = to_heads(k);
  Tensor vh = to_heads(v);

  Tensor logits = scale(matmul(qh, transpose_last2(kh)), 1.0 / std::sqrt(static_cast<double>(d)));
  Tensor attn = softmax(logits, 3);           // rows over key tokens
  Tensor out = matmul(attn, vh);              // [Bn, h, tokens, d]
  size_t Bn = out.size(0);
  out = permute(out, {0, 1, 3, 2});           // [Bn, h, d, tokens]
  out = reshape(out, {Bn, C, w, w});
  out = window_reverse(out, w, p.shift, B, H, W);
  return p.proj.forward(out);
}

// ============================================================================
// Channel attention
// ============================================================================

Tensor cab_forward(const Tensor& x, const CabParams& p) {
  size_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  size_t h = p.heads;
  if (h == 0 || C % h != 0)
    throw ShapeError("cab_forward: C=" + std::to_string(C) + " not divisible by heads " +
                     std::to_string(h));
  size_t d = C / h;
  double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  Tensor v = p.to_v.forward(x);
  Tensor vf = reshape(v, {B, h, d, H * W});

  Tensor logits;
  if (p.pyramid) {
    if (H % 4 != 0 || W % 4 != 0)
      throw ShapeError("cab_forward: map " + shape_str(x.shape()) +
                       " not divisible by 4 for the Q/K pyramid");
    Tensor x2 = avgpool2d(x, 2);
    Tensor x4 = avgpool2d(x, 4);
    Tensor q2 = reshape(p.to_q2.forward(x2), {B, h, d, (H / 2) * (W / 2)});
    Tensor k2 = reshape(p.to_k2.forward(x2), {B, h, d, (H / 2) * (W / 2)});
    Tensor q4 = reshape(p.to_q4.forward(x4), {B, h, d, (H / 4) * (W / 4)});
    Tensor k4 = reshape(p.to_k4.forward(x4), {B, h, d, (H / 4) * (W / 4)});
    Tensor attn2 = matmul(q2, transpose_last2(k2));  // [B, h, d, d]
    Tensor attn4 = matmul(q4, transpose_last2(k4));
    logits = add(mul(attn2, p.alpha1), mul(attn4, p.alpha2));
  } else {
    Tensor q1 = reshape(p.to_q1.forward(x), {B, h, d, H * W});
    Tensor k1 = reshape(p.to_k1.forward(x), {B, h, d, H * W});
    logits = matmul(q1, transpose_last2(k1));
  }
  Tensor attn = softmax(scale(logits, inv_sqrt_d), 3);
  Tensor out = matmul(attn, vf);  // [B, h, d, H*W]
  out = reshape(out, {B, C, H, W});
  return p.proj.forward(out);
}

// ============================================================================
// Feed-forward block
// ============================================================================

Tensor ffb_forward(const Tensor& x, const FfbParams& p) {
  Tensor y = p.expand.forward(x);
  size_t half = y.size(1) / 2;
  Tensor a = slice(y, 1, 0, half);
  Tensor b = slice(y, 1, half, half);
  Tensor gated = mul(a, gelu(b));
  Tensor dw = p.dwconv.forward(gated);
  return p.project.forward(dw);
}

// ============================================================================
// Compound transformer layer
// ============================================================================

void CtlParams::visit_params(const std::string& prefix,
                             const std::function<void(const std::string&, Tensor&)>& fn) {
  norm1.visit_params(prefix + ".norm1", fn);
  norm2.visit_params(prefix + ".norm2", fn);
  if (wab) {
    wab->to_q.visit_params(prefix + ".wab.toq", fn);
    wab->to_k.visit_params(prefix + ".wab.tok", fn);
    wab->to_v.visit_params(prefix + ".wab.tov", fn);
    wab->proj.visit_params(prefix + ".wab.proj", fn);
  }
  if (cab) {
    cab->to_v.visit_params(prefix + ".cab.tov", fn);
    cab->proj.visit_params(prefix + ".cab.proj", fn);
    if (cab->pyramid) {
      cab->to_q2.visit_params(prefix + ".cab.toq2", fn);
      cab->to_k2.visit_params(prefix + ".cab.tok2", fn);
      cab->to_q4.visit_params(prefix + ".cab.toq4", fn);
      cab->to_k4.visit_params(prefix + ".cab.tok4", fn);
      fn(prefix + ".cab.alpha1", cab->alpha1);
      fn(prefix + ".cab.alpha2", cab->alpha2);
    } else {
      cab->to_q1.visit_params(prefix + ".cab.toq1", fn);
      cab->to_k1.visit_params(prefix + ".cab.tok1", fn);
    }
  }
  if (cnn) cnn->visit_params(prefix + ".cnn", fn);
  dr.visit_params(prefix + ".dr", fn);
  ffb.expand.visit_params(prefix + ".ffb.expand", fn);
  ffb.dwconv.visit_params(prefix + ".ffb.dwconv", fn);
  ffb.project.visit_params(prefix + ".ffb.project", fn);
}

Tensor ctl_forward(const Tensor& x, const CtlParams& p) {
  Tensor n1 = channel_layernorm(x, p.norm1);
  Tensor mixed;
  if (p.cnn) {
    mixed = gelu(p.cnn->forward(n1));
  } else if (p.wab && p.cab) {
    mixed = concat({wab_forward(n1, *p.wab), cab_forward(n1, *p.cab)}, 1);
  } else if (p.wab) {
    mixed = wab_forward(n1, *p.wab);
  } else if (p.cab) {
    mixed = cab_forward(n1, *p.cab);
  } else {
    throw UsageError("ctl_forward: layer has neither attention nor conv branch");
  }
  Tensor reduced = p.dr.forward(mixed);
  Tensor out = ffb_forward(channel_layernorm(reduced, p.norm2), p.ffb);
  return add(x, out);
}

// ============================================================================
// Stages
// ============================================================================

void StageParams::visit_params(const std::string& prefix,
                               const std::function<void(const std::string&, Tensor&)>& fn) {
  for (size_t i = 0; i < ctls.size(); ++i)
    ctls[i].visit_params(prefix + ".ctl" + std::to_string(i), fn);
  if (down) down->visit_params(prefix + ".down", fn);
  if (up_expand) up_expand->visit_params(prefix + ".up", fn);
  if (skip_fuse) skip_fuse->visit_params(prefix + ".skip_fuse", fn);
}

CteOutput cte_forward(const Tensor& x, const StageParams& p) {
  if (p.is_decoder) throw UsageError("cte_forward: stage is a decoder");
  Tensor f = x;
  for (const auto& ctl : p.ctls) f = ctl_forward(f, ctl);
  CteOutput out;
  out.feature = f;
  if (p.down) out.down = p.down->forward(f);
  return out;
}

Tensor ctd_forward(const Tensor& deep, const Tensor& skip, const StageParams& p) {
  if (!p.is_decoder || !p.up_expand || !p.skip_fuse)
    throw UsageError("ctd_forward: stage is not a decoder");
  Tensor up = pixel_shuffle2(p.up_expand->forward(deep));
  if (up.shape() != skip.shape())
    throw ShapeError("ctd_forward: upsampled feature " + shape_str(up.shape()) +
                     " does not match skip " + shape_str(skip.shape()));
  Tensor f = p.skip_fuse->forward(concat({up, skip}, 1));
  for (const auto& ctl : p.ctls) f = ctl_forward(f, ctl);
  return f;
}

Tensor stage_forward(const Tensor& x, const StageParams& p, const Tensor* skip) {
  if (p.is_decoder) {
    if (!skip) throw UsageError("stage_forward: decoder stage requires a skip input");
    return ctd_forward(x, *skip, p);
  }
  CteOutput out = cte_forward(x, p);
  return p.down ? out.down : out.feature;
}

}  // namespace canm
