#include "canm/network.hpp"

#include <array>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "canm/tensor_io.hpp"

namespace canm {

std::string to_string(MatchingMode m) {
  switch (m) {
    case MatchingMode::nbfm: return "nbfm";
    case MatchingMode::gfm: return "gfm";
    case MatchingMode::none: return "none";
  }
  return "nbfm";
}

MatchingMode matching_mode_from_string(const std::string& s) {
  if (s == "nbfm") return MatchingMode::nbfm;
  if (s == "gfm") return MatchingMode::gfm;
  if (s == "none") return MatchingMode::none;
  throw ConfigError("unknown matching mode '" + s + "'");
}

// ============================================================================
// NetworkConfig
// ============================================================================

NetworkConfig NetworkConfig::default_preset() { return NetworkConfig{}; }

NetworkConfig NetworkConfig::desk_preset() {
  NetworkConfig c;
  c.input_h = 64;
  c.input_w = 64;
  c.channels = {16, 24, 32, 32};
  c.cte_ctls = {2, 2, 2, 2};
  c.ctd_ctls = {2, 2, 2};
  c.wa_heads = {2, 4, 8, 8};
  c.ca_heads = {1, 2, 4, 8};
  return c;
}

std::vector<size_t> NetworkConfig::level_h() const {
  std::vector<size_t> out;
  size_t h = input_h / 2;
  for (size_t k = 0; k < 4; ++k) {
    out.push_back(h);
    h /= 2;
  }
  return out;
}

std::vector<size_t> NetworkConfig::level_w() const {
  std::vector<size_t> out;
  size_t w = input_w / 2;
  for (size_t k = 0; k < 4; ++k) {
    out.push_back(w);
    w /= 2;
  }
  return out;
}

void NetworkConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
  if (channels.size() != 4 || cte_ctls.size() != 4 || wa_heads.size() != 4 || ca_heads.size() != 4)
    fail("exactly 4 encoder levels required");
  if (ctd_ctls.size() != 3) fail("exactly 3 decoder levels required");
  if (neighborhoods.size() != 3) fail("exactly 3 matching levels required");
  if (input_h % 16 != 0 || input_w % 16 != 0)
    fail("input size must be divisible by 16 for the 4-level ladder");
  for (size_t n : cte_ctls)
    if (n == 0 || n % 2 != 0) fail("CTE CTL counts must be even and positive");
  for (size_t n : ctd_ctls)
    if (n == 0 || n % 2 != 0) fail("CTD CTL counts must be even and positive");
  if (window_size == 0) fail("window size must be positive");
  if (ffb_expansion == 0) fail("FFB expansion ratio must be positive");
  if (patch_size[0] % 2 == 0 || patch_size[1] % 2 == 0) fail("patch size must be odd");
  for (const auto& n : neighborhoods)
    if (n[0] % 2 == 0 || n[1] % 2 == 0) fail("neighborhood sizes must be odd");
  if (channels[0] % 4 != 0) fail("level-1 channels must be divisible by 4 (output pixel shuffle)");
  std::vector<size_t> lh = level_h(), lw = level_w();
  for (size_t k = 0; k < 4; ++k) {
    if (channels[k] == 0) fail("channel counts must be positive");
    bool wab_active = !cnn_only && use_wab;
    bool cab_active = !cnn_only && use_cab;
    if (wab_active) {
      if (channels[k] % wa_heads[k] != 0)
        fail("level " + std::to_string(k + 1) + " channels not divisible by WA heads");
      size_t w = effective_window(window_size, lh[k], lw[k]);
      if (lh[k] % w != 0 || lw[k] % w != 0)
        fail("level " + std::to_string(k + 1) + " feature size not divisible by window " +
             std::to_string(w));
    }
    if (cab_active) {
      if (channels[k] % ca_heads[k] != 0)
        fail("level " + std::to_string(k + 1) + " channels not divisible by CA heads");
      if (use_pyramid && (lh[k] % 4 != 0 || lw[k] % 4 != 0))
        fail("level " + std::to_string(k + 1) + " feature size not divisible by 4 (CAB pyramid)");
    }
    if (k < 3 && channels[k + 1] % 4 != 0)
      fail("level " + std::to_string(k + 2) + " channels must be divisible by 4 (decoder upsampling)");
  }
}

nlohmann::ordered_json NetworkConfig::to_json() const {
  nlohmann::ordered_json j;
  j["input_size"] = {input_h, input_w};
  j["channels"] = channels;
  j["cte_ctls"] = cte_ctls;
  j["ctd_ctls"] = ctd_ctls;
  j["wa_heads"] = wa_heads;
  j["ca_heads"] = ca_heads;
  j["neighborhoods"] = neighborhoods;
  j["patch_size"] = patch_size;
  j["window_size"] = window_size;
  j["ffb_expansion"] = ffb_expansion;
  j["use_wab"] = use_wab;
  j["use_cab"] = use_cab;
  j["use_pyramid"] = use_pyramid;
  j["cnn_only"] = cnn_only;
  j["matching"] = to_string(matching);
  j["global_residual"] = global_residual;
  return j;
}

NetworkConfig NetworkConfig::from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {
      "input_size", "channels",     "cte_ctls",  "ctd_ctls",    "wa_heads",
      "ca_heads",   "neighborhoods", "patch_size", "window_size", "ffb_expansion",
      "use_wab",    "use_cab",      "use_pyramid", "cnn_only",   "matching",
      "global_residual"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("config: unknown field '" + key + "'");
  for (const auto& key : known)
    if (!j.contains(key)) throw ConfigError("config: missing field '" + key + "'");

  NetworkConfig c;
  c.input_h = j["input_size"][0];
  c.input_w = j["input_size"][1];
  c.channels = j["channels"].get<std::vector<size_t>>();
  c.cte_ctls = j["cte_ctls"].get<std::vector<size_t>>();
  c.ctd_ctls = j["ctd_ctls"].get<std::vector<size_t>>();
  c.wa_heads = j["wa_heads"].get<std::vector<size_t>>();
  c.ca_heads = j["ca_heads"].get<std::vector<size_t>>();
  c.neighborhoods = j["neighborhoods"].get<std::vector<std::array<size_t, 2>>>();
  c.patch_size = j["patch_size"].get<std::array<size_t, 2>>();
  c.window_size = j["window_size"];
  c.ffb_expansion = j["ffb_expansion"];
  c.use_wab = j["use_wab"];
  c.use_cab = j["use_cab"];
  c.use_pyramid = j["use_pyramid"];
  c.cnn_only = j["cnn_only"];
  c.matching = matching_mode_from_string(j["matching"]);
  c.global_residual = j["global_residual"];
  return c;
}

NetworkConfig NetworkConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed config JSON in " + path + ": " + e.what());
  }
  return from_json(j);
}

void NetworkConfig::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write config: " + path);
  os << to_json().dump(2) << "\n";
}

uint64_t NetworkConfig::hash() const {
  std::string dump = to_json().dump();
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : dump) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// ============================================================================
// Construction
// ============================================================================

namespace {

Conv init_conv(size_t out_c, size_t in_c, size_t k, std::mt19937_64& gen, size_t stride = 1,
               size_t pad = 0, size_t groups = 1) {
  Conv c;
  c.weight = Tensor::trunc_normal({out_c, in_c / groups, k, k}, gen, 0.02);
  c.bias = Tensor::zeros({out_c});
  c.stride = stride;
  c.pad = pad;
  c.groups = groups;
  return c;
}

NormParams init_norm(size_t C) {
  NormParams n;
  n.gain = Tensor::ones({C});
  n.bias = Tensor::zeros({C});
  return n;
}

CtlParams init_ctl(const NetworkConfig& cfg, size_t C, size_t wab_heads, size_t ca_heads,
                   bool shift, std::mt19937_64& gen) {
  CtlParams p;
  p.norm1 = init_norm(C);
  p.norm2 = init_norm(C);
  size_t dr_in = C;
  if (cfg.cnn_only) {
    p.cnn = init_conv(2 * C, C, 3, gen, 1, 1);
    dr_in = 2 * C;
  } else {
    if (cfg.use_wab) {
      WabParams w;
      w.to_q = init_conv(C, C, 1, gen);
      w.to_k = init_conv(C, C, 1, gen);
      w.to_v = init_conv(C, C, 1, gen);
      w.proj = init_conv(C, C, 1, gen);
      w.heads = wab_heads;
      w.window = cfg.window_size;
      w.shift = shift;
      p.wab = w;
    }
    if (cfg.use_cab) {
      CabParams c;
      c.to_v = init_conv(C, C, 1, gen);
      c.proj = init_conv(C, C, 1, gen);
      c.heads = ca_heads;
      c.pyramid = cfg.use_pyramid;
      if (cfg.use_pyramid) {
        c.to_q2 = init_conv(C, C, 1, gen);
        c.to_k2 = init_conv(C, C, 1, gen);
        c.to_q4 = init_conv(C, C, 1, gen);
        c.to_k4 = init_conv(C, C, 1, gen);
        c.alpha1 = Tensor::ones({1});
        c.alpha2 = Tensor::ones({1});
      } else {
        c.to_q1 = init_conv(C, C, 1, gen);
        c.to_k1 = init_conv(C, C, 1, gen);
      }
      p.cab = c;
    }
    dr_in = (cfg.use_wab && cfg.use_cab) ? 2 * C : C;
    if (!cfg.use_wab && !cfg.use_cab)
      throw ConfigError("config: at least one attention branch (or cnn_only) must be enabled");
  }
  p.dr = init_conv(C, dr_in, 1, gen);
  size_t r = cfg.ffb_expansion;
  p.ffb.expand = init_conv(2 * r * C, C, 1, gen);
  p.ffb.dwconv = init_conv(r * C, r * C, 3, gen, 1, 1, r * C);
  p.ffb.project = init_conv(C, r * C, 1, gen);
  return p;
}

StageParams init_cte(const NetworkConfig& cfg, size_t level, std::mt19937_64& gen) {
  StageParams st;
  size_t C = cfg.channels[level];
  for (size_t i = 0; i < cfg.cte_ctls[level]; ++i)
    st.ctls.push_back(init_ctl(cfg, C, cfg.wa_heads[level], cfg.ca_heads[level], i % 2 == 1, gen));
  if (level < 3) st.down = init_conv(cfg.channels[level + 1], C, 3, gen, 2, 1);
  return st;
}

StageParams init_ctd(const NetworkConfig& cfg, size_t level, size_t dec_index, size_t in_channels,
                     std::mt19937_64& gen) {
  StageParams st;
  st.is_decoder = true;
  size_t C = cfg.channels[level];
  st.up_expand = init_conv(4 * C, in_channels, 1, gen);
  st.skip_fuse = init_conv(C, 2 * C, 1, gen);
  for (size_t i = 0; i < cfg.ctd_ctls[dec_index]; ++i)
    st.ctls.push_back(init_ctl(cfg, C, cfg.wa_heads[level], cfg.ca_heads[level], i % 2 == 1, gen));
  return st;
}

MatchUnit init_match_unit(const NetworkConfig& cfg, size_t level, std::mt19937_64& gen) {
  MatchUnit u;
  size_t C = cfg.channels[level];
  if (cfg.matching == MatchingMode::none) {
    u.has_matcher = false;
    u.nbfm.fuse = init_conv(C, 2 * C, 1, gen);
    return u;
  }
  u.adain.conv_gamma = init_conv(C, C, 3, gen, 1, 1);
  u.adain.conv_beta = init_conv(C, C, 3, gen, 1, 1);
  u.nbfm.patch_h = cfg.patch_size[0];
  u.nbfm.patch_w = cfg.patch_size[1];
  u.nbfm.neigh_h = cfg.neighborhoods[level][0];
  u.nbfm.neigh_w = cfg.neighborhoods[level][1];
  u.nbfm.weight = Tensor::ones({u.nbfm.neigh_h * u.nbfm.neigh_w});
  u.nbfm.fuse = init_conv(C, 2 * C, 1, gen);
  return u;
}

}  // namespace

void MatchUnit::visit_params(const std::string& prefix, MatchingMode mode,
                             const std::function<void(const std::string&, Tensor&)>& fn) {
  if (has_matcher) {
    adain.visit_params(prefix + ".adain", fn);
    std::string tag = mode == MatchingMode::gfm ? ".gfm" : ".nbfm";
    fn(prefix + tag + ".w", nbfm.weight);
  }
  nbfm.fuse.visit_params(prefix + ".fuse", fn);
}

void Network::visit_params(const std::function<void(const std::string&, Tensor&)>& fn) {
  ref_head.visit_params("ref.head", fn);
  deg_head.visit_params("deg.head", fn);
  for (size_t k = 0; k < ref_stages.size(); ++k)
    ref_stages[k].visit_params("ref.stage" + std::to_string(k + 1), fn);
  for (size_t k = 0; k < deg_stages.size(); ++k)
    deg_stages[k].visit_params("deg.stage" + std::to_string(k + 1), fn);
  for (size_t k = 0; k < matchers.size(); ++k)
    matchers[k].visit_params("match" + std::to_string(k + 1), config.matching, fn);
  bottleneck_fuse.visit_params("bottleneck.fuse", fn);
  for (size_t i = 0; i < dec_stages.size(); ++i)
    dec_stages[i].visit_params("dec.stage" + std::to_string(3 - i), fn);
  out_conv.visit_params("out.conv", fn);
}

std::map<std::string, Tensor> Network::params() {
  std::map<std::string, Tensor> out;
  visit_params([&](const std::string& name, Tensor& t) {
    if (out.count(name)) throw UsageError("duplicate parameter name: " + name);
    out.emplace(name, t);
  });
  return out;
}

size_t Network::param_count() {
  size_t n = 0;
  visit_params([&](const std::string&, Tensor& t) { n += t.numel(); });
  return n;
}

Network build(const NetworkConfig& config, uint64_t seed) {
  config.validate();
  std::mt19937_64 gen(seed);
  Network net;
  net.config = config;
  net.ref_head = init_conv(config.channels[0], 1, 3, gen, 2, 1);
  net.deg_head = init_conv(config.channels[0], 1, 3, gen, 2, 1);
  for (size_t k = 0; k < 4; ++k) net.ref_stages.push_back(init_cte(config, k, gen));
  for (size_t k = 0; k < 4; ++k) net.deg_stages.push_back(init_cte(config, k, gen));
  for (size_t k = 0; k < 3; ++k) net.matchers.push_back(init_match_unit(config, k, gen));
  net.bottleneck_fuse = init_conv(config.channels[3], 2 * config.channels[3], 1, gen);
  // Decoder stages for levels 3, 2, 1 (zero-based 2, 1, 0); the first
  // consumes the bottleneck output.
  size_t in_c = config.channels[3];
  for (size_t i = 0; i < 3; ++i) {
    size_t level = 2 - i;
    net.dec_stages.push_back(init_ctd(config, level, i, in_c, gen));
    in_c = config.channels[level];
  }
  // Zero-initialized output head for the residual-identity start.
  net.out_conv.weight = Tensor::zeros({1, config.channels[0] / 4, 3, 3});
  net.out_conv.bias = Tensor::zeros({1});
  net.out_conv.pad = 1;
  return net;
}

std::vector<std::string> variant_names() {
  return {"wo_ca", "wo_wa", "wo_ps", "cnn_only", "wo_fm", "gfm"};
}

Network build_variant(NetworkConfig config, const std::string& variant, uint64_t seed) {
  if (variant == "default" || variant.empty()) {
  } else if (variant == "wo_ca") {
    config.use_cab = false;
  } else if (variant == "wo_wa") {
    config.use_wab = false;
  } else if (variant == "wo_ps") {
    config.use_pyramid = false;
  } else if (variant == "cnn_only") {
    config.cnn_only = true;
  } else if (variant == "wo_fm") {
    config.matching = MatchingMode::none;
  } else if (variant == "gfm") {
    config.matching = MatchingMode::gfm;
  } else {
    throw UsageError("unknown variant '" + variant + "' (expected one of: default, wo_ca, wo_wa, "
                     "wo_ps, cnn_only, wo_fm, gfm)");
  }
  return build(config, seed);
}

// ============================================================================
// Forward
// ============================================================================

namespace {

struct BranchFeatures {
  std::vector<Tensor> levels;  // CTL-stack outputs at levels 1..4
};

BranchFeatures encode(const Tensor& img, const Conv& head,
                      const std::vector<StageParams>& stages) {
  BranchFeatures out;
  Tensor x = head.forward(img);
  for (size_t k = 0; k < stages.size(); ++k) {
    CteOutput o = cte_forward(x, stages[k]);
    out.levels.push_back(o.feature);
    if (stages[k].down) x = o.down;
  }
  return out;
}

Tensor fuse_level(const Network& net, size_t level, const Tensor& ref_feat,
                  const Tensor& deg_feat) {
  const MatchUnit& u = net.matchers[level];
  if (!u.has_matcher) return nbfm_fuse(ref_feat, deg_feat, u.nbfm.fuse);
  Tensor aligned = adain(ref_feat, deg_feat, u.adain);
  size_t gh = 0, gw = 0;
  Tensor p_ref = unfold_patches(aligned, u.nbfm.patch_h, u.nbfm.patch_w, &gh, &gw);
  Tensor p_deg = unfold_patches(deg_feat, u.nbfm.patch_h, u.nbfm.patch_w, nullptr, nullptr);
  MatchResult mr = net.config.matching == MatchingMode::gfm
                       ? global_match(p_deg, p_ref, gh, gw, u.nbfm)
                       : nbfm_match(p_deg, p_ref, gh, gw, u.nbfm);
  Tensor matched_map =
      fold_patches(mr.matched, deg_feat.size(1), gh, gw, u.nbfm.patch_h, u.nbfm.patch_w);
  return nbfm_fuse(matched_map, deg_feat, u.nbfm.fuse);
}

}  // namespace

Tensor forward(const Network& net, const Tensor& ref, const Tensor& lr_interp) {
  const NetworkConfig& cfg = net.config;
  for (const Tensor* in : {&ref, &lr_interp}) {
    if (in->ndim() != 4 || in->size(1) != 1 || in->size(2) != cfg.input_h ||
        in->size(3) != cfg.input_w)
      throw ShapeError("forward: input " + shape_str(in->shape()) + " does not match config [B,1," +
                       std::to_string(cfg.input_h) + "," + std::to_string(cfg.input_w) + "]");
  }
  if (ref.size(0) != lr_interp.size(0))
    throw ShapeError("forward: batch sizes disagree: " + shape_str(ref.shape()) + " vs " +
                     shape_str(lr_interp.shape()));

  BranchFeatures rf = encode(ref, net.ref_head, net.ref_stages);
  BranchFeatures df = encode(lr_interp, net.deg_head, net.deg_stages);

  std::vector<Tensor> fused(3);
  for (size_t k = 0; k < 3; ++k) fused[k] = fuse_level(net, k, rf.levels[k], df.levels[k]);
  Tensor d = net.bottleneck_fuse.forward(concat({rf.levels[3], df.levels[3]}, 1));

  for (size_t i = 0; i < net.dec_stages.size(); ++i) {
    size_t level = 2 - i;
    d = ctd_forward(d, fused[level], net.dec_stages[i]);
  }

  Tensor y = net.out_conv.forward(pixel_shuffle2(d));
  if (cfg.global_residual) y = add(y, lr_interp);
  return y;
}

// ============================================================================
// Parameter / MAC counting
// ============================================================================

namespace {

// conv MACs = O * (C/g) * kh * kw * Ho * Wo (batch 1).
uint64_t conv_macs(uint64_t o, uint64_t cg, uint64_t k, uint64_t h, uint64_t w) {
  return o * cg * k * k * h * w;
}

uint64_t ctl_macs(const NetworkConfig& cfg, size_t level, uint64_t h, uint64_t w) {
  uint64_t C = cfg.channels[level];
  uint64_t hw = h * w;
  uint64_t macs = 0;
  uint64_t dr_in = C;
  if (cfg.cnn_only) {
    macs += conv_macs(2 * C, C, 3, h, w);
    dr_in = 2 * C;
  } else {
    if (cfg.use_wab) {
      // 4 projections + per-window attention: QK^T and attn*V are each
      // (HW/w_eff^2) windows * heads * w_eff^4 * d = HW * w_eff^2 * C.
      uint64_t we = effective_window(cfg.window_size, h, w);
      macs += 4 * conv_macs(C, C, 1, h, w);
      macs += 2 * hw * we * we * C;
    }
    if (cfg.use_cab) {
      uint64_t d = C / cfg.ca_heads[level];
      macs += 2 * conv_macs(C, C, 1, h, w);  // toV + proj
      if (cfg.use_pyramid) {
        macs += 2 * conv_macs(C, C, 1, h / 2, w / 2) + 2 * conv_macs(C, C, 1, h / 4, w / 4);
        // Channel affinities: heads * d^2 * positions = C*d*positions.
        macs += C * d * (hw / 4) + C * d * (hw / 16);
      } else {
        macs += 2 * conv_macs(C, C, 1, h, w);
        macs += C * d * hw;
      }
      macs += C * d * hw;  // attn * V at full scale
    }
    dr_in = (cfg.use_wab && cfg.use_cab) ? 2 * C : C;
  }
  macs += conv_macs(C, dr_in, 1, h, w);
  uint64_t r = cfg.ffb_expansion;
  macs += conv_macs(2 * r * C, C, 1, h, w);  // expansion
  macs += r * C * 9 * hw;                    // depthwise 3x3
  macs += conv_macs(C, r * C, 1, h, w);      // projection
  return macs;
}

uint64_t match_macs(const NetworkConfig& cfg, size_t level, uint64_t h, uint64_t w) {
  uint64_t C = cfg.channels[level];
  uint64_t macs = conv_macs(C, 2 * C, 1, h, w);  // fusion
  if (cfg.matching == MatchingMode::none) return macs;
  macs += 2 * conv_macs(C, C, 3, h, w);  // AdaIN gamma/beta
  uint64_t M = h * w;
  uint64_t L = C * cfg.patch_size[0] * cfg.patch_size[1];
  if (cfg.matching == MatchingMode::gfm) {
    macs += 2 * M * M * L;  // similarities + matched aggregation
  } else {
    uint64_t K = cfg.neighborhoods[level][0] * cfg.neighborhoods[level][1];
    macs += 2 * M * K * L;  // interior-dominated estimate
  }
  return macs;
}

}  // namespace

CountReport count_params_flops(Network& net) {
  CountReport r;
  r.parameters = net.param_count();
  const NetworkConfig& cfg = net.config;
  std::vector<size_t> lh = cfg.level_h(), lw = cfg.level_w();

  uint64_t macs = 0;
  macs += 2 * conv_macs(cfg.channels[0], 1, 3, lh[0], lw[0]);  // branch heads
  for (size_t k = 0; k < 4; ++k) {
    macs += 2 * cfg.cte_ctls[k] * ctl_macs(cfg, k, lh[k], lw[k]);
    if (k < 3) macs += 2 * conv_macs(cfg.channels[k + 1], cfg.channels[k], 3, lh[k + 1], lw[k + 1]);
  }
  for (size_t k = 0; k < 3; ++k) macs += match_macs(cfg, k, lh[k], lw[k]);
  macs += conv_macs(cfg.channels[3], 2 * cfg.channels[3], 1, lh[3], lw[3]);  // bottleneck
  size_t in_c = cfg.channels[3];
  for (size_t i = 0; i < 3; ++i) {
    size_t level = 2 - i;
    macs += conv_macs(4 * cfg.channels[level], in_c, 1, lh[level + 1], lw[level + 1]);  // up
    macs += conv_macs(cfg.channels[level], 2 * cfg.channels[level], 1, lh[level], lw[level]);
    macs += cfg.ctd_ctls[i] * ctl_macs(cfg, level, lh[level], lw[level]);
    in_c = cfg.channels[level];
  }
  macs += conv_macs(1, cfg.channels[0] / 4, 3, cfg.input_h, cfg.input_w);  // output head
  r.forward_macs = macs;
  return r;
}

// ============================================================================
// Checkpointing
// ============================================================================

void save_weights(Network& net, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["config"] = net.config.to_json();
  manifest["config_hash"] = net.config.hash();
  nlohmann::ordered_json params = nlohmann::ordered_json::array();
  net.visit_params([&](const std::string& name, Tensor& t) {
    std::string file = name + ".canmt";
    write_tensor((fs::path(dir) / file).string(), t, DType::f64);
    nlohmann::ordered_json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    entry["file"] = file;
    params.push_back(entry);
  });
  manifest["parameters"] = params;
  std::ofstream os(fs::path(dir) / "manifest.json");
  if (!os) throw IoError("cannot write manifest in " + dir);
  os << manifest.dump(2) << "\n";
}

void load_weights(Network& net, const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream is(fs::path(dir) / "manifest.json");
  if (!is) throw IoError("cannot open manifest in " + dir);
  nlohmann::json manifest;
  try {
    is >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest in " + dir + ": " + e.what());
  }

  std::map<std::string, std::string> files;
  for (const auto& entry : manifest["parameters"])
    files[entry["name"].get<std::string>()] = entry["file"].get<std::string>();

  // Names first: report the offending parameter before anything else.
  std::map<std::string, Tensor> params = net.params();
  for (const auto& [name, _] : params)
    if (!files.count(name))
      throw IoError("checkpoint is missing parameter '" + name + "'");
  for (const auto& [name, _] : files)
    if (!params.count(name))
      throw IoError("checkpoint has unexpected parameter '" + name + "'");

  uint64_t expect_hash = net.config.hash();
  if (manifest["config_hash"].get<uint64_t>() != expect_hash)
    throw IoError("checkpoint config hash mismatch (saved for a different configuration)");

  // Stage everything; only mutate the network once the whole load succeeded.
  std::map<std::string, Tensor> staged;
  for (const auto& [name, file] : files) {
    Tensor t = read_tensor((fs::path(dir) / file).string());
    if (t.shape() != params.at(name).shape())
      throw IoError("checkpoint parameter '" + name + "' has shape " + shape_str(t.shape()) +
                    ", expected " + shape_str(params.at(name).shape()));
    staged.emplace(name, t);
  }
  for (auto& [name, t] : params) t.vec() = staged.at(name).vec();
}

}  // namespace canm
