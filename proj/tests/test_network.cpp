#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <random>

#include "canm/metrics.hpp"
#include "canm/network.hpp"
#include "canm/overfit.hpp"

using namespace canm;
namespace fs = std::filesystem;

namespace {

Tensor rand_img(size_t H, size_t W, unsigned seed) {
  std::mt19937_64 gen(seed);
  return Tensor::uniform({1, 1, H, W}, gen, 0.0, 1.0);
}

// Small all-conv config whose CTLs avoid window/pyramid constraints; used
// where many forwards or a tiny graph are needed.
NetworkConfig micro_config() {
  NetworkConfig c = NetworkConfig::desk_preset();
  c.input_h = 16;
  c.input_w = 16;
  c.channels = {4, 8, 8, 8};
  c.cte_ctls = {2, 2, 2, 2};
  c.ctd_ctls = {2, 2, 2};
  c.cnn_only = true;
  c.ffb_expansion = 1;
  return c;
}

bool registry_identical(Network& a, Network& b) {
  auto pa = a.params(), pb = b.params();
  if (pa.size() != pb.size()) return false;
  for (auto& [name, t] : pa) {
    if (!pb.count(name)) return false;
    if (t.shape() != pb.at(name).shape()) return false;
    if (max_abs_diff(t, pb.at(name)) != 0.0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("default preset carries the table hyperparameters") {
  NetworkConfig c = NetworkConfig::default_preset();
  CHECK(c.input_h == 256);
  CHECK(c.input_w == 256);
  CHECK(c.channels == std::vector<size_t>{64, 128, 256, 256});
  CHECK(c.cte_ctls == std::vector<size_t>{4, 4, 16, 4});
  CHECK(c.ctd_ctls == std::vector<size_t>{4, 4, 4});
  CHECK(c.wa_heads == std::vector<size_t>{2, 4, 8, 8});
  CHECK(c.ca_heads == std::vector<size_t>{1, 2, 4, 8});
  CHECK(c.neighborhoods == std::vector<std::array<size_t, 2>>{{3, 3}, {3, 3}, {5, 5}});
  CHECK(c.patch_size == std::array<size_t, 2>{3, 3});
  CHECK(c.level_h() == std::vector<size_t>{128, 64, 32, 16});
  c.validate();
}

TEST_CASE("build: identical seeds give bitwise-identical registries") {
  NetworkConfig c = NetworkConfig::desk_preset();
  Network a = build(c, 42);
  Network b = build(c, 42);
  CHECK(registry_identical(a, b));
  Network other = build(c, 43);
  CHECK(!registry_identical(a, other));
}

TEST_CASE("build: invalid configs are rejected with the violated constraint") {
  NetworkConfig c = NetworkConfig::desk_preset();
  c.cte_ctls = {3, 2, 2, 2};
  CHECK_THROWS_WITH_AS(build(c, 1), doctest::Contains("even"), ConfigError);
  c = NetworkConfig::desk_preset();
  c.channels = {16, 24, 32};
  CHECK_THROWS_WITH_AS(build(c, 1), doctest::Contains("4 encoder levels"), ConfigError);
  c = NetworkConfig::desk_preset();
  c.wa_heads = {3, 4, 8, 8};
  CHECK_THROWS_WITH_AS(build(c, 1), doctest::Contains("WA heads"), ConfigError);
  c = NetworkConfig::desk_preset();
  c.neighborhoods = {{3, 3}, {4, 3}, {5, 5}};
  CHECK_THROWS_WITH_AS(build(c, 1), doctest::Contains("odd"), ConfigError);
}

TEST_CASE("desk preset builds and forwards inside the 10 s budget") {
  auto t0 = std::chrono::steady_clock::now();
  Network net = build(NetworkConfig::desk_preset(), 1);
  NoGradGuard ng;
  Tensor y = forward(net, rand_img(64, 64, 2), rand_img(64, 64, 3));
  auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(y.shape() == std::vector<size_t>{1, 1, 64, 64});
  INFO("desk build+forward took ", dt, " s");
  CHECK(dt < 10.0);
}

TEST_CASE("forward: fresh network with zero output head returns lr_interp") {
  Network net = build(NetworkConfig::desk_preset(), 7);
  Tensor ref = rand_img(64, 64, 8);
  Tensor lr = rand_img(64, 64, 9);
  NoGradGuard ng;
  Tensor y = forward(net, ref, lr);
  CHECK(max_abs_diff(y, lr) == 0.0);
}

TEST_CASE("forward: input shape mismatches are rejected") {
  Network net = build(NetworkConfig::desk_preset(), 10);
  CHECK_THROWS_AS(forward(net, rand_img(32, 32, 11), rand_img(32, 32, 12)), ShapeError);
  CHECK_THROWS_AS(forward(net, rand_img(64, 64, 13), rand_img(32, 32, 14)), ShapeError);
}

TEST_CASE("forward: matches manually wired stages bitwise") {
  NetworkConfig cfg = NetworkConfig::desk_preset();
  Network net = build(cfg, 15);
  Tensor ref = rand_img(64, 64, 16);
  Tensor lr = rand_img(64, 64, 17);
  NoGradGuard ng;
  Tensor expect = forward(net, ref, lr);

  // Re-wire by hand from the same parameter structs.
  auto encode_branch = [&](const Tensor& img, const Conv& head,
                           const std::vector<StageParams>& stages) {
    std::vector<Tensor> feats;
    Tensor x = head.forward(img);
    for (const auto& st : stages) {
      CteOutput o = cte_forward(x, st);
      feats.push_back(o.feature);
      if (st.down) x = o.down;
    }
    return feats;
  };
  auto rf = encode_branch(ref, net.ref_head, net.ref_stages);
  auto df = encode_branch(lr, net.deg_head, net.deg_stages);
  std::vector<Tensor> fused(3);
  for (size_t k = 0; k < 3; ++k) {
    const MatchUnit& u = net.matchers[k];
    Tensor aligned = adain(rf[k], df[k], u.adain);
    size_t gh = 0, gw = 0;
    Tensor pr = unfold_patches(aligned, 3, 3, &gh, &gw);
    Tensor pd = unfold_patches(df[k], 3, 3, nullptr, nullptr);
    MatchResult mr = nbfm_match(pd, pr, gh, gw, u.nbfm);
    Tensor map = fold_patches(mr.matched, df[k].size(1), gh, gw, 3, 3);
    fused[k] = nbfm_fuse(map, df[k], u.nbfm.fuse);
  }
  Tensor d = net.bottleneck_fuse.forward(concat({rf[3], df[3]}, 1));
  for (size_t i = 0; i < 3; ++i) d = ctd_forward(d, fused[2 - i], net.dec_stages[i]);
  Tensor manual = add(net.out_conv.forward(pixel_shuffle2(d)), lr);
  CHECK(max_abs_diff(manual, expect) == 0.0);
}

TEST_CASE("forward: batch permutation equivariance") {
  Network net = build(micro_config(), 18);
  Tensor r1 = rand_img(16, 16, 19), r2 = rand_img(16, 16, 20);
  Tensor l1 = rand_img(16, 16, 21), l2 = rand_img(16, 16, 22);
  NoGradGuard ng;
  Tensor y12 = forward(net, concat({r1, r2}, 0), concat({l1, l2}, 0));
  Tensor y21 = forward(net, concat({r2, r1}, 0), concat({l2, l1}, 0));
  CHECK(max_abs_diff(slice(y12, 0, 0, 1), slice(y21, 0, 1, 1)) == 0.0);
  CHECK(max_abs_diff(slice(y12, 0, 1, 1), slice(y21, 0, 0, 1)) == 0.0);
}

TEST_CASE("forward: default config maps (1,1,256,256) to (1,1,256,256)") {
  Network net = build(NetworkConfig::default_preset(), 23);
  NoGradGuard ng;
  Tensor y = forward(net, rand_img(256, 256, 24), rand_img(256, 256, 25));
  CHECK(y.shape() == std::vector<size_t>{1, 1, 256, 256});
}

TEST_CASE("variants: structural differences are as specified") {
  NetworkConfig cfg = NetworkConfig::desk_preset();
  Network def = build(cfg, 30);
  size_t def_params = def.param_count();

  Network wo_fm = build_variant(cfg, "wo_fm", 30);
  bool has_matching_w = false;
  wo_fm.visit_params([&](const std::string& name, Tensor&) {
    if (name.find(".nbfm.w") != std::string::npos || name.find(".gfm.w") != std::string::npos)
      has_matching_w = true;
  });
  CHECK(!has_matching_w);
  CHECK(wo_fm.param_count() < def_params);

  Network gfm = build_variant(cfg, "gfm", 30);
  bool has_gfm_w = false;
  gfm.visit_params([&](const std::string& name, Tensor&) {
    if (name.find(".gfm.w") != std::string::npos) has_gfm_w = true;
  });
  CHECK(has_gfm_w);
  CHECK(gfm.param_count() == def_params);

  CHECK(build_variant(cfg, "wo_ca", 30).param_count() < def_params);
  CHECK(build_variant(cfg, "wo_wa", 30).param_count() < def_params);
  CHECK(build_variant(cfg, "wo_ps", 30).param_count() < def_params);  // drops one Q/K pair + alphas
  CHECK_THROWS_AS(build_variant(cfg, "bogus", 30), UsageError);
}

TEST_CASE("variants: cnn_only forwards with the default output shape") {
  NetworkConfig cfg = NetworkConfig::desk_preset();
  Network net = build_variant(cfg, "cnn_only", 31);
  NoGradGuard ng;
  Tensor y = forward(net, rand_img(64, 64, 32), rand_img(64, 64, 33));
  CHECK(y.shape() == std::vector<size_t>{1, 1, 64, 64});
}

TEST_CASE("variants: gfm equals nbfm when neighborhoods cover every patch grid") {
  NetworkConfig cfg = micro_config();
  cfg.neighborhoods = {{15, 15}, {7, 7}, {3, 3}};  // grids are 8x8, 4x4, 2x2
  Network a = build(cfg, 34);
  Network b = build_variant(cfg, "gfm", 34);
  Tensor ref = rand_img(16, 16, 35), lr = rand_img(16, 16, 36);
  NoGradGuard ng;
  Tensor ya = forward(a, ref, lr);
  Tensor yb = forward(b, ref, lr);
  CHECK(max_abs_diff(ya, yb) < 1e-12);
}

TEST_CASE("count_params_flops: deterministic, quadratic in width, registry-backed") {
  NetworkConfig cfg = NetworkConfig::desk_preset();
  Network a = build(cfg, 40);
  Network b = build(cfg, 41);  // different weights, same structure
  CountReport ra = count_params_flops(a);
  CountReport rb = count_params_flops(b);
  CHECK(ra.parameters == rb.parameters);
  CHECK(ra.forward_macs == rb.forward_macs);
  CHECK(ra.forward_macs > 0);

  NetworkConfig wide = cfg;
  for (auto& c : wide.channels) c *= 2;
  CountReport rw = count_params_flops(*new Network(build(wide, 40)));
  double ratio = static_cast<double>(rw.parameters) / static_cast<double>(ra.parameters);
  CHECK(ratio > 3.5);
  CHECK(ratio < 4.1);

  // Registry-sum oracle: the reported count equals the sum over the dump.
  size_t manual = 0;
  a.visit_params([&](const std::string&, Tensor& t) { manual += t.numel(); });
  CHECK(ra.parameters == manual);
}

TEST_CASE("save/load: roundtrip reproduces forward outputs bitwise") {
  fs::path dir = fs::temp_directory_path() / "canm_ckpt";
  fs::remove_all(dir);
  NetworkConfig cfg = micro_config();
  Network net = build(cfg, 50);
  // Give the output head signal so weight differences show in the output.
  std::mt19937_64 gen(500);
  net.out_conv.weight = Tensor::randn({1, cfg.channels[0] / 4, 3, 3}, gen, 0.05);
  Tensor ref = rand_img(16, 16, 51), lr = rand_img(16, 16, 52);
  NoGradGuard ng;
  Tensor before = forward(net, ref, lr);
  save_weights(net, dir.string());

  Network fresh = build(cfg, 999);  // different init, zero head
  CHECK(max_abs_diff(forward(fresh, ref, lr), before) > 0.0);
  load_weights(fresh, dir.string());
  CHECK(max_abs_diff(forward(fresh, ref, lr), before) == 0.0);
  fs::remove_all(dir);
}

TEST_CASE("save/load: truncated file fails cleanly without mutation") {
  fs::path dir = fs::temp_directory_path() / "canm_ckpt_trunc";
  fs::remove_all(dir);
  NetworkConfig cfg = micro_config();
  Network net = build(cfg, 53);
  save_weights(net, dir.string());
  // Truncate one tensor file.
  fs::path victim = dir / "bottleneck.fuse.weight.canmt";
  REQUIRE(fs::exists(victim));
  fs::resize_file(victim, fs::file_size(victim) / 2);

  Network target = build(cfg, 54);
  std::map<std::string, Tensor> before = target.params();
  std::map<std::string, std::vector<double>> snapshot;
  for (auto& [n, t] : before) snapshot[n] = t.vec();
  CHECK_THROWS_AS(load_weights(target, dir.string()), IoError);
  for (auto& [n, t] : target.params()) CHECK(t.vec() == snapshot.at(n));
  fs::remove_all(dir);
}

TEST_CASE("save/load: variant mismatch is rejected naming the matching parameter") {
  fs::path dir = fs::temp_directory_path() / "canm_ckpt_variant";
  fs::remove_all(dir);
  NetworkConfig cfg = micro_config();
  cfg.cnn_only = false;
  cfg.cte_ctls = {2, 2, 2, 2};
  cfg.input_h = 64;
  cfg.input_w = 64;
  cfg.channels = {8, 8, 8, 8};
  cfg.wa_heads = {2, 2, 2, 2};
  cfg.ca_heads = {1, 1, 1, 1};
  Network def = build(cfg, 55);
  save_weights(def, dir.string());
  Network gfm = build_variant(cfg, "gfm", 55);
  CHECK_THROWS_WITH_AS(load_weights(gfm, dir.string()), doctest::Contains("gfm"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("config: JSON roundtrip, strict fields, file IO") {
  NetworkConfig c = NetworkConfig::desk_preset();
  nlohmann::json j = c.to_json();
  NetworkConfig back = NetworkConfig::from_json(j);
  CHECK(back.to_json() == c.to_json());
  CHECK(back.hash() == c.hash());

  j["bogus_field"] = 1;
  CHECK_THROWS_WITH_AS(NetworkConfig::from_json(j), doctest::Contains("bogus_field"), ConfigError);
  j.erase("bogus_field");
  j.erase("window_size");
  CHECK_THROWS_WITH_AS(NetworkConfig::from_json(j), doctest::Contains("window_size"), ConfigError);

  fs::path f = fs::temp_directory_path() / "canm_cfg.json";
  c.save(f.string());
  NetworkConfig loaded = NetworkConfig::load(f.string());
  CHECK(loaded.hash() == c.hash());
  fs::remove(f);
}

TEST_CASE("config coverage: every field is consumed by build or forward") {
  NetworkConfig base = NetworkConfig::desk_preset();
  Network bnet = build(base, 60);
  Tensor ref = rand_img(64, 64, 61), lr = rand_img(64, 64, 62);
  // Make the non-residual path contribute so head/window changes are visible.
  bnet.out_conv.weight = Tensor::full({1, base.channels[0] / 4, 3, 3}, 0.05);
  NoGradGuard ng;
  Tensor base_out = forward(bnet, ref, lr);

  auto forward_differs = [&](NetworkConfig mod) {
    Network net = build(mod, 60);
    net.out_conv.weight = Tensor::full({1, mod.channels[0] / 4, 3, 3}, 0.05);
    Tensor out = forward(net, ref, lr);
    return max_abs_diff(out, base_out) > 0.0;
  };
  auto registry_differs = [&](NetworkConfig mod) {
    Network net = build(mod, 60);
    return !registry_identical(bnet, net);
  };

  NetworkConfig m = base;
  m.wa_heads = {4, 4, 8, 8};
  CHECK(forward_differs(m));  // heads change attention grouping, not shapes

  m = base;
  m.ca_heads = {2, 2, 4, 8};
  CHECK(forward_differs(m));

  m = base;
  m.window_size = 4;
  CHECK(forward_differs(m));

  m = base;
  m.patch_size = {5, 5};
  CHECK(forward_differs(m));

  m = base;
  m.global_residual = false;
  CHECK(forward_differs(m));

  m = base;
  m.channels = {16, 24, 32, 48};
  CHECK(registry_differs(m));
  m = base;
  m.cte_ctls = {2, 2, 4, 2};
  CHECK(registry_differs(m));
  m = base;
  m.ctd_ctls = {2, 4, 2};
  CHECK(registry_differs(m));
  m = base;
  m.neighborhoods = {{3, 3}, {5, 5}, {5, 5}};
  CHECK(registry_differs(m));
  m = base;
  m.ffb_expansion = 3;
  CHECK(registry_differs(m));
  m = base;
  m.use_wab = false;
  CHECK(registry_differs(m));
  m = base;
  m.use_cab = false;
  CHECK(registry_differs(m));
  m = base;
  m.use_pyramid = false;
  CHECK(registry_differs(m));
  m = base;
  m.cnn_only = true;
  CHECK(registry_differs(m));
  m = base;
  m.matching = MatchingMode::none;
  CHECK(registry_differs(m));

  m = base;
  m.input_h = 128;
  m.input_w = 128;
  Network big = build(m, 60);
  Tensor y = forward(big, rand_img(128, 128, 63), rand_img(128, 128, 64));
  CHECK(y.shape() == std::vector<size_t>{1, 1, 128, 128});
}

TEST_CASE("overfit: training-start anchors hold exactly") {
  NetworkConfig cfg = NetworkConfig::desk_preset();
  Network net = build(cfg, 70);
  ImagePair pair = synth_pair(1, 64, 64, 4);

  OverfitOptions opts;
  opts.steps = 0;
  OverfitResult r0 = overfit_train(net, pair, opts);
  CHECK(r0.final_psnr == r0.baseline_psnr);  // exact: output == lr_interp
  CHECK(r0.final_ssim == r0.baseline_ssim);

  Network net2 = build(cfg, 70);
  opts.steps = 1;
  OverfitResult r1 = overfit_train(net2, pair, opts);
  NoGradGuard ng;
  double expect = l1_loss(pair.lr_interp, pair.hr_target).item();
  CHECK(std::abs(r1.step0_loss - expect) < 1e-12);
}

TEST_CASE("overfit: loss curve is bitwise reproducible for a fixed seed") {
  NetworkConfig cfg = micro_config();
  ImagePair pair = synth_pair(2, 16, 16, 4);
  OverfitOptions opts;
  opts.steps = 5;
  Network a = build(cfg, 71);
  OverfitResult ra = overfit_train(a, pair, opts);
  Network b = build(cfg, 71);
  OverfitResult rb = overfit_train(b, pair, opts);
  CHECK(ra.loss_curve == rb.loss_curve);  // bitwise
  CHECK(max_abs_diff(ra.output, rb.output) == 0.0);
}

TEST_CASE("overfit: a few steps reduce the loss on the micro config") {
  NetworkConfig cfg = micro_config();
  ImagePair pair = synth_pair(3, 16, 16, 4);
  OverfitOptions opts;
  opts.steps = 30;
  opts.base_lr = 1e-3;
  Network net = build(cfg, 72);
  OverfitResult r = overfit_train(net, pair, opts);
  CHECK(r.final_loss < r.step0_loss);
}

TEST_CASE("end-to-end gradient on sampled parameters (micro config)") {
  NetworkConfig cfg = micro_config();
  Network net = build(cfg, 73);
  // Live output head so gradients reach the whole graph; target shifted well
  // below the output range so the L1 kink never sits inside the FD stencil.
  std::mt19937_64 gen(730);
  net.out_conv.weight = Tensor::randn({1, cfg.channels[0] / 4, 3, 3}, gen, 0.05);
  ImagePair pair = synth_pair(4, 16, 16, 4);
  Tensor ref = reshape(pair.ref, {1, 1, 16, 16});
  Tensor lr = reshape(pair.lr_interp, {1, 1, 16, 16});
  Tensor target = add_const(reshape(pair.hr_target, {1, 1, 16, 16}), -1.5);

  auto params = net.params();
  for (auto& [n, p] : params) p.set_requires_grad(true);
  auto& graph = autodiff::GraphT<double>::tls();
  graph.clear();
  Tensor loss = l1_loss(forward(net, ref, lr), target);
  loss.backward();
  graph.clear();

  // Central differences on a deterministic sample of coordinates.
  std::mt19937_64 pick(74);
  std::vector<std::string> names;
  for (auto& [n, p] : params) names.push_back(n);
  double max_rel = 0;
  NoGradGuard ng;
  for (int s = 0; s < 8; ++s) {
    const std::string& name = names[pick() % names.size()];
    Tensor& p = params.at(name);
    size_t idx = pick() % p.numel();
    double ad = p.has_grad() ? p.grad()[idx] : 0.0;
    double orig = p.data()[idx];
    const double h = 1e-4;
    p.data()[idx] = orig + h;
    double fp = l1_loss(forward(net, ref, lr), target).item();
    p.data()[idx] = orig - h;
    double fm = l1_loss(forward(net, ref, lr), target).item();
    p.data()[idx] = orig;
    double fd = (fp - fm) / (2 * h);
    max_rel = std::max(max_rel, std::abs(fd - ad) / std::max({1.0, std::abs(fd), std::abs(ad)}));
  }
  INFO("max rel err ", max_rel);
  CHECK(max_rel < 1e-5);
  for (auto& [n, p] : params) {
    p.zero_grad();
    p.set_requires_grad(false);
  }
}
