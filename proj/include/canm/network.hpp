#pragma once

// Full network assembly: two-branch encoder, per-level matching units,
// bottleneck fusion, decoder stages, heads; configuration presets, ablation
// variants, parameter counting, and weight checkpointing.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "canm/attention.hpp"
#include "canm/matching.hpp"
#include "canm/tensor.hpp"

namespace canm {

enum class MatchingMode { nbfm, gfm, none };

std::string to_string(MatchingMode m);
MatchingMode matching_mode_from_string(const std::string& s);

struct NetworkConfig {
  size_t input_h = 256, input_w = 256;
  std::vector<size_t> channels = {64, 128, 256, 256};
  std::vector<size_t> cte_ctls = {4, 4, 16, 4};
  std::vector<size_t> ctd_ctls = {4, 4, 4};
  std::vector<size_t> wa_heads = {2, 4, 8, 8};
  std::vector<size_t> ca_heads = {1, 2, 4, 8};
  std::vector<std::array<size_t, 2>> neighborhoods = {{3, 3}, {3, 3}, {5, 5}};
  std::array<size_t, 2> patch_size = {3, 3};
  size_t window_size = 8;
  size_t ffb_expansion = 2;
  bool use_wab = true;
  bool use_cab = true;
  bool use_pyramid = true;
  bool cnn_only = false;
  MatchingMode matching = MatchingMode::nbfm;
  bool global_residual = true;

  /// Table defaults at full scale.
  static NetworkConfig default_preset();
  /// 64x64 / thin-channel preset for desk-scale verification runs.
  static NetworkConfig desk_preset();

  /// Throws ConfigError naming the violated constraint.
  void validate() const;

  /// Feature map side lengths per encoder level (input halved by the head,
  /// then by each inter-level downsampler).
  std::vector<size_t> level_h() const;
  std::vector<size_t> level_w() const;

  nlohmann::ordered_json to_json() const;
  static NetworkConfig from_json(const nlohmann::json& j);
  static NetworkConfig load(const std::string& path);
  void save(const std::string& path) const;

  /// FNV-1a over the canonical JSON dump; stable across processes.
  uint64_t hash() const;
};

/// Per-level cross-branch fusion: AdaIN + matcher + 1x1 fusion, or plain
/// concatenation + 1x1 when matching is disabled.
struct MatchUnit {
  bool has_matcher = true;  // false: plain concat + fuse (w/o FM)
  AdainParams adain;
  NbfmParams nbfm;

  void visit_params(const std::string& prefix, MatchingMode mode,
                    const std::function<void(const std::string&, Tensor&)>& fn);
};

struct Network {
  NetworkConfig config;
  Conv ref_head, deg_head;              // 3x3 stride-2, 1 -> C1
  std::vector<StageParams> ref_stages;  // 4 CTE stages
  std::vector<StageParams> deg_stages;  // 4 CTE stages
  std::vector<MatchUnit> matchers;      // levels 1..3
  Conv bottleneck_fuse;                 // 1x1, 2*C4 -> C4
  std::vector<StageParams> dec_stages;  // CTD stages for levels 3, 2, 1
  Conv out_conv;                        // 3x3, C1/4 -> 1, zero-initialized

  void visit_params(const std::function<void(const std::string&, Tensor&)>& fn);
  /// Flat named registry; names are unique and handles share storage with
  /// the network.
  std::map<std::string, Tensor> params();
  size_t param_count();
};

/// Builds a network with all parameters initialized reproducibly from seed
/// (truncated-normal projections, zero biases, ones for norm gains, alphas
/// and matching weights, zeroed output head).
Network build(const NetworkConfig& config, uint64_t seed);

/// Ablation variants: wo_ca, wo_wa, wo_ps, cnn_only, wo_fm, gfm.
Network build_variant(NetworkConfig config, const std::string& variant, uint64_t seed);
std::vector<std::string> variant_names();

/// Full forward pass; both inputs at the configured resolution, one channel.
Tensor forward(const Network& net, const Tensor& ref, const Tensor& lr_interp);

struct CountReport {
  size_t parameters = 0;
  uint64_t forward_macs = 0;  // analytic multiply-accumulate estimate, batch 1
};
CountReport count_params_flops(Network& net);

/// Checkpoint directory: one binary tensor file per parameter plus a JSON
/// manifest (config, config hash, names, shapes). Loading validates names,
/// config hash and shapes before mutating anything.
void save_weights(Network& net, const std::string& dir);
void load_weights(Network& net, const std::string& dir);

}  // namespace canm
