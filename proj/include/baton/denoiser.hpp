#pragma once

// Music-conditioned motion denoiser: a condition encoder over the music
// features and a stack of generator blocks that predict the clean motion.
//
// Parameter layout (prefix -> role):
//   music_in, cond.{i}.norm, cond.{i}.mixer, cond.norm_out   condition encoder
//   time_mlp.0, time_mlp.1                                   timestep embedding MLP
//   motion_in                                                input projection
//   blocks.{i}.{norm1, mixer, film1, norm2, cross_attn,
//               norm3, ffn.0, ffn.1, film2}                  generator blocks
//   out_norm, out_proj, null_cond                            head and CFG null memory

#include <cstdint>
#include <string>
#include <vector>

#include "baton/nn.hpp"
#include "baton/ssm.hpp"

namespace baton::model {

enum class Backbone { BiMamba, Attention };

const char* to_string(Backbone b);
Backbone backbone_from_string(const std::string& s);

struct DenoiserConfig {
  int d_model = 512;
  int n_cond_layers = 2;
  int n_blocks = 8;
  int heads = 4;
  int ffn_dim = 1024;
  double dropout = 0.1;
  ssm::SsmConfig ssm;
  int motion_dim = 333;
  int music_dim = 35;
  int t_max = 1000;
  Backbone backbone = Backbone::BiMamba;
  bool bidirectional = true;  // false: forward-only sequence mixer

  void validate() const;
  std::string to_json() const;
  static DenoiserConfig from_json(const std::string& text);
  static DenoiserConfig toy(int motion_dim);
};

// Deterministic in (config, seed). The output head and FiLM heads start at zero.
nn::ParamSet<float> init_params(const DenoiserConfig& cfg, std::uint64_t seed);

// music: (B*T) x music_dim with seq_len T -> (B*T) x d_model.
template <typename T>
nn::Var<T> encode_condition(const nn::Binding<T>& p, const DenoiserConfig& cfg, const nn::Var<T>& music,
                            const nn::Context& ctx = {});

// Learned null memory broadcast to `batch` sequences of `frames` rows.
template <typename T>
nn::Var<T> null_condition(const nn::Binding<T>& p, nn::Index batch, nn::Index frames);

// z: (B*T) x motion_dim with seq_len T; timesteps: one per sequence in
// [1, t_max]; memory: B sequences. Returns the clean-motion estimate.
template <typename T>
nn::Var<T> denoise(const nn::Binding<T>& p, const DenoiserConfig& cfg, const nn::Var<T>& z,
                   const std::vector<int>& timesteps, const nn::Var<T>& memory, const nn::Context& ctx = {});

}  // namespace baton::model
