#include "baton/denoiser.hpp"

#include <json.hpp>

#include <random>

namespace baton::model {

using json = nlohmann::json;
using nn::Var;

const char* to_string(Backbone b) { return b == Backbone::BiMamba ? "bimamba" : "attention"; }

Backbone backbone_from_string(const std::string& s) {
  if (s == "bimamba") return Backbone::BiMamba;
  if (s == "attention") return Backbone::Attention;
  fail(ErrorKind::ConfigError, "unknown backbone '" + s + "'");
}

void DenoiserConfig::validate() const {
  require(d_model > 0 && n_cond_layers >= 0 && n_blocks > 0 && heads > 0 && ffn_dim > 0,
          ErrorKind::ConfigError, "denoiser dimensions must be positive");
  require(d_model % heads == 0, ErrorKind::ConfigError, "heads must divide d_model");
  require(d_model % 2 == 0, ErrorKind::ConfigError, "d_model must be even for the timestep embedding");
  require(motion_dim > 0 && music_dim > 0 && t_max > 0, ErrorKind::ConfigError, "invalid io dimensions");
  require(dropout >= 0 && dropout < 1, ErrorKind::ConfigError, "dropout must be in [0, 1)");
  require(ssm.d_state > 0 && ssm.d_conv > 0 && ssm.expand > 0, ErrorKind::ConfigError, "invalid ssm config");
}

std::string DenoiserConfig::to_json() const {
  json j = {{"d_model", d_model},
            {"n_cond_layers", n_cond_layers},
            {"n_blocks", n_blocks},
            {"heads", heads},
            {"ffn_dim", ffn_dim},
            {"dropout", dropout},
            {"d_state", ssm.d_state},
            {"d_conv", ssm.d_conv},
            {"expand", ssm.expand},
            {"motion_dim", motion_dim},
            {"music_dim", music_dim},
            {"t_max", t_max},
            {"backbone", to_string(backbone)},
            {"bidirectional", bidirectional}};
  return j.dump();
}

DenoiserConfig DenoiserConfig::from_json(const std::string& text) {
  DenoiserConfig c;
  try {
    const json j = json::parse(text);
    c.d_model = j.value("d_model", c.d_model);
    c.n_cond_layers = j.value("n_cond_layers", c.n_cond_layers);
    c.n_blocks = j.value("n_blocks", c.n_blocks);
    c.heads = j.value("heads", c.heads);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.dropout = j.value("dropout", c.dropout);
    c.ssm.d_state = j.value("d_state", c.ssm.d_state);
    c.ssm.d_conv = j.value("d_conv", c.ssm.d_conv);
    c.ssm.expand = j.value("expand", c.ssm.expand);
    c.motion_dim = j.value("motion_dim", c.motion_dim);
    c.music_dim = j.value("music_dim", c.music_dim);
    c.t_max = j.value("t_max", c.t_max);
    c.backbone = backbone_from_string(j.value("backbone", std::string("bimamba")));
    c.bidirectional = j.value("bidirectional", c.bidirectional);
  } catch (const json::exception& e) {
    fail(ErrorKind::ConfigError, std::string("denoiser config: ") + e.what());
  }
  c.validate();
  return c;
}

DenoiserConfig DenoiserConfig::toy(int motion_dim) {
  DenoiserConfig c;
  c.d_model = 64;
  c.n_blocks = 2;
  c.ffn_dim = 128;
  c.motion_dim = motion_dim;
  return c;
}

namespace {

void init_mixer(nn::ParamSet<float>& params, const std::string& prefix, const DenoiserConfig& cfg,
                std::mt19937_64& rng) {
  if (cfg.backbone == Backbone::BiMamba) {
    ssm::init_bimamba(params, prefix, cfg.d_model, cfg.ssm, cfg.bidirectional, rng);
  } else {
    nn::init_attention(params, prefix, cfg.d_model, rng);
  }
}

template <typename T>
Var<T> mixer(const nn::Binding<T>& p, const std::string& prefix, const DenoiserConfig& cfg, const Var<T>& x,
             const nn::Context& ctx) {
  if (cfg.backbone == Backbone::BiMamba) return ssm::bimamba(p, prefix, x, cfg.bidirectional);
  return nn::attention_layer(p, prefix, x, x, cfg.heads, ctx);
}

}  // namespace

nn::ParamSet<float> init_params(const DenoiserConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  nn::ParamSet<float> p;
  const int d = cfg.d_model;
  nn::init_linear(p, "music_in", cfg.music_dim, d, rng);
  for (int i = 0; i < cfg.n_cond_layers; ++i) {
    const std::string pre = "cond." + std::to_string(i);
    nn::init_layer_norm(p, pre + ".norm", d);
    init_mixer(p, pre + ".mixer", cfg, rng);
  }
  nn::init_layer_norm(p, "cond.norm_out", d);
  nn::init_linear(p, "time_mlp.0", d, d, rng);
  nn::init_linear(p, "time_mlp.1", d, d, rng);
  nn::init_linear(p, "motion_in", cfg.motion_dim, d, rng);
  for (int i = 0; i < cfg.n_blocks; ++i) {
    const std::string pre = "blocks." + std::to_string(i);
    nn::init_layer_norm(p, pre + ".norm1", d);
    init_mixer(p, pre + ".mixer", cfg, rng);
    nn::init_zero_linear(p, pre + ".film1.gamma", d, d);
    nn::init_zero_linear(p, pre + ".film1.beta", d, d);
    nn::init_layer_norm(p, pre + ".norm2", d);
    nn::init_attention(p, pre + ".cross_attn", d, rng);
    nn::init_layer_norm(p, pre + ".norm3", d);
    nn::init_linear(p, pre + ".ffn.0", d, cfg.ffn_dim, rng);
    nn::init_linear(p, pre + ".ffn.1", cfg.ffn_dim, d, rng);
    nn::init_zero_linear(p, pre + ".film2.gamma", d, d);
    nn::init_zero_linear(p, pre + ".film2.beta", d, d);
  }
  nn::init_layer_norm(p, "out_norm", d);
  nn::init_zero_linear(p, "out_proj", d, cfg.motion_dim);
  p["null_cond"] = nn::uniform_init(1, d, 1.0, rng);
  return p;
}

template <typename T>
Var<T> encode_condition(const nn::Binding<T>& p, const DenoiserConfig& cfg, const Var<T>& music,
                        const nn::Context& ctx) {
  require(music.cols() == cfg.music_dim, ErrorKind::ShapeError, "music features have wrong width");
  require(music.value().allFinite(), ErrorKind::NumericalError, "music features are not finite");
  nn::Context c = ctx;
  c.dropout = cfg.dropout;
  Var<T> h = nn::linear(p, "music_in", music);
  for (int i = 0; i < cfg.n_cond_layers; ++i) {
    const std::string pre = "cond." + std::to_string(i);
    h = nn::add(h, mixer(p, pre + ".mixer", cfg, nn::layer_norm(p, pre + ".norm", h), c));
  }
  return nn::layer_norm(p, "cond.norm_out", h);
}

template <typename T>
Var<T> null_condition(const nn::Binding<T>& p, nn::Index batch, nn::Index frames) {
  require(batch >= 1 && frames >= 1, ErrorKind::ShapeError, "null condition needs a positive shape");
  return nn::with_seq_len(nn::broadcast_seq(p("null_cond"), batch * frames), frames);
}

template <typename T>
Var<T> denoise(const nn::Binding<T>& p, const DenoiserConfig& cfg, const Var<T>& z,
               const std::vector<int>& timesteps, const Var<T>& memory, const nn::Context& ctx) {
  require(z.cols() == cfg.motion_dim, ErrorKind::ShapeError, "noisy motion has wrong width");
  require(memory.cols() == cfg.d_model, ErrorKind::ShapeError, "memory has wrong width");
  const nn::Index batch = z.batch();
  require(static_cast<nn::Index>(timesteps.size()) == batch, ErrorKind::ShapeError,
          "one timestep per sequence required");
  require(memory.batch() == batch, ErrorKind::ShapeError, "memory batch does not match motion batch");
  for (int t : timesteps) {
    require(t >= 1 && t <= cfg.t_max, ErrorKind::ConfigError, "timestep out of range");
  }
  nn::Context c = ctx;
  c.dropout = cfg.dropout;

  const Var<T> temb = Var<T>::constant(nn::timestep_embedding<T>(timesteps, cfg.d_model));
  const Var<T> emb =
      nn::linear(p, "time_mlp.1", nn::silu(nn::linear(p, "time_mlp.0", temb)));

  Var<T> x = nn::linear(p, "motion_in", z);
  for (int i = 0; i < cfg.n_blocks; ++i) {
    const std::string pre = "blocks." + std::to_string(i);
    x = nn::add(x, mixer(p, pre + ".mixer", cfg, nn::layer_norm(p, pre + ".norm1", x), c));
    x = nn::film(x, nn::linear(p, pre + ".film1.gamma", emb), nn::linear(p, pre + ".film1.beta", emb));
    x = nn::add(x, nn::attention_layer(p, pre + ".cross_attn", nn::layer_norm(p, pre + ".norm2", x), memory,
                                       cfg.heads, c));
    Var<T> f = nn::gelu(nn::linear(p, pre + ".ffn.0", nn::layer_norm(p, pre + ".norm3", x)));
    x = nn::add(x, nn::linear(p, pre + ".ffn.1", nn::dropout(f, c)));
    x = nn::film(x, nn::linear(p, pre + ".film2.gamma", emb), nn::linear(p, pre + ".film2.beta", emb));
  }
  return nn::linear(p, "out_proj", nn::layer_norm(p, "out_norm", x));
}

#define BATON_MODEL_INSTANTIATE(T)                                                                   \
  template Var<T> encode_condition(const nn::Binding<T>&, const DenoiserConfig&, const Var<T>&,     \
                                   const nn::Context&);                                             \
  template Var<T> null_condition(const nn::Binding<T>&, nn::Index, nn::Index);                      \
  template Var<T> denoise(const nn::Binding<T>&, const DenoiserConfig&, const Var<T>&,              \
                          const std::vector<int>&, const Var<T>&, const nn::Context&);

BATON_MODEL_INSTANTIATE(float)
BATON_MODEL_INSTANTIATE(double)

}  // namespace baton::model
