#pragma once

// Diffusion over standardized motion frames: noise schedule, training
// objective, optimizer loop with EMA, guided DDIM sampling and masked editing.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "baton/denoiser.hpp"
#include "baton/kinematics.hpp"

namespace baton::diffusion {

using MatD = nn::Mat<double>;
using MatF = nn::Mat<float>;

struct Schedule {
  int steps = 1000;
  std::vector<double> beta;       // index 1..steps (index 0 unused, 0)
  std::vector<double> alpha_bar;  // index 0..steps, alpha_bar[0] = 1

  static Schedule linear(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);
  double sqrt_ab(int t) const;
  double sqrt_one_minus_ab(int t) const;
};

// sqrt(ab_t) x + sqrt(1 - ab_t) eps; t in [0, steps].
MatD q_sample(const MatD& x, int t, const MatD& eps, const Schedule& s);

// Re-noises the clean estimate at t - 1 with fresh noise.
MatD ddpm_step(const MatD& xhat, int t, std::mt19937_64& rng, const Schedule& s);

struct LossWeights {
  double rec = 0.636;
  double hand = 0.636;
  double body = 0.636;
  double foot = 10.942;
};

struct LossFlags {
  bool velocity = true;       // false: position-only FK terms
  bool fk_decomposed = true;  // false: one FK term over the full skeleton
};

struct LossTerms {
  double rec = 0, hand = 0, body = 0, foot = 0, total = 0;
};

// Everything a trained model needs at inference time.
struct Model {
  model::DenoiserConfig config;
  kin::Skeleton skeleton;
  kin::NormStats motion_stats;  // 3 + 6J + K columns; contact columns are identity
  kin::NormStats music_stats;
  nn::ParamSet<float> params;
  nn::ParamSet<float> ema;
  int step = 0;
  std::uint64_t seed = 0;  // initialization seed

  int export_dim() const { return skeleton.frame_dim(); }
  int contact_dim() const { return skeleton.num_contacts(); }
  const nn::ParamSet<float>& inference_params(bool use_ema = true) const;
};

Model make_model(const model::DenoiserConfig& config, const kin::Skeleton& skel, std::uint64_t seed);

struct TrainingPair {
  kin::MotionSequence motion;
  MatD music;  // T x 35, raw features
};

// Contact thresholds: speed 0.005 per frame; height = lowest contact-joint
// height in the sequence + 0.05.
MatD derive_contacts(const kin::MotionSequence& motion, const kin::Skeleton& skel);

// [root | rotations | contacts] in raw units, T x (3 + 6J + K).
MatD motion_matrix(const kin::MotionSequence& motion, const kin::Skeleton& skel);

// Fits motion (contacts left as identity) and music statistics.
void fit_normalization(Model& m, const std::vector<TrainingPair>& data);

// Graph-level loss terms for a standardized prediction against a standardized
// target, both (B*T) x D_motion with seq_len T.
template <typename T>
struct LossVars {
  nn::Var<T> rec, hand, body, foot, total;
};

template <typename T>
LossVars<T> loss_terms(const nn::Var<T>& xhat, const nn::Var<T>& x, const Model& m, const LossWeights& w,
                       const LossFlags& flags);

struct TrainConfig {
  int steps = 2000;
  int batch = 16;
  int window = 240;
  int window_stride = 8;
  double lr = 4e-4;
  double weight_decay = 0.02;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  double ema_decay = 0.9999;
  double cond_drop = 0.2;
  LossWeights weights;
  LossFlags flags;
  std::uint64_t seed = 42;
  int checkpoint_every = 0;  // 0: never
};

// Standardized (B*T) x D_motion target and (B*T) x 35 music for one batch.
struct Batch {
  MatF motion;
  MatF music;
  int frames = 0;
};

// One optimization objective evaluation on a prepared batch. Returns the loss
// graph; `drop` marks sequences whose memory is replaced by the null memory.
template <typename T>
LossVars<T> batch_losses(const nn::Binding<T>& p, const Model& m, const nn::Mat<T>& motion,
                         const nn::Mat<T>& music, int frames, const std::vector<int>& timesteps,
                         const nn::Mat<T>& noise, const std::vector<bool>& drop, const LossWeights& w,
                         const LossFlags& flags, const nn::Context& ctx);

struct TrainResult {
  std::vector<LossTerms> history;
};

using StepCallback = std::function<void(int step, const LossTerms&)>;
using CheckpointCallback = std::function<void(const Model&)>;

// Trains in place. Throws NumericalError on a non-finite loss, leaving the
// model at its last finite state.
TrainResult train(Model& m, const std::vector<TrainingPair>& data, const TrainConfig& cfg,
                  const StepCallback& on_step = {}, const CheckpointCallback& on_checkpoint = {});

// EMA update: shadow = decay * shadow + (1 - decay) * params.
void ema_update(nn::ParamSet<float>& shadow, const nn::ParamSet<float>& params, double decay);

struct SamplerConfig {
  int steps = 50;
  double guidance = 4.0;
  std::uint64_t seed = 42;
  bool use_ema = true;
};

// Guided estimate x_null + w (x_cond - x_null); w = 1 and w = 0 skip the
// unused branch. z: (B*T) x D, memories: B sequences each.
MatF cfg_predict(const nn::Binding<float>& p, const model::DenoiserConfig& cfg, const MatF& z, int frames,
                 const std::vector<int>& timesteps, const MatF& mem_cond, const MatF& mem_null, double w);

// Decreasing DDIM timesteps, e.g. 50 steps -> 1000, 980, ..., 20.
std::vector<int> ddim_timesteps(int steps, int t_max);

// Called after each step with the step index, the next timestep and the
// current standardized sample (B*T) x D_motion.
using StepObserver = std::function<void(int step, int t_next, const MatF& z)>;

// Generates one sequence per music clip (each at least `frames` rows; the
// first `frames` are used). Sequence i uses noise seed cfg.seed + i.
std::vector<kin::MotionSequence> ddim_sample(const Model& m, const std::vector<MatD>& music, int frames,
                                             const SamplerConfig& cfg, const StepObserver& observer = {});

struct EditMask {
  MatD mask;   // T x (3 + 6J), entries 0/1
  MatD known;  // T x (3 + 6J), raw units
};

// Called after each intermediate step with the re-noised known sample.
using EditObserver = std::function<void(int step, int t_next, const MatF& z, const MatF& known_noised)>;

kin::MotionSequence edit_masked(const Model& m, const MatD& music, const EditMask& mask, const SamplerConfig& cfg,
                                const EditObserver& observer = {});

enum class EditMode { Inbetween, Continuation, UpperToLower, BodyToHandFace };

EditMode edit_mode_from_string(const std::string& s);

// Known regions per mode: in-betweening keeps the first and last `span` frames,
// continuation keeps the first `span` frames, upper-to-lower keeps everything
// except lower-limb rotations, body-to-hand/face frees hand and face rotations.
MatD build_mode_mask(EditMode mode, int frames, const kin::Skeleton& skel, int span);

// JSON list of {frames: [start, end), parts: "all" | "root" | [groups...],
// mode: "known" | "free"}, applied in order over an all-free mask.
MatD compile_mask_spec(const std::string& json_text, int frames, const kin::Skeleton& skel);

}  // namespace baton::diffusion
