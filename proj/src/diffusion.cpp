#include "baton/diffusion.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>

namespace baton::diffusion {

using nn::Index;
using nn::Var;

// ---- schedule ---------------------------------------------------------------------

Schedule Schedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 1 || !(beta_start > 0) || !(beta_end > beta_start) || !(beta_end < 1)) {
    fail(ErrorKind::ConfigError, "schedule needs steps >= 1 and 0 < beta_start < beta_end < 1");
  }
  Schedule s;
  s.steps = steps;
  s.beta.assign(steps + 1, 0.0);
  s.alpha_bar.assign(steps + 1, 1.0);
  for (int t = 1; t <= steps; ++t) {
    s.beta[t] = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / (steps - 1);
    s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - s.beta[t]);
  }
  return s;
}

double Schedule::sqrt_ab(int t) const { return std::sqrt(alpha_bar.at(t)); }
double Schedule::sqrt_one_minus_ab(int t) const { return std::sqrt(1.0 - alpha_bar.at(t)); }

MatD q_sample(const MatD& x, int t, const MatD& eps, const Schedule& s) {
  if (t < 0 || t > s.steps) fail(ErrorKind::ConfigError, "q_sample: timestep out of range");
  require(x.rows() == eps.rows() && x.cols() == eps.cols(), ErrorKind::ShapeError, "q_sample: shape mismatch");
  return s.sqrt_ab(t) * x + s.sqrt_one_minus_ab(t) * eps;
}

MatD ddpm_step(const MatD& xhat, int t, std::mt19937_64& rng, const Schedule& s) {
  if (t < 1 || t > s.steps) fail(ErrorKind::ConfigError, "ddpm_step: timestep out of range");
  std::normal_distribution<double> normal;
  MatD eps(xhat.rows(), xhat.cols());
  for (Index i = 0; i < eps.size(); ++i) eps.data()[i] = normal(rng);
  return q_sample(xhat, t - 1, eps, s);
}

// ---- model --------------------------------------------------------------------------

const nn::ParamSet<float>& Model::inference_params(bool use_ema) const {
  return use_ema && !ema.empty() ? ema : params;
}

Model make_model(const model::DenoiserConfig& config, const kin::Skeleton& skel, std::uint64_t seed) {
  skel.validate();
  require(config.motion_dim == skel.frame_dim() + skel.num_contacts(), ErrorKind::ConfigError,
          "motion_dim must equal 3 + 6J + K for the skeleton");
  Model m;
  m.config = config;
  m.skeleton = skel;
  m.seed = seed;
  m.params = model::init_params(config, seed);
  m.motion_stats = kin::NormStats::identity(config.motion_dim);
  m.music_stats = kin::NormStats::identity(config.music_dim);
  return m;
}

MatD derive_contacts(const kin::MotionSequence& motion, const kin::Skeleton& skel) {
  const int k = skel.num_contacts();
  if (k == 0) return MatD(motion.frames(), 0);
  const MatD pos = kin::forward_kinematics(skel, motion);
  double floor_y = std::numeric_limits<double>::infinity();
  for (int c : skel.contact_joints) floor_y = std::min(floor_y, pos.col(3 * c + 1).minCoeff());
  return kin::contact_labels(pos, skel, 0.005, floor_y + 0.05);
}

MatD motion_matrix(const kin::MotionSequence& motion, const kin::Skeleton& skel) {
  motion.validate();
  require(motion.joints() == skel.num_joints(), ErrorKind::ShapeError, "motion/skeleton joint count mismatch");
  const int k = skel.num_contacts();
  MatD contacts;
  if (motion.contacts && motion.contacts->cols() == k) {
    contacts = *motion.contacts;
  } else {
    contacts = derive_contacts(motion, skel);
  }
  MatD out(motion.frames(), skel.frame_dim() + k);
  out.leftCols(skel.frame_dim()) = motion.flat();
  out.rightCols(k) = contacts;
  return out;
}

void fit_normalization(Model& m, const std::vector<TrainingPair>& data) {
  require(!data.empty(), ErrorKind::ConfigError, "cannot fit normalization on an empty dataset");
  std::vector<MatD> motion, music;
  for (const auto& d : data) {
    motion.push_back(d.motion.flat());
    music.push_back(d.music);
  }
  const kin::NormStats ms = kin::NormStats::fit(motion);
  const int k = m.contact_dim();
  m.motion_stats.mean = kin::RowD::Zero(ms.dim() + k);
  m.motion_stats.std = kin::RowD::Ones(ms.dim() + k);
  m.motion_stats.mean.head(ms.dim()) = ms.mean;
  m.motion_stats.std.head(ms.dim()) = ms.std;
  m.music_stats = kin::NormStats::fit(music);
}

// ---- losses -------------------------------------------------------------------------

namespace {

template <typename T>
Var<T> scalar(T v) {
  nn::Mat<T> m(1, 1);
  m(0, 0) = v;
  return Var<T>::constant(std::move(m));
}

template <typename T>
Var<T> row_const(const kin::RowD& r) {
  return Var<T>::constant(r.cast<T>());
}

template <typename T>
Var<T> fk_term(const Var<T>& pos_hat, const Var<T>& pos_gt, bool velocity) {
  Var<T> term = nn::mse(pos_hat, pos_gt);
  if (velocity) term = nn::add(term, nn::mse(nn::temporal_diff(pos_hat), nn::temporal_diff(pos_gt)));
  return term;
}

// Rotations of joints outside `group` become identity; root zeroed for hands.
template <typename T>
std::pair<Var<T>, Var<T>> masked_pose(const Var<T>& root, const Var<T>& rot, const kin::Skeleton& skel,
                                      const std::string& group) {
  const kin::RowD keep = kin::part_keep_mask(skel, group);
  kin::RowD fill = kin::RowD::Zero(keep.size());
  const kin::Vec6 id = kin::identity_sixd();
  for (int j = 0; j < skel.num_joints(); ++j) {
    if (keep(6 * j) == 0) fill.segment(6 * j, 6) = id.transpose();
  }
  Var<T> r = nn::add_row(nn::mul_row(rot, row_const<T>(keep)), row_const<T>(fill));
  Var<T> t = root;
  if (group == "hand") t = Var<T>::constant(nn::Mat<T>::Zero(root.rows(), 3), root.seq_len());
  return {t, r};
}

template <typename T>
void check_finite(const Var<T>& v, const char* name) {
  if (!std::isfinite(static_cast<double>(v.item()))) {
    fail(ErrorKind::NumericalError, std::string("loss term '") + name + "' is not finite");
  }
}

}  // namespace

template <typename T>
LossVars<T> loss_terms(const Var<T>& xhat, const Var<T>& x, const Model& m, const LossWeights& w,
                       const LossFlags& flags) {
  const kin::Skeleton& skel = m.skeleton;
  const int jd = 6 * skel.num_joints();
  const int k = skel.num_contacts();
  require(xhat.cols() == 3 + jd + k && x.cols() == xhat.cols() && x.rows() == xhat.rows(),
          ErrorKind::ShapeError, "loss inputs have wrong shape");
  LossVars<T> out;
  out.rec = nn::mse(xhat, x);

  const Var<T> std_row = row_const<T>(m.motion_stats.std);
  const Var<T> mean_row = row_const<T>(m.motion_stats.mean);
  const Var<T> raw_hat = nn::add_row(nn::mul_row(xhat, std_row), mean_row);
  const Var<T> raw_gt = nn::add_row(nn::mul_row(x, std_row), mean_row);
  const Var<T> root_hat = nn::slice_cols(raw_hat, 0, 3);
  const Var<T> rot_hat = nn::slice_cols(raw_hat, 3, jd);
  const Var<T> root_gt = nn::slice_cols(raw_gt, 0, 3);
  const Var<T> rot_gt = nn::slice_cols(raw_gt, 3, jd);

  std::optional<Var<T>> full_hat;
  auto full_fk_hat = [&]() -> const Var<T>& {
    if (!full_hat) full_hat = kin::fk_op(root_hat, rot_hat, skel);
    return *full_hat;
  };

  if (flags.fk_decomposed) {
    for (const char* group : {"hand", "body"}) {
      auto [rh, qh] = masked_pose(root_hat, rot_hat, skel, group);
      auto [rg, qg] = masked_pose(root_gt, rot_gt, skel, group);
      Var<T> term = fk_term(kin::fk_op(rh, qh, skel), kin::fk_op(rg, qg, skel), flags.velocity);
      (std::string(group) == "hand" ? out.hand : out.body) = term;
    }
  } else {
    Var<T> term = fk_term(full_fk_hat(), kin::fk_op(root_gt, rot_gt, skel), flags.velocity);
    out.hand = term;
    out.body = term;
  }

  if (k > 0) {
    std::vector<Index> vel_cols, prob_cols;
    for (int c = 0; c < k; ++c) {
      for (int a = 0; a < 3; ++a) {
        vel_cols.push_back(3 * skel.contact_joints[c] + a);
        prob_cols.push_back(c);
      }
    }
    const Var<T> vel = nn::gather_cols(nn::temporal_diff(full_fk_hat()), vel_cols);
    const Var<T> prob = nn::gather_cols(nn::trim_last(nn::sigmoid(nn::slice_cols(xhat, 3 + jd, k))), prob_cols);
    const Var<T> e = nn::mul(vel, prob);
    out.foot = nn::scale(nn::mean(nn::mul(e, e)), T(3));
  } else {
    out.foot = scalar<T>(0);
  }

  Var<T> total = nn::scale(out.rec, T(w.rec));
  if (flags.fk_decomposed) {
    total = nn::add(total, nn::scale(out.hand, T(w.hand)));
    total = nn::add(total, nn::scale(out.body, T(w.body)));
  } else {
    total = nn::add(total, nn::scale(out.hand, T(w.hand + w.body)));
  }
  out.total = nn::add(total, nn::scale(out.foot, T(w.foot)));

  check_finite(out.rec, "rec");
  check_finite(out.hand, "hand");
  check_finite(out.body, "body");
  check_finite(out.foot, "foot");
  check_finite(out.total, "total");
  return out;
}

template <typename T>
LossVars<T> batch_losses(const nn::Binding<T>& p, const Model& m, const nn::Mat<T>& motion, const nn::Mat<T>& music,
                         int frames, const std::vector<int>& timesteps, const nn::Mat<T>& noise,
                         const std::vector<bool>& drop, const LossWeights& w, const LossFlags& flags,
                         const nn::Context& ctx) {
  const auto batch = static_cast<Index>(timesteps.size());
  require(frames > 1 && motion.rows() == batch * frames && music.rows() == motion.rows() &&
              noise.rows() == motion.rows() && noise.cols() == motion.cols() &&
              static_cast<Index>(drop.size()) == batch,
          ErrorKind::ShapeError, "batch arrays disagree in shape");
  const Schedule sched = Schedule::linear(m.config.t_max);
  nn::Mat<T> z(motion.rows(), motion.cols());
  for (Index b = 0; b < batch; ++b) {
    const int t = timesteps[b];
    require(t >= 1 && t <= sched.steps, ErrorKind::ConfigError, "training timestep out of range");
    z.middleRows(b * frames, frames) = T(sched.sqrt_ab(t)) * motion.middleRows(b * frames, frames) +
                                       T(sched.sqrt_one_minus_ab(t)) * noise.middleRows(b * frames, frames);
  }
  const Var<T> music_v = Var<T>::constant(music, frames);
  Var<T> memory;
  const bool any_drop = std::find(drop.begin(), drop.end(), true) != drop.end();
  const bool all_drop = std::find(drop.begin(), drop.end(), false) == drop.end();
  if (all_drop) {
    memory = model::null_condition(p, batch, frames);
  } else {
    memory = model::encode_condition(p, m.config, music_v, ctx);
    if (any_drop) {
      nn::Mat<T> keep(batch * frames, m.config.d_model), dropm(batch * frames, m.config.d_model);
      for (Index b = 0; b < batch; ++b) {
        keep.middleRows(b * frames, frames).setConstant(drop[b] ? T(0) : T(1));
        dropm.middleRows(b * frames, frames).setConstant(drop[b] ? T(1) : T(0));
      }
      memory = nn::add(nn::mul(memory, Var<T>::constant(keep, frames)),
                       nn::mul(model::null_condition(p, batch, frames), Var<T>::constant(dropm, frames)));
    }
  }
  const Var<T> xhat = model::denoise(p, m.config, Var<T>::constant(z, frames), timesteps, memory, ctx);
  return loss_terms(xhat, Var<T>::constant(motion, frames), m, w, flags);
}

// ---- training -------------------------------------------------------------------------

void ema_update(nn::ParamSet<float>& shadow, const nn::ParamSet<float>& params, double decay) {
  for (const auto& [name, value] : params) {
    auto it = shadow.find(name);
    if (it == shadow.end()) {
      shadow.emplace(name, value);
      continue;
    }
    it->second = (static_cast<float>(decay) * it->second.array() +
                  static_cast<float>(1.0 - decay) * value.array()).matrix();
  }
}

namespace {

struct Window {
  std::size_t pair;
  Index start;
};

struct AdamState {
  MatF m, v;
};

}  // namespace

TrainResult train(Model& m, const std::vector<TrainingPair>& data, const TrainConfig& cfg,
                  const StepCallback& on_step, const CheckpointCallback& on_checkpoint) {
  if (data.empty()) fail(ErrorKind::ConfigError, "training dataset is empty");
  require(cfg.batch > 0 && cfg.window > 1 && cfg.window_stride > 0 && cfg.steps >= 0, ErrorKind::ConfigError,
          "invalid training config");
  if (m.motion_stats.dim() != m.config.motion_dim || m.music_stats.dim() != m.config.music_dim) {
    fail(ErrorKind::ConfigError, "model normalization does not match its config");
  }

  std::vector<MatF> motion, music;
  std::vector<Window> windows;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const MatD mm = motion_matrix(data[i].motion, m.skeleton);
    require(data[i].music.rows() == mm.rows(), ErrorKind::ShapeError, "motion and music lengths differ");
    require(data[i].music.cols() == m.config.music_dim, ErrorKind::ShapeError, "music width mismatch");
    motion.push_back(m.motion_stats.standardize(mm).cast<float>());
    music.push_back(m.music_stats.standardize(data[i].music).cast<float>());
    const Index t = mm.rows();
    if (t < cfg.window) continue;
    for (Index s = 0; s + cfg.window <= t; s += cfg.window_stride) windows.push_back({i, s});
    if ((t - cfg.window) % cfg.window_stride != 0) windows.push_back({i, t - cfg.window});
  }
  if (windows.empty()) fail(ErrorKind::ConfigError, "no sequence is as long as the training window");

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, windows.size() - 1);
  std::uniform_int_distribution<int> pick_t(1, m.config.t_max);
  std::bernoulli_distribution drop_dist(cfg.cond_drop);
  std::normal_distribution<float> normal;

  if (m.ema.empty()) m.ema = m.params;
  std::map<std::string, AdamState> adam;
  for (const auto& [name, value] : m.params) {
    adam[name] = {MatF::Zero(value.rows(), value.cols()), MatF::Zero(value.rows(), value.cols())};
  }

  const Index dm = m.config.motion_dim;
  const Index dc = m.config.music_dim;
  const Index rows = static_cast<Index>(cfg.batch) * cfg.window;
  TrainResult result;
  for (int step = 1; step <= cfg.steps; ++step) {
    MatF bm(rows, dm), bc(rows, dc), noise(rows, dm);
    std::vector<int> ts(cfg.batch);
    std::vector<bool> drop(cfg.batch);
    for (int b = 0; b < cfg.batch; ++b) {
      const Window& w = windows[pick(rng)];
      bm.middleRows(static_cast<Index>(b) * cfg.window, cfg.window) = motion[w.pair].middleRows(w.start, cfg.window);
      bc.middleRows(static_cast<Index>(b) * cfg.window, cfg.window) = music[w.pair].middleRows(w.start, cfg.window);
      ts[b] = pick_t(rng);
      drop[b] = drop_dist(rng);
    }
    for (Index i = 0; i < noise.size(); ++i) noise.data()[i] = normal(rng);

    nn::Binding<float> p(m.params, true);
    nn::Context ctx{true, m.config.dropout, &rng};
    const LossVars<float> lv = batch_losses(p, m, bm, bc, cfg.window, ts, noise, drop, cfg.weights, cfg.flags, ctx);
    lv.total.backward();
    nn::ParamSet<float> grads = p.grads();

    double sq = 0;
    for (const auto& [name, g] : grads) sq += static_cast<double>(g.squaredNorm());
    const double gnorm = std::sqrt(sq);
    if (!std::isfinite(gnorm)) fail(ErrorKind::NumericalError, "non-finite gradient at step " + std::to_string(step));
    const float clip = cfg.grad_clip > 0 && gnorm > cfg.grad_clip ? static_cast<float>(cfg.grad_clip / gnorm) : 1.0f;

    const double bc1 = 1.0 - std::pow(cfg.beta1, m.step + 1);
    const double bc2 = 1.0 - std::pow(cfg.beta2, m.step + 1);
    for (auto& [name, value] : m.params) {
      const MatF g = grads.at(name) * clip;
      AdamState& st = adam.at(name);
      st.m = static_cast<float>(cfg.beta1) * st.m + static_cast<float>(1 - cfg.beta1) * g;
      st.v = static_cast<float>(cfg.beta2) * st.v + static_cast<float>(1 - cfg.beta2) * g.cwiseAbs2();
      const auto mhat = st.m.array() / static_cast<float>(bc1);
      const auto vhat = st.v.array() / static_cast<float>(bc2);
      // Decoupled decay on matrices only; vectors (biases, norms, null memory) are not decayed.
      const float wd = value.rows() > 1 ? static_cast<float>(cfg.weight_decay) : 0.0f;
      value.array() -= static_cast<float>(cfg.lr) *
                       (mhat / (vhat.sqrt() + static_cast<float>(cfg.adam_eps)) + wd * value.array());
    }
    ema_update(m.ema, m.params, cfg.ema_decay);
    ++m.step;

    const LossTerms terms{lv.rec.item(), lv.hand.item(), lv.body.item(), lv.foot.item(), lv.total.item()};
    result.history.push_back(terms);
    if (on_step) on_step(step, terms);
    if (on_checkpoint && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) on_checkpoint(m);
  }
  return result;
}

// ---- sampling -------------------------------------------------------------------------

MatF cfg_predict(const nn::Binding<float>& p, const model::DenoiserConfig& cfg, const MatF& z, int frames,
                 const std::vector<int>& timesteps, const MatF& mem_cond, const MatF& mem_null, double w) {
  const Index mframes = mem_cond.rows() / static_cast<Index>(timesteps.size());
  auto run = [&](const MatF& mem) {
    return model::denoise(p, cfg, Var<float>::constant(z, frames), timesteps, Var<float>::constant(mem, mframes))
        .value();
  };
  if (w == 1.0) return run(mem_cond);
  if (w == 0.0) return run(mem_null);
  const MatF xc = run(mem_cond);
  const MatF xn = run(mem_null);
  return xn + static_cast<float>(w) * (xc - xn);
}

std::vector<int> ddim_timesteps(int steps, int t_max) {
  require(steps >= 1 && steps <= t_max, ErrorKind::ConfigError, "DDIM steps must be in [1, t_max]");
  std::vector<int> ts;
  for (int k = steps; k >= 1; --k) {
    ts.push_back(static_cast<int>(std::lround(static_cast<double>(k) * t_max / steps)));
  }
  return ts;
}

namespace {

struct Prepared {
  nn::Binding<float> p;
  MatF mem_cond, mem_null;
  MatF z;
};

Prepared prepare(const Model& m, const std::vector<MatD>& music, int frames, const SamplerConfig& cfg) {
  require(!music.empty(), ErrorKind::ConfigError, "no music to condition on");
  require(frames >= 1, ErrorKind::ConfigError, "frame count must be positive");
  const auto batch = static_cast<Index>(music.size());
  MatF mus(batch * frames, m.config.music_dim);
  for (Index b = 0; b < batch; ++b) {
    const MatD& mu = music[b];
    require(mu.cols() == m.config.music_dim, ErrorKind::ShapeError, "music width mismatch");
    require(mu.rows() >= frames, ErrorKind::ShapeError, "music shorter than requested frames");
    mus.middleRows(b * frames, frames) = m.music_stats.standardize(mu.topRows(frames)).cast<float>();
  }
  Prepared out{nn::Binding<float>(m.inference_params(cfg.use_ema), false), {}, {}, {}};
  if (cfg.guidance != 0.0) {
    out.mem_cond = model::encode_condition(out.p, m.config, Var<float>::constant(mus, frames)).value();
  }
  if (cfg.guidance != 1.0) out.mem_null = model::null_condition(out.p, batch, frames).value();
  out.z.resize(batch * frames, m.config.motion_dim);
  for (Index b = 0; b < batch; ++b) {
    std::mt19937_64 rng(cfg.seed + static_cast<std::uint64_t>(b));
    std::normal_distribution<float> normal;
    auto block = out.z.middleRows(b * frames, frames);
    for (Index r = 0; r < block.rows(); ++r) {
      for (Index c = 0; c < block.cols(); ++c) block(r, c) = normal(rng);
    }
  }
  return out;
}

kin::MotionSequence to_motion(const Model& m, const MatD& raw) {
  const int fd = m.export_dim();
  kin::MotionSequence seq = kin::MotionSequence::from_flat(raw.leftCols(fd), 30.0, m.skeleton.name);
  if (m.contact_dim() > 0) seq.contacts = raw.rightCols(m.contact_dim()).cwiseMax(0.0).cwiseMin(1.0);
  return seq;
}

void check_step(const MatF& z, int step) {
  if (!z.allFinite()) fail(ErrorKind::NumericalError, "non-finite sample at DDIM step " + std::to_string(step));
}

}  // namespace

std::vector<kin::MotionSequence> ddim_sample(const Model& m, const std::vector<MatD>& music, int frames,
                                             const SamplerConfig& cfg, const StepObserver& observer) {
  Prepared pr = prepare(m, music, frames, cfg);
  const Schedule sched = Schedule::linear(m.config.t_max);
  const std::vector<int> ts = ddim_timesteps(cfg.steps, m.config.t_max);
  const auto batch = static_cast<Index>(music.size());
  MatF final;
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const int tn = k + 1 < ts.size() ? ts[k + 1] : 0;
    const MatF xhat = cfg_predict(pr.p, m.config, pr.z, frames, std::vector<int>(batch, t), pr.mem_cond,
                                  pr.mem_null, cfg.guidance);
    check_step(xhat, static_cast<int>(k));
    if (tn == 0) {
      final = xhat;
      if (observer) observer(static_cast<int>(k), 0, final);
      break;
    }
    const MatF eps = (pr.z - static_cast<float>(sched.sqrt_ab(t)) * xhat) / static_cast<float>(sched.sqrt_one_minus_ab(t));
    pr.z = static_cast<float>(sched.sqrt_ab(tn)) * xhat + static_cast<float>(sched.sqrt_one_minus_ab(tn)) * eps;
    check_step(pr.z, static_cast<int>(k));
    if (observer) observer(static_cast<int>(k), tn, pr.z);
  }
  std::vector<kin::MotionSequence> out;
  for (Index b = 0; b < batch; ++b) {
    out.push_back(to_motion(m, m.motion_stats.destandardize(final.middleRows(b * frames, frames).cast<double>())));
  }
  return out;
}

kin::MotionSequence edit_masked(const Model& m, const MatD& music, const EditMask& mask, const SamplerConfig& cfg,
                                const EditObserver& observer) {
  const int fd = m.export_dim();
  const Index frames = mask.mask.rows();
  if (mask.mask.cols() != fd || mask.known.rows() != frames || mask.known.cols() != fd) {
    fail(ErrorKind::ShapeError, "edit mask and known motion must both be T x (3 + 6J)");
  }
  for (Index i = 0; i < mask.mask.size(); ++i) {
    const double v = mask.mask.data()[i];
    require(v == 0.0 || v == 1.0, ErrorKind::ConfigError, "edit mask entries must be 0 or 1");
    if (v == 1.0) require(std::isfinite(mask.known.data()[i]), ErrorKind::NumericalError, "known motion not finite");
  }
  const int dm = m.config.motion_dim;
  MatD known_full = MatD::Zero(frames, dm);
  known_full.leftCols(fd) = (mask.mask.array() > 0.5).select(mask.known.array(), 0.0).matrix();
  const MatF known_std = m.motion_stats.standardize(known_full).cast<float>();
  MatF mfull = MatF::Zero(frames, dm);
  mfull.leftCols(fd) = mask.mask.cast<float>();

  Prepared pr = prepare(m, {music}, static_cast<int>(frames), cfg);
  const Schedule sched = Schedule::linear(m.config.t_max);
  const std::vector<int> ts = ddim_timesteps(cfg.steps, m.config.t_max);
  std::mt19937_64 known_rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);
  std::normal_distribution<float> normal;
  MatF final;
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const int tn = k + 1 < ts.size() ? ts[k + 1] : 0;
    const MatF xhat = cfg_predict(pr.p, m.config, pr.z, static_cast<int>(frames), {t}, pr.mem_cond, pr.mem_null,
                                  cfg.guidance);
    check_step(xhat, static_cast<int>(k));
    if (tn == 0) {
      final = xhat;
      break;
    }
    const MatF eps = (pr.z - static_cast<float>(sched.sqrt_ab(t)) * xhat) / static_cast<float>(sched.sqrt_one_minus_ab(t));
    pr.z = static_cast<float>(sched.sqrt_ab(tn)) * xhat + static_cast<float>(sched.sqrt_one_minus_ab(tn)) * eps;
    MatF noised(frames, dm);
    for (Index i = 0; i < noised.size(); ++i) {
      noised.data()[i] = static_cast<float>(sched.sqrt_ab(tn)) * known_std.data()[i] +
                         static_cast<float>(sched.sqrt_one_minus_ab(tn)) * normal(known_rng);
    }
    for (Index i = 0; i < pr.z.size(); ++i) {
      if (mfull.data()[i] > 0.5f) pr.z.data()[i] = noised.data()[i];
    }
    check_step(pr.z, static_cast<int>(k));
    if (observer) observer(static_cast<int>(k), tn, pr.z, noised);
  }
  MatD raw = m.motion_stats.destandardize(final.cast<double>());
  for (Index r = 0; r < frames; ++r) {
    for (Index c = 0; c < fd; ++c) {
      if (mask.mask(r, c) == 1.0) raw(r, c) = mask.known(r, c);
    }
  }
  return to_motion(m, raw);
}

// ---- masks ------------------------------------------------------------------------------

EditMode edit_mode_from_string(const std::string& s) {
  if (s == "inbetween") return EditMode::Inbetween;
  if (s == "continuation") return EditMode::Continuation;
  if (s == "upper_to_lower") return EditMode::UpperToLower;
  if (s == "body_to_hand_face") return EditMode::BodyToHandFace;
  fail(ErrorKind::ConfigError, "unknown edit mode '" + s + "'");
}

namespace {

void set_joint(MatD& mask, int joint, double v) { mask.middleCols(3 + 6 * joint, 6).setConstant(v); }

// Joints on the path from any foot joint up to (excluding) the root.
std::vector<int> lower_limb_joints(const kin::Skeleton& skel) {
  std::vector<bool> lower(skel.num_joints(), false);
  auto it = skel.groups.find("foot");
  if (it != skel.groups.end()) {
    for (int j : it->second) {
      for (int a = j; a > 0; a = skel.joints[a].parent) lower[a] = true;
    }
  }
  std::vector<int> out;
  for (int j = 0; j < skel.num_joints(); ++j) {
    if (lower[j]) out.push_back(j);
  }
  return out;
}

}  // namespace

MatD build_mode_mask(EditMode mode, int frames, const kin::Skeleton& skel, int span) {
  require(frames >= 1, ErrorKind::ConfigError, "mask needs at least one frame");
  const int fd = skel.frame_dim();
  MatD mask = MatD::Zero(frames, fd);
  const int s = std::clamp(span, 0, frames);
  switch (mode) {
    case EditMode::Inbetween:
      mask.topRows(s).setOnes();
      mask.bottomRows(s).setOnes();
      break;
    case EditMode::Continuation:
      mask.topRows(s).setOnes();
      break;
    case EditMode::UpperToLower:
      mask.setOnes();
      for (int j : lower_limb_joints(skel)) set_joint(mask, j, 0.0);
      break;
    case EditMode::BodyToHandFace:
      mask.setOnes();
      for (const char* g : {"hand", "face"}) {
        auto it = skel.groups.find(g);
        if (it == skel.groups.end()) continue;
        for (int j : it->second) set_joint(mask, j, 0.0);
      }
      break;
  }
  return mask;
}

MatD compile_mask_spec(const std::string& json_text, int frames, const kin::Skeleton& skel) {
  using json = nlohmann::json;
  MatD mask = MatD::Zero(frames, skel.frame_dim());
  try {
    const json doc = json::parse(json_text);
    require(doc.is_array(), ErrorKind::FormatError, "mask spec must be a JSON list");
    for (const auto& e : doc) {
      const auto range = e.at("frames").get<std::vector<int>>();
      require(range.size() == 2 && range[0] >= 0 && range[0] <= range[1] && range[1] <= frames,
              ErrorKind::ConfigError, "mask frames must be [start, end) within the sequence");
      const std::string mode = e.value("mode", std::string("known"));
      require(mode == "known" || mode == "free", ErrorKind::ConfigError, "mask mode must be known or free");
      const double v = mode == "known" ? 1.0 : 0.0;
      std::vector<std::string> parts;
      if (e.at("parts").is_string()) {
        parts.push_back(e.at("parts").get<std::string>());
      } else {
        parts = e.at("parts").get<std::vector<std::string>>();
      }
      auto rows = mask.middleRows(range[0], range[1] - range[0]);
      for (const auto& part : parts) {
        if (part == "all") {
          rows.setConstant(v);
        } else if (part == "root") {
          rows.leftCols(3).setConstant(v);
        } else {
          for (int j : skel.group(part)) rows.middleCols(3 + 6 * j, 6).setConstant(v);
        }
      }
    }
  } catch (const json::exception& ex) {
    fail(ErrorKind::FormatError, std::string("mask spec: ") + ex.what());
  }
  return mask;
}

#define BATON_DIFF_INSTANTIATE(T)                                                                          \
  template LossVars<T> loss_terms(const Var<T>&, const Var<T>&, const Model&, const LossWeights&,          \
                                  const LossFlags&);                                                       \
  template LossVars<T> batch_losses(const nn::Binding<T>&, const Model&, const nn::Mat<T>&,                \
                                    const nn::Mat<T>&, int, const std::vector<int>&, const nn::Mat<T>&,    \
                                    const std::vector<bool>&, const LossWeights&, const LossFlags&,        \
                                    const nn::Context&);

BATON_DIFF_INSTANTIATE(float)
BATON_DIFF_INSTANTIATE(double)

}  // namespace baton::diffusion
