#include "baton/toy_world.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace baton::toy {

using Eigen::Matrix3d;
using Eigen::Vector3d;

namespace {

constexpr int kFps = 30;
constexpr int kRate = 24000;
constexpr int kHop = kRate / kFps;
constexpr double kPatternSize = 0.12;  // meters
constexpr double kRootHeight = 0.9;

double ease(double s) { return 0.5 * (1.0 - std::cos(M_PI * s)); }

// Wrist positions at each ictus, relative to the conducting center, for a
// right hand (x toward the body is +x).
std::vector<Vector3d> ictus_points(int meter) {
  switch (meter) {
    case 2:
      return {{0.0, -1.0, 0.1}, {-0.3, 0.2, -0.1}};
    case 3:
      return {{0.0, -1.0, 0.1}, {-0.8, -0.5, -0.1}, {0.2, 0.0, 0.0}};
    default:
      return {{0.0, -1.0, 0.1}, {0.7, -0.6, -0.1}, {-0.9, -0.6, 0.1}, {0.0, -0.3, -0.1}};
  }
}

Matrix3d rot_z(double a) {
  Matrix3d r;
  r << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
  return r;
}

Matrix3d frame(const Vector3d& d, const Vector3d& n) {
  Matrix3d f;
  f.col(0) = d;
  f.col(1) = n;
  f.col(2) = d.cross(n);
  return f;
}

struct ArmPose {
  Matrix3d upper_world, fore_world;
};

// Analytic two-bone reach from shoulder s to target w with the elbow bent
// toward `pole`. rest_dir is the arm direction in the rest pose.
ArmPose two_bone(const Vector3d& s, const Vector3d& w, double l1, double l2, const Vector3d& pole,
                 const Vector3d& rest_dir) {
  Vector3d to = w - s;
  double d = to.norm();
  const Vector3d u = d > 1e-12 ? Vector3d(to / d) : Vector3d(rest_dir);
  d = std::clamp(d, std::abs(l1 - l2) + 1e-6, l1 + l2 - 1e-6);
  Vector3d v = pole - pole.dot(u) * u;
  v.normalize();
  const double cos_a = std::clamp((l1 * l1 + d * d - l2 * l2) / (2 * l1 * d), -1.0, 1.0);
  const double alpha = std::acos(cos_a);
  const Vector3d elbow = s + l1 * (std::cos(alpha) * u + std::sin(alpha) * v);
  const Vector3d wrist = s + d * u;
  const Vector3d n = u.cross(v).normalized();
  const Vector3d up_dir = (elbow - s).normalized();
  const Vector3d fore_dir = (wrist - elbow).normalized();
  const Vector3d n0(0, 0, 1);
  const Matrix3d rest = frame(rest_dir, n0);
  return {frame(up_dir, n) * rest.transpose(), frame(fore_dir, n) * rest.transpose()};
}

void put(kin::MatD& rot, Eigen::Index f, int joint, const Matrix3d& r) {
  rot.block(f, 6 * joint, 1, 6) = kin::rotmat_to_sixd(r).transpose();
}

// Per-beat schedule shared by targets and motion.
struct Timeline {
  std::vector<double> sway, lean;       // per beat index (offset by kFirst)
  std::vector<Vector3d> jitter_r, jitter_l;
  int first = 0;  // beat index of slot 0

  Timeline(const ToySpec& spec) {
    const int t = spec.frames();
    const int p = spec.period();
    first = -((spec.phase + p - 1) / p) - 1;
    const int last = (t - spec.phase) / p + 2;
    std::mt19937_64 rng(spec.seed * 0x9E3779B97F4A7C15ULL + 17);
    std::normal_distribution<double> normal;
    const double js = spec.noise * kPatternSize * spec.amplitude;
    for (int k = first; k <= last; ++k) {
      const double sign = (k % 2 == 0) ? 1.0 : -1.0;
      sway.push_back(0.015 * spec.amplitude * sign);
      lean.push_back(0.05 * spec.amplitude * sign);
      jitter_r.emplace_back(js * normal(rng), js * normal(rng), js * normal(rng));
      jitter_l.emplace_back(js * normal(rng), js * normal(rng), js * normal(rng));
    }
  }
};

// Beat index k (floor) and eased fraction for frame f.
std::pair<int, double> beat_phase(const ToySpec& spec, int f) {
  const int p = spec.period();
  const int rel = f - spec.phase;
  const int k = rel >= 0 ? rel / p : -((-rel + p - 1) / p);
  return {k, ease(static_cast<double>(rel - k * p) / p)};
}

int pos_mod(int a, int m) { return ((a % m) + m) % m; }

}  // namespace

void ToySpec::validate() const {
  require(bpm == 60 || bpm == 90 || bpm == 120, ErrorKind::ConfigError, "toy bpm must be 60, 90 or 120");
  require(meter >= 2 && meter <= 4, ErrorKind::ConfigError, "toy meter must be 2, 3 or 4");
  require(duration_s >= 4.0, ErrorKind::ConfigError, "toy duration must be at least 4 s");
  require(amplitude >= 0 && noise >= 0, ErrorKind::ConfigError, "toy amplitude and noise must be non-negative");
  require(phase >= 1 && phase < frames(), ErrorKind::ConfigError, "toy phase out of range");
}

int ToySpec::frames() const { return static_cast<int>(std::lround(duration_s * kFps)); }
int ToySpec::period() const { return 60 * kFps / bpm; }

std::vector<int> ToySpec::beats() const {
  std::vector<int> out;
  for (int f = phase; f < frames(); f += period()) out.push_back(f);
  return out;
}

dsp::AudioClip make_click_track(const ToySpec& spec) {
  spec.validate();
  dsp::AudioClip clip;
  clip.sample_rate = kRate;
  clip.samples.assign(static_cast<std::size_t>(spec.frames()) * kHop, 0.0);
  const int burst = kRate * 30 / 1000;
  const std::vector<int> beats = spec.beats();
  for (std::size_t i = 0; i < beats.size(); ++i) {
    const double amp = (i % static_cast<std::size_t>(spec.meter) == 0) ? 0.8 : 0.4;
    const std::size_t start = static_cast<std::size_t>(beats[i]) * kHop;
    for (int n = 0; n < burst && start + n < clip.samples.size(); ++n) {
      const double tt = static_cast<double>(n) / kRate;
      clip.samples[start + n] += amp * std::sin(2.0 * M_PI * 1000.0 * tt) * std::exp(-tt / 0.006);
    }
  }
  return clip;
}

HandTargets conducting_targets(const ToySpec& spec) {
  spec.validate();
  const Timeline tl(spec);
  const std::vector<Vector3d> pts = ictus_points(spec.meter);
  const int t = spec.frames();
  const double a = kPatternSize * spec.amplitude;
  const Vector3d center_r(-0.22, 1.20 - kRootHeight, 0.33);
  HandTargets out{kin::MatD(t, 3), kin::MatD(t, 3)};
  for (int f = 0; f < t; ++f) {
    const auto [k, e] = beat_phase(spec, f);
    const int i0 = k - tl.first, i1 = i0 + 1;
    const Vector3d w0 = pts[pos_mod(k, spec.meter)], w1 = pts[pos_mod(k + 1, spec.meter)];
    const Vector3d off = (1 - e) * (a * w0 + tl.jitter_r[i0]) + e * (a * w1 + tl.jitter_r[i1]);
    const Vector3d offl = (1 - e) * (0.4 * a * w0 + tl.jitter_l[i0]) + e * (0.4 * a * w1 + tl.jitter_l[i1]);
    const double sway = (1 - e) * tl.sway[i0] + e * tl.sway[i1];
    const Vector3d root(sway, kRootHeight, 0.0);
    // The right hand's inward direction is +x; the left hand mirrors it.
    out.right.row(f) = (root + center_r + off).transpose();
    const Vector3d center_l(-center_r.x(), center_r.y(), center_r.z());
    out.left.row(f) = (root + center_l + Vector3d(-offl.x(), offl.y(), offl.z())).transpose();
  }
  return out;
}

kin::MotionSequence make_conducting_motion(const ToySpec& spec) {
  spec.validate();
  const kin::Skeleton skel = kin::toy9();
  const Timeline tl(spec);
  const HandTargets targets = conducting_targets(spec);
  const int t = spec.frames();
  kin::MotionSequence m;
  m.fps = kFps;
  m.skeleton_name = skel.name;
  m.root.resize(t, 3);
  m.rotations.resize(t, 6 * skel.num_joints());
  const double l1 = skel.joints[4].offset.norm();
  const double l2 = skel.joints[5].offset.norm();
  for (int f = 0; f < t; ++f) {
    const auto [k, e] = beat_phase(spec, f);
    const int i0 = k - tl.first, i1 = i0 + 1;
    const double sway = (1 - e) * tl.sway[i0] + e * tl.sway[i1];
    const double lean = (1 - e) * tl.lean[i0] + e * tl.lean[i1];
    const Vector3d root(sway, kRootHeight, 0.0);
    m.root.row(f) = root.transpose();
    const Matrix3d spine = rot_z(lean);
    const Vector3d spine_pos = root + skel.joints[1].offset;
    put(m.rotations, f, 0, Matrix3d::Identity());
    put(m.rotations, f, 1, spine);
    put(m.rotations, f, 2, Matrix3d::Identity());
    struct Side {
      int shoulder, elbow, wrist;
      Vector3d target, pole, rest;
    };
    const Side sides[] = {
        {3, 4, 5, targets.left.row(f).transpose(), Vector3d(0.3, -1.0, -0.3), Vector3d(1, 0, 0)},
        {6, 7, 8, targets.right.row(f).transpose(), Vector3d(-0.3, -1.0, -0.3), Vector3d(-1, 0, 0)}};
    for (const Side& s : sides) {
      const Vector3d shoulder_pos = spine_pos + spine * skel.joints[s.shoulder].offset;
      const ArmPose pose = two_bone(shoulder_pos, s.target, l1, l2, s.pole, s.rest);
      put(m.rotations, f, s.shoulder, spine.transpose() * pose.upper_world);
      put(m.rotations, f, s.elbow, pose.upper_world.transpose() * pose.fore_world);
      put(m.rotations, f, s.wrist, Matrix3d::Identity());
    }
  }
  m.validate();
  return m;
}

ToySpec random_spec(std::uint64_t seed, int index, double min_duration, double max_duration) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), 0x70795u};
  std::mt19937_64 rng(seq);
  const int bpms[] = {60, 90, 120};
  ToySpec s;
  s.bpm = bpms[std::uniform_int_distribution<int>(0, 2)(rng)];
  s.meter = std::uniform_int_distribution<int>(2, 4)(rng);
  s.duration_s = std::round(std::uniform_real_distribution<double>(min_duration, max_duration)(rng) * kFps) / kFps;
  s.amplitude = std::uniform_real_distribution<double>(0.8, 1.2)(rng);
  s.noise = 0.1;
  s.phase = std::uniform_int_distribution<int>(3, 2 + s.period())(rng);
  s.seed = rng();
  return s;
}

ToyItem make_item(const ToySpec& spec) {
  ToyItem item;
  item.spec = spec;
  item.audio = make_click_track(spec);
  item.motion = make_conducting_motion(spec);
  item.features = dsp::extract_music_features(item.audio).frames;
  item.beats = spec.beats();
  return item;
}

ToyCorpus make_corpus(int n_train, int n_test, std::uint64_t seed) {
  require(n_train >= 1 && n_test >= 0, ErrorKind::ConfigError, "corpus sizes must be positive");
  ToyCorpus c;
  for (int i = 0; i < n_train; ++i) c.train.push_back(make_item(random_spec(seed, i)));
  for (int i = 0; i < n_test; ++i) c.test.push_back(make_item(random_spec(seed, n_train + i)));
  return c;
}

}  // namespace baton::toy
