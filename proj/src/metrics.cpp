#include "baton/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

namespace baton::metrics {

using Eigen::Index;

VectorXd kinetic_features(const MatD& positions, const kin::Skeleton& skel, const std::string& group) {
  if (positions.rows() < 2) fail(ErrorKind::InputTooShort, "kinetic features need at least 2 frames");
  require(positions.cols() == 3 * skel.num_joints(), ErrorKind::ShapeError, "positions width mismatch");
  const auto& joints = skel.group(group);
  const MatD vel = kin::velocity(positions);
  VectorXd out(3 * joints.size());
  for (std::size_t i = 0; i < joints.size(); ++i) {
    for (int a = 0; a < 3; ++a) out(3 * i + a) = vel.col(3 * joints[i] + a).squaredNorm() / vel.rows();
  }
  return out;
}

VectorXd kinetic_features(const kin::MotionSequence& motion, const kin::Skeleton& skel, const std::string& group) {
  return kinetic_features(kin::forward_kinematics(skel, motion), skel, group);
}

Gaussian fit_gaussian(const std::vector<VectorXd>& features) {
  require(!features.empty(), ErrorKind::ConfigError, "no features to fit");
  const Index d = features.front().size();
  const auto n = static_cast<Index>(features.size());
  Gaussian g;
  g.mean = VectorXd::Zero(d);
  for (const auto& f : features) {
    require(f.size() == d, ErrorKind::ShapeError, "feature dimensions differ");
    g.mean += f;
  }
  g.mean /= static_cast<double>(n);
  g.cov = MatD::Zero(d, d);
  for (const auto& f : features) {
    const VectorXd c = f - g.mean;
    g.cov += c * c.transpose();
  }
  if (n > 1) g.cov /= static_cast<double>(n - 1);
  if (n < d + 1) g.cov.diagonal().array() += kShrinkage;
  return g;
}

MatD psd_sqrt(const MatD& m) {
  require(m.rows() == m.cols(), ErrorKind::ShapeError, "psd_sqrt needs a square matrix");
  const MatD sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) fail(ErrorKind::NumericalError, "eigendecomposition failed");
  VectorXd ev = es.eigenvalues();
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  for (Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < -1e-8 * scale) fail(ErrorKind::NumericalError, "matrix is not positive semi-definite");
    ev(i) = std::sqrt(std::max(ev(i), 0.0));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

double trace_sqrt_product(const MatD& sa, const MatD& sb) {
  require(sa.rows() == sb.rows() && sa.cols() == sb.cols(), ErrorKind::ShapeError, "covariance shapes differ");
  const MatD ra = psd_sqrt(sa);
  return psd_sqrt(ra * sb * ra).trace();
}

double fid_from_stats(const Gaussian& a, const Gaussian& b) {
  require(a.mean.size() == b.mean.size(), ErrorKind::ShapeError, "feature dimensions differ");
  const double mean_term = (a.mean - b.mean).squaredNorm();
  const double cov_term = a.cov.trace() + b.cov.trace() - 2.0 * trace_sqrt_product(a.cov, b.cov);
  return std::max(0.0, mean_term + cov_term);
}

double fid(const std::vector<VectorXd>& a, const std::vector<VectorXd>& b) {
  return fid_from_stats(fit_gaussian(a), fit_gaussian(b));
}

double div(const std::vector<VectorXd>& features) {
  if (features.size() < 2) fail(ErrorKind::ConfigError, "diversity needs at least two samples");
  double total = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < features.size(); ++i) {
    for (std::size_t j = i + 1; j < features.size(); ++j) {
      total += (features[i] - features[j]).norm();
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

VectorXd kinematic_beats(const MatD& positions, int min_separation) {
  const Index t = positions.rows();
  if (t < 3) fail(ErrorKind::InputTooShort, "kinematic beats need at least 3 frames");
  const Index joints = positions.cols() / 3;
  VectorXd speed = VectorXd::Zero(t);
  for (Index f = 0; f < t; ++f) {
    const Index hi = std::min(f + 1, t - 1);
    const Index lo = std::max<Index>(f - 1, 0);
    const double span = static_cast<double>(hi - lo);
    for (Index j = 0; j < joints; ++j) {
      speed(f) += (positions.block(hi, 3 * j, 1, 3) - positions.block(lo, 3 * j, 1, 3)).norm() / span;
    }
  }
  // Relative tolerance keeps rounding ripples on constant speed from counting as minima.
  const double tol = 1e-9 * std::max(1e-12, speed.cwiseAbs().maxCoeff());
  std::vector<Index> cand;
  for (Index f = 1; f + 1 < t; ++f) {
    if (speed(f) < speed(f - 1) - tol && speed(f) < speed(f + 1) - tol) cand.push_back(f);
  }
  std::stable_sort(cand.begin(), cand.end(), [&](Index a, Index b) { return speed(a) < speed(b); });
  std::vector<Index> kept;
  for (Index f : cand) {
    bool ok = true;
    for (Index k : kept) ok = ok && std::abs(f - k) >= min_separation;
    if (ok) kept.push_back(f);
  }
  VectorXd out = VectorXd::Zero(t);
  for (Index f : kept) out(f) = 1.0;
  return out;
}

VectorXd kinematic_beats(const kin::MotionSequence& motion, const kin::Skeleton& skel, int min_separation) {
  return kinematic_beats(kin::forward_kinematics(skel, motion), min_separation);
}

std::vector<int> beat_frames(const VectorXd& binary) {
  std::vector<int> out;
  for (Index i = 0; i < binary.size(); ++i) {
    if (binary(i) > 0.5) out.push_back(static_cast<int>(i));
  }
  return out;
}

double bas(const std::vector<int>& music_beats, const std::vector<int>& motion_beats, double sigma) {
  if (music_beats.empty()) fail(ErrorKind::ConfigError, "BAS needs at least one music beat");
  require(sigma > 0, ErrorKind::ConfigError, "BAS sigma must be positive");
  if (motion_beats.empty()) return 0.0;
  double total = 0;
  for (int tm : music_beats) {
    double best = std::numeric_limits<double>::infinity();
    for (int td : motion_beats) best = std::min(best, std::abs(static_cast<double>(td - tm)));
    total += std::exp(-best * best / (2.0 * sigma * sigma));
  }
  return total / static_cast<double>(music_beats.size());
}

std::string MetricReport::to_json() const {
  nlohmann::json j = {{"fid_hand", fid_hand}, {"fid_body", fid_body}, {"fid_face", fid_face},
                      {"div_hand", div_hand}, {"div_body", div_body}, {"div_face", div_face},
                      {"bas", bas},           {"generated", generated}, {"reference", reference}};
  return j.dump(2);
}

MetricReport evaluate(const std::vector<kin::MotionSequence>& generated,
                      const std::vector<kin::MotionSequence>& reference,
                      const std::vector<std::vector<int>>& music_beats, const kin::Skeleton& skel) {
  require(!generated.empty() && !reference.empty(), ErrorKind::ConfigError, "evaluation needs both sets");
  require(music_beats.size() == generated.size(), ErrorKind::ConfigError, "one beat list per generated sequence");
  MetricReport r;
  r.generated = static_cast<int>(generated.size());
  r.reference = static_cast<int>(reference.size());
  std::vector<MatD> gen_pos, ref_pos;
  for (const auto& m : generated) gen_pos.push_back(kin::forward_kinematics(skel, m));
  for (const auto& m : reference) ref_pos.push_back(kin::forward_kinematics(skel, m));
  struct Slot {
    const char* group;
    double* fid;
    double* div;
  };
  for (const Slot& s : {Slot{"hand", &r.fid_hand, &r.div_hand}, Slot{"body", &r.fid_body, &r.div_body},
                        Slot{"face", &r.fid_face, &r.div_face}}) {
    std::vector<VectorXd> g, ref;
    for (const auto& p : gen_pos) g.push_back(kinetic_features(p, skel, s.group));
    for (const auto& p : ref_pos) ref.push_back(kinetic_features(p, skel, s.group));
    *s.fid = fid(g, ref);
    *s.div = g.size() >= 2 ? div(g) : 0.0;
  }
  double total = 0;
  for (std::size_t i = 0; i < generated.size(); ++i) {
    total += bas(music_beats[i], beat_frames(kinematic_beats(gen_pos[i])));
  }
  r.bas = total / static_cast<double>(generated.size());
  return r;
}

double mean_jerk(const kin::MotionSequence& motion, const kin::Skeleton& skel) {
  const MatD pos = kin::forward_kinematics(skel, motion);
  const Index t = pos.rows();
  if (t < 4) fail(ErrorKind::InputTooShort, "jerk needs at least 4 frames");
  const Index joints = pos.cols() / 3;
  double total = 0;
  for (Index f = 0; f + 3 < t; ++f) {
    const MatD j3 = pos.row(f + 3) - 3 * pos.row(f + 2) + 3 * pos.row(f + 1) - pos.row(f);
    for (Index j = 0; j < joints; ++j) total += j3.block(0, 3 * j, 1, 3).norm();
  }
  return total / static_cast<double>((t - 3) * joints);
}

}  // namespace baton::metrics
