#pragma once

// Kinetic features, Frechet distance, diversity, kinematic beats and beat
// alignment.

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "baton/kinematics.hpp"

namespace baton::metrics {

using MatD = kin::MatD;
using Eigen::VectorXd;

// Per joint of `group`, per axis: mean over frames of squared forward-difference
// velocity. Length 3 * |group|.
VectorXd kinetic_features(const MatD& positions, const kin::Skeleton& skel, const std::string& group);
VectorXd kinetic_features(const kin::MotionSequence& motion, const kin::Skeleton& skel, const std::string& group);

struct Gaussian {
  VectorXd mean;
  MatD cov;
};

constexpr double kShrinkage = 1e-6;

// Sample mean and unbiased covariance; adds kShrinkage * I when there are
// fewer than dim + 1 samples.
Gaussian fit_gaussian(const std::vector<VectorXd>& features);

// Symmetric PSD square root. Eigenvalues in (-1e-8 * scale, 0) are clipped,
// more negative ones raise NumericalError.
MatD psd_sqrt(const MatD& m);

// Tr((Sa Sb)^(1/2)) computed as Tr((Sa^(1/2) Sb Sa^(1/2))^(1/2)).
double trace_sqrt_product(const MatD& sa, const MatD& sb);

double fid_from_stats(const Gaussian& a, const Gaussian& b);
double fid(const std::vector<VectorXd>& a, const std::vector<VectorXd>& b);

// Mean Euclidean distance over unordered pairs.
double div(const std::vector<VectorXd>& features);

// Strict local minima of total joint speed (central differences), accepted
// deepest first with min_separation frames between beats. Binary T-vector.
VectorXd kinematic_beats(const MatD& positions, int min_separation = 7);
VectorXd kinematic_beats(const kin::MotionSequence& motion, const kin::Skeleton& skel, int min_separation = 7);

std::vector<int> beat_frames(const VectorXd& binary);

// Mean over music beats of exp(-d^2 / (2 sigma^2)), d = distance to the nearest
// motion beat. No motion beats gives 0.
double bas(const std::vector<int>& music_beats, const std::vector<int>& motion_beats, double sigma = 3.0);

struct MetricReport {
  double fid_hand = 0, fid_body = 0, fid_face = 0;
  double div_hand = 0, div_body = 0, div_face = 0;
  double bas = 0;
  int generated = 0;
  int reference = 0;

  std::string to_json() const;
};

// FID against reference features per group, DIV of the generated set and mean
// per-sequence BAS against the paired music beats.
MetricReport evaluate(const std::vector<kin::MotionSequence>& generated,
                      const std::vector<kin::MotionSequence>& reference,
                      const std::vector<std::vector<int>>& music_beats, const kin::Skeleton& skel);

// Mean per-frame jerk magnitude of joint positions (third difference), over
// all joints and frames.
double mean_jerk(const kin::MotionSequence& motion, const kin::Skeleton& skel);

}  // namespace baton::metrics
