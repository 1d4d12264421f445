#pragma once

// Skeleton model, 6D rotations, forward kinematics, part masking, velocities,
// contact labels and feature standardization.

#include <Eigen/Dense>

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "baton/nn.hpp"

namespace baton::kin {

using MatD = nn::Mat<double>;
using RowD = Eigen::RowVectorXd;
using Vec6 = Eigen::Matrix<double, 6, 1>;

struct Joint {
  std::string name;
  int parent = -1;
  Eigen::Vector3d offset = Eigen::Vector3d::Zero();
};

// Joints are topologically sorted (parent index < own index). Positions use
// a y-up frame in meters.
struct Skeleton {
  std::string name;
  std::vector<Joint> joints;
  std::map<std::string, std::vector<int>> groups;  // body, hand, face, foot
  std::vector<int> contact_joints;

  int num_joints() const { return static_cast<int>(joints.size()); }
  int num_contacts() const { return static_cast<int>(contact_joints.size()); }
  // 3 + 6J, the exported frame width (contacts excluded).
  int frame_dim() const { return 3 + 6 * num_joints(); }
  const std::vector<int>& group(const std::string& name) const;
  void validate() const;

  static Skeleton from_json(const std::string& text);
  std::string to_json() const;
};

Skeleton toy9();
Skeleton smplx55();
// "toy9" or "smplx55"
Skeleton builtin_skeleton(const std::string& name);

struct MotionSequence {
  MatD root;                      // T x 3
  MatD rotations;                 // T x 6J
  std::optional<MatD> contacts;   // T x K in [0, 1]
  double fps = 30.0;
  std::string skeleton_name;

  nn::Index frames() const { return root.rows(); }
  int joints() const { return static_cast<int>(rotations.cols() / 6); }
  // [root | rotations], T x (3 + 6J)
  MatD flat() const;
  static MotionSequence from_flat(const MatD& flat, double fps = 30.0, std::string skeleton_name = {});
  void validate() const;
};

struct NormStats {
  RowD mean;
  RowD std;

  static constexpr double kStdFloor = 1e-6;
  // Column statistics over all rows of all inputs; std floored at kStdFloor.
  static NormStats fit(const std::vector<MatD>& data);
  static NormStats identity(nn::Index dim);
  nn::Index dim() const { return mean.size(); }
  MatD standardize(const MatD& x) const;
  MatD destandardize(const MatD& x) const;
};

// Gram-Schmidt on the two 3-vectors; columns of the result are b1, b2, b1 x b2.
Eigen::Matrix3d sixd_to_rotmat(const Vec6& r);
// First two columns; rejects matrices that are not proper rotations.
Vec6 rotmat_to_sixd(const Eigen::Matrix3d& r);

Vec6 identity_sixd();

// Joint positions, T x 3J (joint-major, xyz).
MatD forward_kinematics(const Skeleton& skel, const MotionSequence& motion);

// Keeps rotations of `group` ("hand" or "body"); other joints get the identity
// rotation. Root translation is zeroed for "hand" and kept for "body".
MotionSequence mask_part(const MotionSequence& motion, const Skeleton& skel, const std::string& group);

// Per-rotation-column keep flags (length 6J) for a part group.
RowD part_keep_mask(const Skeleton& skel, const std::string& group);

// Forward difference over rows: (T-1) x C.
MatD velocity(const MatD& positions);

// 1 where a contact joint moves slower than speed_thresh (units/frame) and sits
// below height_thresh (y); the last frame copies the previous one. T x K.
MatD contact_labels(const MatD& positions, const Skeleton& skel, double speed_thresh,
                    double height_thresh);

// Differentiable FK over a batch of frames: root (n x 3), rot6d (n x 6J) ->
// n x 3J. Near-degenerate 6D inputs are normalized with a small floor instead
// of throwing, so the op is safe inside training.
template <typename T>
nn::Var<T> fk_op(const nn::Var<T>& root, const nn::Var<T>& rot6d, const Skeleton& skel);

}  // namespace baton::kin
