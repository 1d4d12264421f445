#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "baton/kinematics.hpp"
#include "support.hpp"

using namespace baton;
using namespace baton::kin;
using Eigen::Matrix3d;
using Eigen::Vector3d;
using testing::randn;

namespace {

Matrix3d random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  return q.normalized().toRotationMatrix();
}

MotionSequence random_motion(const Skeleton& skel, int frames, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  MotionSequence m;
  m.root = randn(frames, 3, seed + 1);
  m.rotations.resize(frames, 6 * skel.num_joints());
  for (int f = 0; f < frames; ++f)
    for (int j = 0; j < skel.num_joints(); ++j) m.rotations.block(f, 6 * j, 1, 6) = rotmat_to_sixd(random_rotation(rng)).transpose();
  m.skeleton_name = skel.name;
  return m;
}

Matrix3d oracle_rot(const Vec6& r) {
  const Vector3d a1 = r.head<3>(), a2 = r.tail<3>();
  const Vector3d b1 = a1 / a1.norm();
  Vector3d b2 = a2 - a2.dot(b1) * b1;
  b2 /= b2.norm();
  Matrix3d m;
  m << b1, b2, b1.cross(b2);
  return m;
}

// FK of joint j that walks its ancestor chain and applies only rotations of
// joints in `kept`; everything else contributes its rest offset alone.
Vector3d reduced_chain_fk(const Skeleton& skel, const MotionSequence& m, int f, int j, const std::set<int>& kept,
                          const Vector3d& root) {
  std::vector<int> chain;
  for (int k = j; k >= 0; k = skel.joints[k].parent) chain.push_back(k);
  Vector3d p = root;
  Matrix3d r = Matrix3d::Identity();
  for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
    const int k = *it;
    if (skel.joints[k].parent >= 0) p += r * skel.joints[k].offset;
    if (kept.count(k)) r = r * oracle_rot(m.rotations.block(f, 6 * k, 1, 6).transpose());
  }
  return p;
}

Skeleton two_joint() {
  return Skeleton::from_json(R"({"name":"pair","joints":[{"name":"a","parent":-1,"offset":[0,0,0]},
    {"name":"b","parent":0,"offset":[0,1,0]}],"groups":{"body":[0,1],"hand":[],"face":[],"foot":[]},
    "contact_joints":[]})");
}

}  // namespace

TEST_CASE("6D to matrix: identity, hand Gram-Schmidt case, scale invariance") {
  Vec6 r;
  r << 1, 0, 0, 0, 1, 0;
  CHECK((sixd_to_rotmat(r) - Matrix3d::Identity()).norm() == 0.0);
  r << 0, 1, 0, 1, 0, 0;
  Matrix3d expect;
  expect << 0, 1, 0, 1, 0, 0, 0, 0, -1;
  const Matrix3d m = sixd_to_rotmat(r);
  CHECK((m - expect).norm() < 1e-15);
  CHECK(m.determinant() == doctest::Approx(1.0));
  r << 2, 0, 0, 0, 3, 0;
  CHECK((sixd_to_rotmat(r) - Matrix3d::Identity()).norm() < 1e-15);
}

TEST_CASE("6D to matrix: degenerate inputs are rejected") {
  for (Vec6 r : {Vec6(Vec6::Zero()), Vec6((Vec6() << 1, 0, 0, 2, 0, 0).finished())}) {
    try {
      sixd_to_rotmat(r);
      FAIL("expected DegenerateRotation");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::DegenerateRotation);
    }
  }
}

TEST_CASE("6D to matrix: output is a proper rotation for random input") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  for (int i = 0; i < 200; ++i) {
    Vec6 r;
    for (int k = 0; k < 6; ++k) r[k] = n(rng);
    const Matrix3d m = sixd_to_rotmat(r);
    CHECK((m.transpose() * m - Matrix3d::Identity()).norm() < 1e-12);
    CHECK(std::abs(m.determinant() - 1.0) < 1e-12);
    CHECK((m - oracle_rot(r)).norm() < 1e-12);
  }
}

TEST_CASE("matrix to 6D: identity, random round trip, reflection rejected") {
  Vec6 id;
  id << 1, 0, 0, 0, 1, 0;
  CHECK(rotmat_to_sixd(Matrix3d::Identity()) == id);
  CHECK(identity_sixd() == id);
  std::mt19937_64 rng(4);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const Matrix3d r = random_rotation(rng);
    worst = std::max(worst, (sixd_to_rotmat(rotmat_to_sixd(r)) - r).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 1e-6);
  Matrix3d refl = Matrix3d::Identity();
  refl(2, 2) = -1;
  Matrix3d skew = Matrix3d::Identity();
  skew(0, 1) = 0.3;
  for (const Matrix3d& bad : {refl, skew}) {
    try {
      rotmat_to_sixd(bad);
      FAIL("expected InvalidRotation");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::InvalidRotation);
    }
  }
}

TEST_CASE("FK: two-joint chain hand cases") {
  const Skeleton s = two_joint();
  MotionSequence m;
  m.root = MatD::Zero(1, 3);
  m.rotations = MatD(1, 12);
  m.rotations << 1, 0, 0, 0, 1, 0, 1, 0, 0, 0, 1, 0;
  MatD p = forward_kinematics(s, m);
  CHECK(p(0, 3) == 0.0);
  CHECK(p(0, 4) == 1.0);
  CHECK(p(0, 5) == 0.0);
  Matrix3d rz;
  rz << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  m.rotations.block(0, 0, 1, 6) = rotmat_to_sixd(rz).transpose();
  p = forward_kinematics(s, m);
  CHECK(std::abs(p(0, 3) + 1.0) < 1e-15);
  CHECK(std::abs(p(0, 4)) < 1e-15);
  m.root << 1, 2, 3;
  m.rotations.block(0, 0, 1, 6) = identity_sixd().transpose();
  p = forward_kinematics(s, m);
  CHECK(p(0, 0) == 1.0);
  CHECK(p(0, 1) == 2.0);
  CHECK(p(0, 4) == 3.0);
}

TEST_CASE("FK: translation and root-rotation equivariance on smplx55") {
  const Skeleton s = smplx55();
  MotionSequence m = random_motion(s, 8, 5);
  const MatD p = forward_kinematics(s, m);
  MotionSequence shifted = m;
  const Vector3d c(0.3, -1.2, 4.0);
  shifted.root.rowwise() += c.transpose();
  const MatD ps = forward_kinematics(s, shifted);
  double worst_t = 0, worst_r = 0;
  for (int j = 0; j < s.num_joints(); ++j) worst_t = std::max(worst_t, (ps.middleCols(3 * j, 3).rowwise() - c.transpose() - p.middleCols(3 * j, 3)).cwiseAbs().maxCoeff());
  std::mt19937_64 rng(6);
  const Matrix3d g = random_rotation(rng);
  MotionSequence rotated = m;
  for (int f = 0; f < 8; ++f) {
    const Matrix3d r0 = sixd_to_rotmat(m.rotations.block(f, 0, 1, 6).transpose());
    rotated.rotations.block(f, 0, 1, 6) = rotmat_to_sixd(g * r0).transpose();
  }
  const MatD pr = forward_kinematics(s, rotated);
  for (int f = 0; f < 8; ++f) {
    const Vector3d tau = m.root.row(f).transpose();
    for (int j = 0; j < s.num_joints(); ++j) {
      const Vector3d expect = tau + g * (p.block(f, 3 * j, 1, 3).transpose() - tau);
      worst_r = std::max(worst_r, (pr.block(f, 3 * j, 1, 3).transpose() - expect).cwiseAbs().maxCoeff());
    }
  }
  CHECK(worst_t < 1e-6);
  CHECK(worst_r < 1e-6);
}

TEST_CASE("FK: joint-count mismatch is a shape error") {
  MotionSequence m = random_motion(toy9(), 2, 7);
  try {
    forward_kinematics(smplx55(), m);
    FAIL("expected ShapeError");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ShapeError);
  }
}

TEST_CASE("mask_part: idempotent, identity-preserving, unknown group rejected") {
  const Skeleton s = smplx55();
  const MotionSequence m = random_motion(s, 4, 8);
  for (const char* g : {"hand", "body"}) {
    const MotionSequence once = mask_part(m, s, g);
    const MotionSequence twice = mask_part(once, s, g);
    CHECK(once.rotations == twice.rotations);
    CHECK(once.root == twice.root);
    MotionSequence ident = m;
    ident.root.setZero();
    for (int j = 0; j < s.num_joints(); ++j) ident.rotations.middleCols(6 * j, 6).rowwise() = identity_sixd().transpose();
    CHECK(mask_part(ident, s, g).rotations == ident.rotations);
  }
  CHECK(mask_part(m, s, "hand").root.isZero(0));
  CHECK(mask_part(m, s, "body").root == m.root);
  try {
    mask_part(m, s, "tail");
    FAIL("expected ConfigError");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ConfigError);
  }
}

TEST_CASE("mask_part: kept joints bit-identical and hand/body reconstruct the rotation set") {
  const Skeleton s = smplx55();
  const MotionSequence m = random_motion(s, 3, 9);
  const MotionSequence h = mask_part(m, s, "hand"), b = mask_part(m, s, "body");
  const std::set<int> hand(s.group("hand").begin(), s.group("hand").end());
  const std::set<int> body(s.group("body").begin(), s.group("body").end());
  for (int j = 0; j < s.num_joints(); ++j) {
    if (hand.count(j)) CHECK(h.rotations.middleCols(6 * j, 6) == m.rotations.middleCols(6 * j, 6));
    if (body.count(j)) CHECK(b.rotations.middleCols(6 * j, 6) == m.rotations.middleCols(6 * j, 6));
  }
  const RowD keep = part_keep_mask(s, "hand");
  CHECK(keep.size() == 6 * s.num_joints());
  for (int j = 0; j < s.num_joints(); ++j) CHECK(keep[6 * j] == (hand.count(j) ? 1.0 : 0.0));
}

TEST_CASE("mask_part: FK of the masked motion matches the reduced-chain oracle") {
  for (const Skeleton& s : {smplx55(), toy9()}) {
    const MotionSequence m = random_motion(s, 5, 10);
    for (const char* g : {"hand", "body"}) {
      const std::set<int> kept(s.group(g).begin(), s.group(g).end());
      const MatD p = forward_kinematics(s, mask_part(m, s, g));
      double worst = 0;
      for (int f = 0; f < 5; ++f) {
        const Vector3d root = std::string(g) == "hand" ? Vector3d::Zero() : Vector3d(m.root.row(f).transpose());
        for (int j : kept)
          worst = std::max(worst, (p.block(f, 3 * j, 1, 3).transpose() - reduced_chain_fk(s, m, f, j, kept, root)).cwiseAbs().maxCoeff());
      }
      CHECK(worst < 1e-9);
    }
  }
}

TEST_CASE("velocity: static, drift, elementwise oracle, too short") {
  CHECK(velocity(MatD::Constant(5, 6, 2.0)).isZero(0));
  MatD drift(4, 3);
  for (int f = 0; f < 4; ++f) drift.row(f) << 0.5 * f, -0.25 * f, 1.0;
  const MatD v = velocity(drift);
  CHECK(v.rows() == 3);
  for (int f = 0; f < 3; ++f) CHECK((v.row(f) - Eigen::RowVector3d(0.5, -0.25, 0)).norm() == 0.0);
  const MatD r = randn(7, 9, 11);
  const MatD vr = velocity(r);
  for (int f = 0; f < 6; ++f)
    for (int c = 0; c < 9; ++c) CHECK(vr(f, c) == r(f + 1, c) - r(f, c));
  try {
    velocity(MatD::Zero(1, 3));
    FAIL("expected InputTooShort");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::InputTooShort);
  }
}

TEST_CASE("contact labels: grounded, fast, and a thresholded step pattern") {
  const Skeleton s = smplx55();
  REQUIRE(s.num_contacts() == 4);
  const int j = s.num_joints();
  MatD still = MatD::Zero(6, 3 * j);
  CHECK((contact_labels(still, s, 0.005, 0.05).array() == 1.0).all());
  MatD fast = still;
  for (int f = 0; f < 6; ++f) fast.row(f).setConstant(0.1 * f);
  for (int f = 0; f < 6; ++f)
    for (int k = 0; k < j; ++k) fast(f, 3 * k + 1) = 0.0;
  CHECK(contact_labels(fast, s, 0.005, 0.05).isZero(0));

  // Contact 0 alternates planted / swinging every 3 frames; contact 1 is lifted.
  const int t = 12;
  MatD walk = MatD::Zero(t, 3 * j);
  const int c0 = s.contact_joints[0], c1 = s.contact_joints[1];
  double x = 0;
  for (int f = 0; f < t; ++f) {
    walk(f, 3 * c0) = x;
    if ((f / 3) % 2 == 1) x += 0.02;
    walk(f, 3 * c1 + 1) = 0.2;
  }
  const MatD lab = contact_labels(walk, s, 0.005, 0.05);
  for (int f = 0; f < t; ++f) {
    const int g = std::min(f, t - 2);
    const double speed = std::abs(walk(g + 1, 3 * c0) - walk(g, 3 * c0));
    CHECK(lab(f, 0) == (speed < 0.005 ? 1.0 : 0.0));
    CHECK(lab(f, 1) == 0.0);
  }
}

TEST_CASE("normalization: mean maps to zero, round trip, constant column") {
  const MatD data = randn(50, 5, 12, 3.0);
  MatD with_const = data;
  with_const.col(2).setConstant(7.0);
  const NormStats st = NormStats::fit({with_const});
  CHECK(st.std[2] == NormStats::kStdFloor);
  const MatD z = st.standardize(with_const);
  CHECK(z.col(2).isZero(0));
  CHECK(z.allFinite());
  CHECK(testing::max_abs(st.destandardize(z), with_const) < 1e-6);
  MatD mean_row(1, 5);
  mean_row.row(0) = st.mean;
  CHECK(st.standardize(mean_row).isZero(1e-15));
  try {
    st.standardize(MatD::Zero(2, 4));
    FAIL("expected ShapeError");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ShapeError);
  }
}

TEST_CASE("skeletons: built-in sizes, groups, JSON round trip, shipped files") {
  const Skeleton toy = toy9(), full = smplx55();
  CHECK(toy.frame_dim() == 57);
  CHECK(full.frame_dim() == 333);
  CHECK(full.num_contacts() == 4);
  toy.validate();
  full.validate();
  for (const Skeleton& s : {toy, full}) {
    const Skeleton back = Skeleton::from_json(s.to_json());
    CHECK(back.to_json() == s.to_json());
    CHECK(builtin_skeleton(s.name).to_json() == s.to_json());
  }
  CHECK_THROWS_AS(builtin_skeleton("nope"), Error);
  CHECK_THROWS_AS(Skeleton::from_json(R"({"name":"x","joints":[{"name":"a","parent":1,"offset":[0,0,0]},
      {"name":"b","parent":-1,"offset":[0,0,0]}],"groups":{"body":[0,1]},"contact_joints":[]})"),
                  Error);
}

TEST_CASE("differentiable FK agrees with the reference FK and passes grad_check") {
  const Skeleton s = toy9();
  const MotionSequence m = random_motion(s, 4, 13);
  auto p = fk_op(nn::Var<double>::constant(m.root), nn::Var<double>::constant(m.rotations), s);
  CHECK(testing::max_abs(p.value(), forward_kinematics(s, m)) < 1e-12);
  nn::ParamSet<double> params{{"root", m.root}, {"rot", m.rotations + randn(4, 54, 14, 0.1)}};
  const MatD w = randn(4, 27, 15);
  const double err = nn::grad_check(
      [&](const nn::Binding<double>& b) {
        return nn::sum(nn::mul(fk_op(b("root"), b("rot"), s), nn::Var<double>::constant(w)));
      },
      params, 25);
  CHECK(err < 1e-4);
}

TEST_CASE("motion sequence: flat layout round trip") {
  const MotionSequence m = random_motion(toy9(), 3, 16);
  const MatD flat = m.flat();
  CHECK(flat.cols() == 57);
  const MotionSequence back = MotionSequence::from_flat(flat, 30.0, "toy9");
  CHECK(back.root == m.root);
  CHECK(back.rotations == m.rotations);
}

TEST_CASE("skeletons: shipped JSON files match the built-in definitions") {
  for (const char* name : {"toy9", "smplx55"}) {
    std::ifstream in(std::string(BATON_DATA_DIR) + "/skeletons/" + name + ".json");
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    CHECK(Skeleton::from_json(ss.str()).to_json() == builtin_skeleton(name).to_json());
  }
}
