#include "baton/kinematics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <set>

namespace baton::kin {

using json = nlohmann::json;
using Eigen::Matrix3d;
using Eigen::Vector3d;

// ---- skeleton -----------------------------------------------------------------

const std::vector<int>& Skeleton::group(const std::string& g) const {
  auto it = groups.find(g);
  if (it == groups.end()) fail(ErrorKind::ConfigError, "skeleton '" + name + "' has no group '" + g + "'");
  return it->second;
}

void Skeleton::validate() const {
  const int j = num_joints();
  require(j > 0, ErrorKind::ConfigError, "skeleton has no joints");
  int roots = 0;
  for (int i = 0; i < j; ++i) {
    const int p = joints[i].parent;
    if (p == -1) {
      ++roots;
      require(i == 0, ErrorKind::ConfigError, "root must be joint 0");
    } else {
      require(p >= 0 && p < i, ErrorKind::ConfigError,
              "joint '" + joints[i].name + "' is not topologically sorted");
    }
  }
  require(roots == 1, ErrorKind::ConfigError, "skeleton must have exactly one root");
  for (const auto& [g, idx] : groups) {
    for (int k : idx) require(k >= 0 && k < j, ErrorKind::ConfigError, "group '" + g + "' index out of range");
  }
  std::set<int> covered;
  for (const char* g : {"body", "hand", "face"}) {
    auto it = groups.find(g);
    if (it != groups.end()) covered.insert(it->second.begin(), it->second.end());
  }
  require(static_cast<int>(covered.size()) == j, ErrorKind::ConfigError,
          "body, hand and face groups must cover every joint");
  std::set<int> foot;
  if (auto it = groups.find("foot"); it != groups.end()) foot.insert(it->second.begin(), it->second.end());
  for (int c : contact_joints) {
    require(foot.count(c) != 0, ErrorKind::ConfigError, "contact joints must belong to the foot group");
  }
}

Skeleton Skeleton::from_json(const std::string& text) {
  Skeleton s;
  try {
    const json doc = json::parse(text);
    s.name = doc.value("name", std::string("custom"));
    for (const auto& jj : doc.at("joints")) {
      Joint joint;
      joint.name = jj.at("name").get<std::string>();
      joint.parent = jj.at("parent").get<int>();
      const auto off = jj.at("offset").get<std::vector<double>>();
      require(off.size() == 3, ErrorKind::FormatError, "joint offset must have 3 entries");
      joint.offset = Vector3d(off[0], off[1], off[2]);
      s.joints.push_back(joint);
    }
    for (const auto& [g, idx] : doc.at("groups").items()) s.groups[g] = idx.get<std::vector<int>>();
    if (doc.contains("contact_joints")) s.contact_joints = doc.at("contact_joints").get<std::vector<int>>();
  } catch (const json::exception& e) {
    fail(ErrorKind::FormatError, std::string("skeleton json: ") + e.what());
  }
  s.validate();
  return s;
}

std::string Skeleton::to_json() const {
  json doc;
  doc["name"] = name;
  doc["joints"] = json::array();
  for (const auto& jt : joints) {
    doc["joints"].push_back({{"name", jt.name},
                             {"parent", jt.parent},
                             {"offset", {jt.offset.x(), jt.offset.y(), jt.offset.z()}}});
  }
  doc["groups"] = json::object();
  for (const auto& [g, idx] : groups) doc["groups"][g] = idx;
  doc["contact_joints"] = contact_joints;
  return doc.dump(2);
}

namespace {

void add_joint(Skeleton& s, const std::string& name, int parent, double x, double y, double z) {
  s.joints.push_back({name, parent, Vector3d(x, y, z)});
}

std::vector<int> range(int lo, int hi) {
  std::vector<int> out;
  for (int i = lo; i <= hi; ++i) out.push_back(i);
  return out;
}

}  // namespace

Skeleton toy9() {
  Skeleton s;
  s.name = "toy9";
  add_joint(s, "root", -1, 0, 0, 0);
  add_joint(s, "spine", 0, 0, 0.25, 0);
  add_joint(s, "head", 1, 0, 0.30, 0);
  add_joint(s, "l_shoulder", 1, 0.18, 0.22, 0);
  add_joint(s, "l_elbow", 3, 0.28, 0, 0);
  add_joint(s, "l_wrist", 4, 0.25, 0, 0);
  add_joint(s, "r_shoulder", 1, -0.18, 0.22, 0);
  add_joint(s, "r_elbow", 6, -0.28, 0, 0);
  add_joint(s, "r_wrist", 7, -0.25, 0, 0);
  s.groups["body"] = {0, 1, 2, 3, 6};
  s.groups["hand"] = {4, 5, 7, 8};
  s.groups["face"] = {2};
  s.groups["foot"] = {};
  s.validate();
  return s;
}

Skeleton smplx55() {
  Skeleton s;
  s.name = "smplx55";
  add_joint(s, "pelvis", -1, 0, 0, 0);
  add_joint(s, "left_hip", 0, 0.06, -0.09, 0);
  add_joint(s, "right_hip", 0, -0.06, -0.09, 0);
  add_joint(s, "spine1", 0, 0, 0.11, -0.01);
  add_joint(s, "left_knee", 1, 0.04, -0.38, 0);
  add_joint(s, "right_knee", 2, -0.04, -0.38, 0);
  add_joint(s, "spine2", 3, 0, 0.14, 0.01);
  add_joint(s, "left_ankle", 4, -0.01, -0.40, -0.04);
  add_joint(s, "right_ankle", 5, 0.01, -0.40, -0.04);
  add_joint(s, "spine3", 6, 0, 0.06, 0);
  add_joint(s, "left_foot", 7, 0.02, -0.06, 0.12);
  add_joint(s, "right_foot", 8, -0.02, -0.06, 0.12);
  add_joint(s, "neck", 9, 0, 0.21, -0.03);
  add_joint(s, "left_collar", 9, 0.07, 0.11, -0.02);
  add_joint(s, "right_collar", 9, -0.07, 0.11, -0.02);
  add_joint(s, "head", 12, 0, 0.09, 0.05);
  add_joint(s, "left_shoulder", 13, 0.12, 0.04, -0.01);
  add_joint(s, "right_shoulder", 14, -0.12, 0.04, -0.01);
  add_joint(s, "left_elbow", 16, 0.26, 0, -0.01);
  add_joint(s, "right_elbow", 17, -0.26, 0, -0.01);
  add_joint(s, "left_wrist", 18, 0.25, 0, 0);
  add_joint(s, "right_wrist", 19, -0.25, 0, 0);
  add_joint(s, "jaw", 15, 0, 0.02, 0.01);
  add_joint(s, "left_eye", 15, 0.03, 0.07, 0.09);
  add_joint(s, "right_eye", 15, -0.03, 0.07, 0.09);
  struct Finger {
    const char* name;
    double y, z;
  };
  const Finger fingers[] = {{"index", 0.0, 0.025}, {"middle", 0.0, 0.0}, {"pinky", -0.005, -0.04},
                            {"ring", 0.0, -0.02}, {"thumb", -0.015, 0.03}};
  for (int side = 0; side < 2; ++side) {
    const double sx = side == 0 ? 1.0 : -1.0;
    const int wrist = side == 0 ? 20 : 21;
    const std::string prefix = side == 0 ? "left_" : "right_";
    for (const auto& f : fingers) {
      const bool thumb = std::string(f.name) == "thumb";
      int parent = wrist;
      for (int k = 1; k <= 3; ++k) {
        const int idx = s.num_joints();
        if (k == 1) {
          add_joint(s, prefix + f.name + "1", parent, sx * (thumb ? 0.03 : 0.09), f.y, f.z);
        } else {
          add_joint(s, prefix + f.name + std::to_string(k), parent, sx * 0.03, 0, thumb ? 0.015 : 0);
        }
        parent = idx;
      }
    }
  }
  s.groups["body"] = range(0, 21);
  s.groups["face"] = {22, 23, 24};
  s.groups["hand"] = range(25, 54);
  s.groups["foot"] = {7, 8, 10, 11};
  s.contact_joints = {7, 10, 8, 11};
  s.validate();
  return s;
}

Skeleton builtin_skeleton(const std::string& name) {
  if (name == "toy9") return toy9();
  if (name == "smplx55") return smplx55();
  fail(ErrorKind::ConfigError, "unknown skeleton '" + name + "'");
}

// ---- motion and normalization ---------------------------------------------------

MatD MotionSequence::flat() const {
  MatD out(root.rows(), 3 + rotations.cols());
  out << root, rotations;
  return out;
}

MotionSequence MotionSequence::from_flat(const MatD& flat, double fps, std::string skeleton_name) {
  require(flat.cols() >= 9 && (flat.cols() - 3) % 6 == 0, ErrorKind::ShapeError,
          "flat motion width must be 3 + 6J");
  MotionSequence m;
  m.root = flat.leftCols(3);
  m.rotations = flat.rightCols(flat.cols() - 3);
  m.fps = fps;
  m.skeleton_name = std::move(skeleton_name);
  return m;
}

void MotionSequence::validate() const {
  require(root.cols() == 3, ErrorKind::ShapeError, "root translation must be T x 3");
  require(rotations.rows() == root.rows() && rotations.cols() % 6 == 0 && rotations.cols() > 0,
          ErrorKind::ShapeError, "rotations must be T x 6J");
  if (contacts) require(contacts->rows() == root.rows(), ErrorKind::ShapeError, "contacts must be T x K");
  require(root.allFinite() && rotations.allFinite() && (!contacts || contacts->allFinite()),
          ErrorKind::NumericalError, "motion contains non-finite values");
}

NormStats NormStats::fit(const std::vector<MatD>& data) {
  require(!data.empty(), ErrorKind::ShapeError, "no data to fit normalization");
  const auto d = data.front().cols();
  RowD sum = RowD::Zero(d);
  RowD sq = RowD::Zero(d);
  double n = 0;
  for (const auto& x : data) {
    require(x.cols() == d, ErrorKind::ShapeError, "inconsistent feature width");
    sum += x.colwise().sum();
    n += static_cast<double>(x.rows());
  }
  require(n > 0, ErrorKind::ShapeError, "no rows to fit normalization");
  NormStats s;
  s.mean = sum / n;
  for (const auto& x : data) sq += (x.rowwise() - s.mean).array().square().matrix().colwise().sum();
  s.std = (sq / n).array().sqrt().max(kStdFloor).matrix();
  return s;
}

NormStats NormStats::identity(nn::Index dim) {
  return {RowD::Zero(dim), RowD::Ones(dim)};
}

MatD NormStats::standardize(const MatD& x) const {
  require(x.cols() == dim(), ErrorKind::ShapeError, "standardize: dimension mismatch");
  return ((x.rowwise() - mean).array().rowwise() / std.array()).matrix();
}

MatD NormStats::destandardize(const MatD& x) const {
  require(x.cols() == dim(), ErrorKind::ShapeError, "destandardize: dimension mismatch");
  return ((x.array().rowwise() * std.array()).matrix()).rowwise() + mean;
}

// ---- rotations ---------------------------------------------------------------------

Matrix3d sixd_to_rotmat(const Vec6& r) {
  const Vector3d a1 = r.head<3>();
  const Vector3d a2 = r.tail<3>();
  const double n1 = a1.norm();
  if (!(n1 > 1e-8)) fail(ErrorKind::DegenerateRotation, "first 6D column has near-zero norm");
  const Vector3d b1 = a1 / n1;
  const Vector3d u = a2 - b1.dot(a2) * b1;
  const double n2 = u.norm();
  if (!(n2 > 1e-8)) fail(ErrorKind::DegenerateRotation, "6D columns are parallel");
  const Vector3d b2 = u / n2;
  Matrix3d m;
  m.col(0) = b1;
  m.col(1) = b2;
  m.col(2) = b1.cross(b2);
  return m;
}

Vec6 rotmat_to_sixd(const Matrix3d& r) {
  if (!r.allFinite() || (r.transpose() * r - Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-4) {
    fail(ErrorKind::InvalidRotation, "matrix is not orthonormal");
  }
  if (r.determinant() < 0) fail(ErrorKind::InvalidRotation, "matrix is a reflection");
  Vec6 out;
  out << r.col(0), r.col(1);
  return out;
}

Vec6 identity_sixd() {
  Vec6 v;
  v << 1, 0, 0, 0, 1, 0;
  return v;
}

// ---- forward kinematics ------------------------------------------------------------

MatD forward_kinematics(const Skeleton& skel, const MotionSequence& motion) {
  const int j = skel.num_joints();
  if (motion.joints() != j || motion.rotations.cols() != 6 * j || motion.root.cols() != 3 ||
      motion.root.rows() != motion.rotations.rows()) {
    fail(ErrorKind::ShapeError, "motion has " + std::to_string(motion.joints()) + " joints, skeleton has " +
                                    std::to_string(j));
  }
  const auto t = motion.frames();
  MatD out(t, 3 * j);
  std::vector<Matrix3d> world(j);
  std::vector<Vector3d> pos(j);
  for (nn::Index f = 0; f < t; ++f) {
    for (int i = 0; i < j; ++i) {
      const Vec6 r6 = motion.rotations.block(f, 6 * i, 1, 6).transpose();
      const Matrix3d local = sixd_to_rotmat(r6);
      const int p = skel.joints[i].parent;
      if (p < 0) {
        world[i] = local;
        pos[i] = motion.root.row(f).transpose();
      } else {
        pos[i] = pos[p] + world[p] * skel.joints[i].offset;
        world[i] = world[p] * local;
      }
      out.block(f, 3 * i, 1, 3) = pos[i].transpose();
    }
  }
  return out;
}

RowD part_keep_mask(const Skeleton& skel, const std::string& group) {
  if (group != "hand" && group != "body") fail(ErrorKind::ConfigError, "mask group must be hand or body");
  RowD keep = RowD::Zero(6 * skel.num_joints());
  for (int i : skel.group(group)) keep.segment(6 * i, 6).setOnes();
  return keep;
}

MotionSequence mask_part(const MotionSequence& motion, const Skeleton& skel, const std::string& group) {
  const RowD keep = part_keep_mask(skel, group);
  require(motion.rotations.cols() == keep.size(), ErrorKind::ShapeError, "mask_part: joint count mismatch");
  MotionSequence out = motion;
  const Vec6 id = identity_sixd();
  for (int i = 0; i < skel.num_joints(); ++i) {
    if (keep(6 * i) != 0) continue;
    for (nn::Index f = 0; f < out.frames(); ++f) out.rotations.block(f, 6 * i, 1, 6) = id.transpose();
  }
  if (group == "hand") out.root.setZero();
  return out;
}

MatD velocity(const MatD& positions) {
  if (positions.rows() < 2) fail(ErrorKind::InputTooShort, "velocity needs at least 2 frames");
  const auto t = positions.rows();
  return positions.bottomRows(t - 1) - positions.topRows(t - 1);
}

MatD contact_labels(const MatD& positions, const Skeleton& skel, double speed_thresh, double height_thresh) {
  require(!skel.contact_joints.empty(), ErrorKind::ConfigError, "skeleton has no contact joints");
  require(positions.cols() == 3 * skel.num_joints(), ErrorKind::ShapeError, "contact_labels: width mismatch");
  const auto t = positions.rows();
  const int k = skel.num_contacts();
  MatD out = MatD::Zero(t, k);
  for (nn::Index f = 0; f + 1 < t; ++f) {
    for (int c = 0; c < k; ++c) {
      const int jn = skel.contact_joints[c];
      const double speed = (positions.block(f + 1, 3 * jn, 1, 3) - positions.block(f, 3 * jn, 1, 3)).norm();
      const double height = positions(f, 3 * jn + 1);
      out(f, c) = (speed < speed_thresh && height < height_thresh) ? 1.0 : 0.0;
    }
  }
  if (t >= 2) out.row(t - 1) = out.row(t - 2);
  return out;
}

// ---- differentiable FK ---------------------------------------------------------------

namespace {

constexpr double kNormFloor = 1e-8;

template <typename T>
using V3 = Eigen::Matrix<T, 3, 1>;
template <typename T>
using M3 = Eigen::Matrix<T, 3, 3>;

// Per-joint Gram-Schmidt state kept for the backward pass.
template <typename T>
struct GsState {
  V3<T> a1, a2, b1, b2;
  T n1, n2;
};

template <typename T>
M3<T> gram_schmidt(const V3<T>& a1, const V3<T>& a2, GsState<T>& st) {
  st.a1 = a1;
  st.a2 = a2;
  st.n1 = std::max(a1.norm(), T(kNormFloor));
  st.b1 = a1 / st.n1;
  const V3<T> u = a2 - st.b1.dot(a2) * st.b1;
  st.n2 = std::max(u.norm(), T(kNormFloor));
  st.b2 = u / st.n2;
  M3<T> m;
  m.col(0) = st.b1;
  m.col(1) = st.b2;
  m.col(2) = st.b1.cross(st.b2);
  return m;
}

// Gradient of a loss w.r.t. the 6D input, given the gradient w.r.t. the matrix.
template <typename T>
void gram_schmidt_backward(const GsState<T>& st, const M3<T>& g, V3<T>& da1, V3<T>& da2) {
  const V3<T> g3 = g.col(2);
  const V3<T> big1 = g.col(0) + st.b2.cross(g3);
  const V3<T> big2 = g.col(1) + g3.cross(st.b1);
  const V3<T> du = (big2 - st.b2 * st.b2.dot(big2)) / st.n2;
  da2 = du - st.b1 * st.b1.dot(du);
  const V3<T> g1p = big1 - st.b1.dot(st.a2) * du - st.b1.dot(du) * st.a2;
  da1 = (g1p - st.b1 * st.b1.dot(g1p)) / st.n1;
}

}  // namespace

template <typename T>
nn::Var<T> fk_op(const nn::Var<T>& root, const nn::Var<T>& rot6d, const Skeleton& skel) {
  const int j = skel.num_joints();
  const auto rows = root.rows();
  if (root.cols() != 3 || rot6d.cols() != 6 * j || rot6d.rows() != rows) {
    fail(ErrorKind::ShapeError, "fk_op: expected n x 3 root and n x 6J rotations");
  }
  const bool need = root.requires_grad() || rot6d.requires_grad();
  std::vector<int> parent(j);
  std::vector<V3<T>> offset(j);
  for (int i = 0; i < j; ++i) {
    parent[i] = skel.joints[i].parent;
    offset[i] = skel.joints[i].offset.cast<T>();
  }

  nn::Mat<T> out(rows, 3 * j);
  std::vector<GsState<T>> gs(need ? rows * j : 0);
  std::vector<M3<T>> local_store(need ? rows * j : 0);
  std::vector<M3<T>> world_store(need ? rows * j : 0);
  std::vector<M3<T>> world(j);
  std::vector<V3<T>> pos(j);
  const auto& rv = rot6d.value();
  const auto& tv = root.value();
  for (nn::Index f = 0; f < rows; ++f) {
    for (int i = 0; i < j; ++i) {
      GsState<T> st;
      const V3<T> a1 = rv.block(f, 6 * i, 1, 3).transpose();
      const V3<T> a2 = rv.block(f, 6 * i + 3, 1, 3).transpose();
      const M3<T> local = gram_schmidt<T>(a1, a2, st);
      const int p = parent[i];
      if (p < 0) {
        world[i] = local;
        pos[i] = tv.row(f).transpose();
      } else {
        pos[i] = pos[p] + world[p] * offset[i];
        world[i] = world[p] * local;
      }
      out.block(f, 3 * i, 1, 3) = pos[i].transpose();
      if (need) {
        gs[f * j + i] = st;
        local_store[f * j + i] = local;
        world_store[f * j + i] = world[i];
      }
    }
  }

  return nn::make_op<T>(
      std::move(out), root.seq_len(), {root, rot6d},
      [j, rows, parent = std::move(parent), offset = std::move(offset), gs = std::move(gs),
       local_store = std::move(local_store), world_store = std::move(world_store)](nn::Node<T>& self) {
        auto& rn = *self.parents[0];
        auto& on = *self.parents[1];
        nn::Mat<T> groot = nn::Mat<T>::Zero(rows, 3);
        nn::Mat<T> grot = nn::Mat<T>::Zero(rows, 6 * j);
        std::vector<V3<T>> gpos(j);
        std::vector<M3<T>> gworld(j);
        for (nn::Index f = 0; f < rows; ++f) {
          for (int i = 0; i < j; ++i) {
            gpos[i] = self.grad.block(f, 3 * i, 1, 3).transpose();
            gworld[i].setZero();
          }
          for (int i = j - 1; i >= 0; --i) {
            const int p = parent[i];
            M3<T> glocal;
            if (p < 0) {
              groot.row(f) += gpos[i].transpose();
              glocal = gworld[i];
            } else {
              const M3<T>& wp = world_store[f * j + p];
              gpos[p] += gpos[i];
              gworld[p] += gpos[i] * offset[i].transpose();
              gworld[p] += gworld[i] * local_store[f * j + i].transpose();
              glocal = wp.transpose() * gworld[i];
            }
            V3<T> da1, da2;
            gram_schmidt_backward<T>(gs[f * j + i], glocal, da1, da2);
            grot.block(f, 6 * i, 1, 3) += da1.transpose();
            grot.block(f, 6 * i + 3, 1, 3) += da2.transpose();
          }
        }
        if (rn.requires_grad) rn.grad_buffer() += groot;
        if (on.requires_grad) on.grad_buffer() += grot;
      });
}

template nn::Var<float> fk_op(const nn::Var<float>&, const nn::Var<float>&, const Skeleton&);
template nn::Var<double> fk_op(const nn::Var<double>&, const nn::Var<double>&, const Skeleton&);

}  // namespace baton::kin
