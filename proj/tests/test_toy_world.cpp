#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "baton/error.hpp"
#include "baton/io.hpp"
#include "baton/metrics.hpp"
#include "baton/toy_world.hpp"

using namespace baton;
using namespace baton::toy;
namespace fs = std::filesystem;

namespace {

// Sample indices where the signal becomes loud after at least `gap` quiet samples.
std::vector<std::size_t> burst_onsets(const std::vector<double>& x, double thresh = 1e-3, std::size_t gap = 2400) {
  std::vector<std::size_t> out;
  std::size_t quiet = gap;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::abs(x[i]) > thresh) {
      if (quiet >= gap) out.push_back(i);
      quiet = 0;
    } else {
      ++quiet;
    }
  }
  return out;
}

bool near_any(int f, const std::vector<int>& set, int tol = 1) {
  return std::any_of(set.begin(), set.end(), [&](int s) { return std::abs(s - f) <= tol; });
}

double covered_fraction(const std::vector<int>& targets, const std::vector<int>& found) {
  int hit = 0;
  for (int b : targets) hit += near_any(b, found) ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(targets.size());
}

ToySpec spec(int bpm, int meter, double seconds = 12.0) {
  ToySpec s;
  s.bpm = bpm;
  s.meter = meter;
  s.duration_s = seconds;
  return s;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("baton_toy_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("spec: validation, frame grid, beat frames") {
  ToySpec s = spec(120, 4, 4.0);
  CHECK(s.frames() == 120);
  CHECK(s.period() == 15);
  CHECK(s.beats() == std::vector<int>({6, 21, 36, 51, 66, 81, 96, 111}));
  for (auto bad : {spec(100, 4), spec(120, 5), spec(120, 4, 3.0)}) CHECK_THROWS_AS(bad.validate(), Error);
  s.phase = 0;
  CHECK_THROWS_AS(s.validate(), Error);
}

TEST_CASE("click track: burst count, placement, downbeat accent, exact length") {
  const ToySpec s = spec(120, 4, 4.0);
  const dsp::AudioClip c = make_click_track(s);
  CHECK(c.sample_rate == 24000);
  CHECK(c.samples.size() == static_cast<std::size_t>(s.frames()) * 800);
  const auto onsets = burst_onsets(c.samples);
  REQUIRE(onsets.size() == s.beats().size());
  std::size_t first_two_seconds = 0;
  for (std::size_t i = 0; i < onsets.size(); ++i) {
    CHECK(std::abs(static_cast<long>(onsets[i]) - 800L * s.beats()[i]) <= 2);
    if (onsets[i] < 48000) ++first_two_seconds;
  }
  CHECK(first_two_seconds == 4);
  auto peak = [&](std::size_t i) {
    double m = 0;
    for (std::size_t k = onsets[i]; k < onsets[i] + 720; ++k) m = std::max(m, std::abs(c.samples[k]));
    return m;
  };
  CHECK(peak(0) == doctest::Approx(2.0 * peak(1)).epsilon(0.02));
  CHECK(peak(4) == doctest::Approx(peak(0)).epsilon(1e-9));
}

TEST_CASE("click track: feature pipeline recovers the beats, envelope is quiet between clicks") {
  for (auto [bpm, meter] : {std::pair{60, 3}, std::pair{90, 2}, std::pair{120, 4}}) {
    CAPTURE(bpm);
    const ToySpec s = spec(bpm, meter);
    const auto f = dsp::extract_music_features(make_click_track(s));
    REQUIRE(f.frames.rows() == s.frames());
    const auto tracked = metrics::beat_frames(f.frames.col(dsp::kBeatCol));
    REQUIRE_FALSE(tracked.empty());
    for (int b : tracked) CHECK(near_any(b, s.beats()));
    CHECK(covered_fraction(s.beats(), tracked) >= 0.95);
    for (int b : s.beats()) {
      const int mid = b + s.period() / 2;
      if (mid < s.frames()) CHECK(f.frames(mid, dsp::kEnvelopeCol) < 0.05);
    }
  }
}

TEST_CASE("conducting motion: speed minima on the beats, high beat alignment") {
  for (auto [bpm, meter] : {std::pair{60, 2}, std::pair{90, 3}, std::pair{120, 4}}) {
    CAPTURE(bpm);
    const ToySpec s = spec(bpm, meter);
    const kin::Skeleton skel = kin::toy9();
    const kin::MotionSequence m = make_conducting_motion(s);
    CHECK(m.frames() == s.frames());
    CHECK(m.skeleton_name == "toy9");
    const auto kb = metrics::beat_frames(metrics::kinematic_beats(m, skel));
    for (int b : kb) CHECK(near_any(b, s.beats()));
    CHECK(covered_fraction(s.beats(), kb) >= 0.95);
    CHECK(metrics::bas(s.beats(), kb) >= 0.95);
  }
}

TEST_CASE("conducting motion: valid rotations, wrist follows its targets") {
  const ToySpec s = spec(90, 4);
  const kin::Skeleton skel = kin::toy9();
  const kin::MotionSequence m = make_conducting_motion(s);
  for (kin::MatD::Index f = 0; f < m.frames(); f += 7) {
    for (int j = 0; j < skel.num_joints(); ++j) {
      const Eigen::Matrix3d r = kin::sixd_to_rotmat(m.rotations.block(f, 6 * j, 1, 6).transpose());
      CHECK((r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-9);
      CHECK(r.determinant() == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
  const HandTargets tg = conducting_targets(s);
  const kin::MatD pos = kin::forward_kinematics(skel, m);
  const auto& hand = skel.group("hand");
  double best = 1e9;
  for (int j : hand) best = std::min(best, (pos.middleCols(3 * j, 3) - tg.right).rowwise().norm().maxCoeff());
  CHECK(best < 1e-6);
}

TEST_CASE("conducting motion: zero amplitude is static") {
  ToySpec s = spec(120, 3);
  s.amplitude = 0.0;
  const kin::Skeleton skel = kin::toy9();
  const kin::MotionSequence m = make_conducting_motion(s);
  for (const char* g : {"hand", "body", "face"}) CHECK(metrics::kinetic_features(m, skel, g).maxCoeff() < 1e-20);
}

TEST_CASE("conducting motion: noise keeps beats close and is seeded") {
  ToySpec s = spec(90, 4);
  s.noise = 0.1;
  s.seed = 5;
  const kin::MotionSequence a = make_conducting_motion(s), b = make_conducting_motion(s);
  CHECK(a.flat() == b.flat());
  s.seed = 6;
  CHECK(make_conducting_motion(s).flat() != a.flat());
  const auto kb = metrics::beat_frames(metrics::kinematic_beats(a, kin::toy9()));
  CHECK(metrics::bas(s.beats(), kb) >= 0.8);
}

TEST_CASE("random specs: deterministic, in range, distinct across indices") {
  for (int i = 0; i < 20; ++i) {
    const ToySpec s = random_spec(7, i);
    CHECK_NOTHROW(s.validate());
    CHECK(s.duration_s >= 10.0);
    CHECK(s.duration_s <= 14.0);
    CHECK(random_spec(7, i).seed == s.seed);
  }
  CHECK(random_spec(7, 0).seed != random_spec(7, 1).seed);
  CHECK(random_spec(7, 0).seed != random_spec(8, 0).seed);
}

TEST_CASE("corpus on disk: 32 + 8 pairs, identical manifests per seed") {
  const ToyCorpus c = make_corpus(32, 8, 11);
  CHECK(c.train.size() == 32);
  CHECK(c.test.size() == 8);
  const fs::path a = scratch("a"), b = scratch("b");
  io::write_corpus(a, c, 11, false);
  io::write_corpus(b, make_corpus(32, 8, 11), 11, false);
  CHECK(io::read_file(a / "manifest.json") == io::read_file(b / "manifest.json"));
  int fseq = 0, mosq = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    fseq += e.path().extension() == ".fseq" ? 1 : 0;
    mosq += e.path().extension() == ".mosq" ? 1 : 0;
  }
  CHECK(fseq == 40);
  CHECK(mosq == 40);
  const io::Corpus back = io::read_corpus(a);
  CHECK(back.items.size() == 40);
  CHECK(back.split("test").size() == 8);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("corpus: ground-truth pairs align better than time-shuffled motion") {
  const ToyCorpus c = make_corpus(6, 0, 13);
  const kin::Skeleton skel = kin::toy9();
  std::mt19937_64 rng(3);
  double gt = 0, shuffled = 0;
  for (const ToyItem& it : c.train) {
    gt += metrics::bas(it.beats, metrics::beat_frames(metrics::kinematic_beats(it.motion, skel)));
    std::vector<int> order(static_cast<std::size_t>(it.motion.frames()));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    kin::MatD flat = it.motion.flat(), perm(flat.rows(), flat.cols());
    for (std::size_t i = 0; i < order.size(); ++i) perm.row(static_cast<Eigen::Index>(i)) = flat.row(order[i]);
    shuffled += metrics::bas(it.beats,
                             metrics::beat_frames(metrics::kinematic_beats(kin::MotionSequence::from_flat(perm), skel)));
  }
  gt /= 6;
  shuffled /= 6;
  CHECK(gt > 0.9);
  CHECK(gt > shuffled + 0.2);
}
