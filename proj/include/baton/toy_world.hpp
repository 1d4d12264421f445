#pragma once

// Synthetic conducting corpus: metronome click tracks paired with toy9
// conducting motions whose hand-speed minima fall exactly on the beats.

#include <cstdint>
#include <vector>

#include "baton/dsp.hpp"
#include "baton/kinematics.hpp"

namespace baton::toy {

struct ToySpec {
  int bpm = 120;        // 60, 90 or 120
  int meter = 4;        // 2, 3 or 4
  double duration_s = 12.0;
  double amplitude = 1.0;
  double noise = 0.0;   // waypoint jitter, relative to the pattern size
  int phase = 6;        // frame of the first beat, >= 1
  std::uint64_t seed = 0;

  void validate() const;
  int frames() const;            // round(duration * 30)
  int period() const;            // frames per beat
  std::vector<int> beats() const;  // beat frames in [0, frames)
};

// 1 kHz bursts, 30 ms, exponentially decaying, at every beat; downbeats twice
// as loud. 24 kHz mono, exactly frames() * 800 samples.
dsp::AudioClip make_click_track(const ToySpec& spec);

// Conducting motion on the toy9 skeleton at 30 fps.
kin::MotionSequence make_conducting_motion(const ToySpec& spec);

// World-space right and left wrist targets used to build the motion (T x 3 each).
struct HandTargets {
  kin::MatD right, left;
};
HandTargets conducting_targets(const ToySpec& spec);

struct ToyItem {
  ToySpec spec;
  dsp::AudioClip audio;
  kin::MotionSequence motion;
  dsp::MatD features;  // T x 35
  std::vector<int> beats;
};

struct ToyCorpus {
  std::vector<ToyItem> train;
  std::vector<ToyItem> test;
};

// Random spec per item, deterministic in (seed, index).
ToySpec random_spec(std::uint64_t seed, int index, double min_duration = 10.0, double max_duration = 14.0);

ToyItem make_item(const ToySpec& spec);

ToyCorpus make_corpus(int n_train, int n_test, std::uint64_t seed);

}  // namespace baton::toy
