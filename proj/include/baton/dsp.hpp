#pragma once

// Music conditioning features at 30 frames per second:
// [mfcc 0..19 | chroma 20..31 | peak 32 | beat 33 | envelope 34].

#include <Eigen/Dense>

#include <complex>
#include <optional>
#include <vector>

namespace baton::dsp {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMat = Eigen::Matrix<std::complex<double>, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Eigen::VectorXd;

constexpr int kFeatureDim = 35;
constexpr int kMfccCol = 0;
constexpr int kChromaCol = 20;
constexpr int kPeakCol = 32;
constexpr int kBeatCol = 33;
constexpr int kEnvelopeCol = 34;
constexpr double kLogFloor = 1e-10;

struct AudioClip {
  std::vector<double> samples;  // mono, [-1, 1]
  int sample_rate = 24000;

  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

struct Spectrogram {
  CMat bins;  // frames x (frame_len / 2 + 1)
  int sample_rate = 0;
  int frame_len = 0;
  int hop = 0;

  Eigen::Index frames() const { return bins.rows(); }
};

struct DspConfig {
  int sample_rate = 24000;  // analysis rate used when the input rate is not a multiple of fps
  int fps = 30;
  int n_mels = 40;
  int n_mfcc = 20;
  double peak_threshold = 0.3;  // fraction of envelope max
  int peak_min_separation = 7;  // frames
};

// Hann-windowed frames centered on t * hop (signal extended by point
// reflection about the edge samples); floor(len / hop) frames. Requires len >= frame_len.
Spectrogram stft(const AudioClip& clip, int frame_len, int hop);

// HTK mel filterbank on the power spectrum, natural log with floor
// kLogFloor, orthonormal DCT-II.
MatD mfcc(const Spectrogram& spec, int n_mels = 40, int n_mfcc = 20);

// Power folded onto the nearest pitch class (C = 0, A = 9 with A4 = 440 Hz),
// per-frame L2 normalized; silent frames stay zero.
MatD chroma(const Spectrogram& spec);

// Positive spectral flux of log1p(|X|); first frame 0; scaled to max 1.
VectorXd onset_envelope(const Spectrogram& spec);

// Strict local maxima >= threshold * max, accepted greedily by height while
// keeping min_separation frames between accepted peaks.
VectorXd detect_peaks(const VectorXd& envelope, int min_separation, double threshold);

struct BeatTrack {
  VectorXd beats;              // binary per frame
  std::optional<double> bpm;   // absent for silence
};

// Autocorrelation tempo over 40-200 BPM with a log-normal preference around
// 120 BPM, then dynamic-programming beat placement.
BeatTrack track_beats(const VectorXd& envelope, double fps);

struct MusicFeatures {
  MatD frames;  // T x 35
  double fps = 30.0;
  bool resampled = false;  // input rate was not a multiple of fps
  std::optional<double> bpm;
};

AudioClip resample_linear(const AudioClip& clip, int target_rate);

MusicFeatures extract_music_features(const AudioClip& clip, const DspConfig& cfg = {});

}  // namespace baton::dsp
