#include "baton/dsp.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "baton/error.hpp"

namespace baton::dsp {

namespace {

// Point reflection about the edge samples; i stays within one frame of the
// signal because len >= frame_len.
double padded_sample(const std::vector<double>& x, long long i) {
  const auto n = static_cast<long long>(x.size());
  if (i < 0) return 2.0 * x.front() - x[static_cast<std::size_t>(-i)];
  if (i >= n) return 2.0 * x.back() - x[static_cast<std::size_t>(2 * (n - 1) - i)];
  return x[static_cast<std::size_t>(i)];
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MatD power(const Spectrogram& spec) { return spec.bins.cwiseAbs2(); }

void check_finite(const Spectrogram& spec) {
  require(spec.bins.allFinite(), ErrorKind::InvalidAudio, "spectrogram contains non-finite values");
  require(spec.sample_rate > 0 && spec.frame_len > 0, ErrorKind::ConfigError, "spectrogram metadata missing");
}

struct FftPlan {
  int n;
  double* in;
  fftw_complex* out;
  fftw_plan plan;

  explicit FftPlan(int size) : n(size) {
    in = fftw_alloc_real(n);
    out = fftw_alloc_complex(n / 2 + 1);
    plan = fftw_plan_dft_r2c_1d(n, in, out, FFTW_ESTIMATE);
  }
  ~FftPlan() {
    fftw_destroy_plan(plan);
    fftw_free(in);
    fftw_free(out);
  }
  FftPlan(const FftPlan&) = delete;
  FftPlan& operator=(const FftPlan&) = delete;
};

}  // namespace

Spectrogram stft(const AudioClip& clip, int frame_len, int hop) {
  require(frame_len > 0 && (frame_len & (frame_len - 1)) == 0, ErrorKind::ConfigError,
          "frame_len must be a power of two");
  require(hop > 0 && hop <= frame_len, ErrorKind::ConfigError, "hop must be in (0, frame_len]");
  require(clip.sample_rate > 0, ErrorKind::InvalidAudio, "sample rate must be positive");
  const auto len = static_cast<long long>(clip.samples.size());
  if (len < frame_len) fail(ErrorKind::InputTooShort, "audio shorter than one analysis frame");
  for (double s : clip.samples) {
    if (!std::isfinite(s)) fail(ErrorKind::InvalidAudio, "audio contains non-finite samples");
  }

  const long long frames = len / hop;
  const int nbins = frame_len / 2 + 1;
  std::vector<double> window(frame_len);
  for (int i = 0; i < frame_len; ++i) window[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / frame_len);

  Spectrogram spec;
  spec.sample_rate = clip.sample_rate;
  spec.frame_len = frame_len;
  spec.hop = hop;
  spec.bins.resize(frames, nbins);
  FftPlan fft(frame_len);
  const long long half = frame_len / 2;
  for (long long f = 0; f < frames; ++f) {
    const long long start = f * hop - half;
    for (int i = 0; i < frame_len; ++i) fft.in[i] = window[i] * padded_sample(clip.samples, start + i);
    fftw_execute(fft.plan);
    for (int k = 0; k < nbins; ++k) spec.bins(f, k) = {fft.out[k][0], fft.out[k][1]};
  }
  return spec;
}

MatD mfcc(const Spectrogram& spec, int n_mels, int n_mfcc) {
  if (n_mfcc > n_mels) fail(ErrorKind::ConfigError, "n_mfcc must not exceed n_mels");
  require(n_mels > 0 && n_mfcc > 0, ErrorKind::ConfigError, "mel and mfcc counts must be positive");
  check_finite(spec);
  const int nbins = spec.frame_len / 2 + 1;
  const double nyquist = spec.sample_rate / 2.0;

  std::vector<double> edges(n_mels + 2);
  const double mel_hi = hz_to_mel(nyquist);
  for (int m = 0; m < n_mels + 2; ++m) edges[m] = mel_to_hz(mel_hi * m / (n_mels + 1));
  MatD fb = MatD::Zero(nbins, n_mels);
  for (int k = 0; k < nbins; ++k) {
    const double f = static_cast<double>(k) * spec.sample_rate / spec.frame_len;
    for (int m = 0; m < n_mels; ++m) {
      const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
      if (f > lo && f < hi) fb(k, m) = f <= mid ? (f - lo) / (mid - lo) : (hi - f) / (hi - mid);
    }
  }

  MatD dct(n_mels, n_mfcc);
  for (int m = 0; m < n_mels; ++m) {
    for (int c = 0; c < n_mfcc; ++c) {
      const double s = c == 0 ? std::sqrt(1.0 / n_mels) : std::sqrt(2.0 / n_mels);
      dct(m, c) = s * std::cos(M_PI * c * (m + 0.5) / n_mels);
    }
  }
  const MatD logmel = (power(spec) * fb).array().max(kLogFloor).log().matrix();
  return logmel * dct;
}

MatD chroma(const Spectrogram& spec) {
  check_finite(spec);
  const int nbins = spec.frame_len / 2 + 1;
  MatD fold = MatD::Zero(nbins, 12);
  for (int k = 1; k < nbins; ++k) {
    const double f = static_cast<double>(k) * spec.sample_rate / spec.frame_len;
    const double midi = 69.0 + 12.0 * std::log2(f / 440.0);
    const long long cls = ((std::llround(midi) % 12) + 12) % 12;
    fold(k, static_cast<int>(cls)) = 1.0;
  }
  MatD out = power(spec) * fold;
  for (Eigen::Index t = 0; t < out.rows(); ++t) {
    const double norm = out.row(t).norm();
    if (norm > kLogFloor) {
      out.row(t) /= norm;
    } else {
      out.row(t).setZero();
    }
  }
  return out;
}

VectorXd onset_envelope(const Spectrogram& spec) {
  check_finite(spec);
  const MatD logmag = spec.bins.cwiseAbs().array().log1p().matrix();
  VectorXd env = VectorXd::Zero(spec.frames());
  for (Eigen::Index t = 1; t < spec.frames(); ++t) {
    env(t) = (logmag.row(t) - logmag.row(t - 1)).array().max(0.0).sum();
  }
  const double mx = env.size() > 0 ? env.maxCoeff() : 0.0;
  if (mx > 0) env /= mx;
  return env;
}

VectorXd detect_peaks(const VectorXd& envelope, int min_separation, double threshold) {
  const auto n = envelope.size();
  VectorXd out = VectorXd::Zero(n);
  if (n == 0) return out;
  const double mx = envelope.maxCoeff();
  if (!(mx > 0)) return out;
  std::vector<Eigen::Index> cand;
  for (Eigen::Index t = 0; t < n; ++t) {
    const double v = envelope(t);
    const bool left = t == 0 || v > envelope(t - 1);
    const bool right = t == n - 1 || v > envelope(t + 1);
    if (left && right && v >= threshold * mx) cand.push_back(t);
  }
  std::stable_sort(cand.begin(), cand.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return envelope(a) > envelope(b); });
  std::vector<Eigen::Index> kept;
  for (auto t : cand) {
    bool ok = true;
    for (auto k : kept) ok = ok && std::llabs(static_cast<long long>(t - k)) >= min_separation;
    if (ok) kept.push_back(t);
  }
  for (auto t : kept) out(t) = 1.0;
  return out;
}

BeatTrack track_beats(const VectorXd& envelope, double fps) {
  require(fps > 0, ErrorKind::ConfigError, "fps must be positive");
  const auto n = envelope.size();
  if (n < static_cast<Eigen::Index>(std::ceil(2.0 * fps))) {
    fail(ErrorKind::InputTooShort, "beat tracking needs at least 2 s of frames");
  }
  BeatTrack out{VectorXd::Zero(n), std::nullopt};
  if (!(envelope.maxCoeff() > 0)) return out;

  // Tempo: prior-weighted autocorrelation over lags covering 40..200 BPM.
  const int lag_lo = std::max(1, static_cast<int>(std::ceil(60.0 * fps / 200.0)));
  const int lag_hi = std::min(static_cast<int>(n) - 1, static_cast<int>(std::floor(60.0 * fps / 40.0)));
  require(lag_hi > lag_lo, ErrorKind::InputTooShort, "envelope too short for tempo estimation");
  const double lag_pref = 60.0 * fps / 120.0;
  std::vector<double> score(lag_hi + 2, 0.0);
  for (int lag = lag_lo - 1; lag <= lag_hi + 1; ++lag) {
    if (lag < 1 || lag >= n) continue;
    const double r = envelope.head(n - lag).dot(envelope.tail(n - lag)) / static_cast<double>(n - lag);
    const double octave = std::log2(lag / lag_pref);
    score[lag] = r * std::exp(-0.5 * octave * octave);
  }
  int best = lag_lo;
  for (int lag = lag_lo; lag <= lag_hi; ++lag) {
    if (score[lag] > score[best]) best = lag;
  }
  if (!(score[best] > 0)) return out;
  double period = best;
  if (best > 1 && best + 1 < static_cast<int>(score.size())) {
    const double l = score[best - 1], c = score[best], r = score[best + 1];
    const double denom = l - 2 * c + r;
    if (denom < 0) period = best + std::clamp(0.5 * (l - r) / denom, -0.5, 0.5);
  }
  out.bpm = 60.0 * fps / period;

  // Dynamic programming over onset strength with a log-interval penalty.
  constexpr double kTightness = 100.0;
  std::vector<double> cum(n, 0.0);
  std::vector<Eigen::Index> back(n, -1);
  const auto lo_off = static_cast<Eigen::Index>(std::round(period / 2));
  const auto hi_off = static_cast<Eigen::Index>(std::round(2 * period));
  for (Eigen::Index t = 0; t < n; ++t) {
    double best_prev = 0.0;
    Eigen::Index arg = -1;
    for (Eigen::Index prev = t - hi_off; prev <= t - lo_off; ++prev) {
      if (prev < 0) continue;
      const double dev = std::log(static_cast<double>(t - prev) / period);
      const double s = cum[prev] - kTightness * dev * dev;
      if (s > best_prev) {
        best_prev = s;
        arg = prev;
      }
    }
    cum[t] = envelope(t) + best_prev;
    back[t] = arg;
  }
  Eigen::Index last = std::max<Eigen::Index>(0, n - static_cast<Eigen::Index>(std::round(period)));
  for (Eigen::Index t = last; t < n; ++t) {
    if (cum[t] > cum[last]) last = t;
  }
  std::vector<Eigen::Index> beats;
  for (Eigen::Index t = last; t >= 0; t = back[t]) beats.push_back(t);
  std::reverse(beats.begin(), beats.end());

  // Trim weak beats at the edges.
  double ms = 0;
  for (auto b : beats) ms += envelope(b) * envelope(b);
  const double thresh = 0.5 * std::sqrt(ms / static_cast<double>(beats.size()));
  std::size_t first = 0, end = beats.size();
  while (first < end && envelope(beats[first]) < thresh) ++first;
  while (end > first && envelope(beats[end - 1]) < thresh) --end;
  for (std::size_t i = first; i < end; ++i) out.beats(beats[i]) = 1.0;
  return out;
}

AudioClip resample_linear(const AudioClip& clip, int target_rate) {
  require(clip.sample_rate > 0 && target_rate > 0, ErrorKind::InvalidAudio, "sample rates must be positive");
  AudioClip out;
  out.sample_rate = target_rate;
  if (clip.samples.empty()) return out;
  const double ratio = static_cast<double>(clip.sample_rate) / target_rate;
  const auto n = static_cast<std::size_t>(
      std::floor(static_cast<double>(clip.samples.size()) * target_rate / clip.sample_rate));
  out.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double pos = static_cast<double>(i) * ratio;
    const auto i0 = static_cast<std::size_t>(pos);
    const std::size_t i1 = std::min(i0 + 1, clip.samples.size() - 1);
    const double frac = pos - static_cast<double>(i0);
    out.samples[i] = (1.0 - frac) * clip.samples[i0] + frac * clip.samples[i1];
  }
  return out;
}

MusicFeatures extract_music_features(const AudioClip& clip, const DspConfig& cfg) {
  require(cfg.n_mfcc == 20, ErrorKind::ConfigError, "feature layout requires 20 MFCCs");
  MusicFeatures feats;
  feats.fps = cfg.fps;
  const AudioClip* src = &clip;
  AudioClip resampled;
  if (clip.sample_rate % cfg.fps != 0) {
    resampled = resample_linear(clip, cfg.sample_rate);
    src = &resampled;
    feats.resampled = true;
  }
  const int hop = src->sample_rate / cfg.fps;
  int frame_len = 1;
  while (frame_len < 2 * hop) frame_len *= 2;

  const Spectrogram spec = stft(*src, frame_len, hop);
  const auto t = spec.frames();
  const VectorXd env = onset_envelope(spec);
  const BeatTrack beats = track_beats(env, cfg.fps);
  feats.bpm = beats.bpm;
  feats.frames.resize(t, kFeatureDim);
  feats.frames.middleCols(kMfccCol, 20) = mfcc(spec, cfg.n_mels, cfg.n_mfcc);
  feats.frames.middleCols(kChromaCol, 12) = chroma(spec);
  feats.frames.col(kPeakCol) = detect_peaks(env, cfg.peak_min_separation, cfg.peak_threshold);
  feats.frames.col(kBeatCol) = beats.beats;
  feats.frames.col(kEnvelopeCol) = env;
  return feats;
}

}  // namespace baton::dsp
