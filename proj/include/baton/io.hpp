#pragma once

// File formats and filesystem boundary. All binary formats are little-endian
// regardless of host:
//
//   MoSeq       "MOSQ1" | u32 header length | JSON header | f32 T x D [| f32 T x K]
//   FeatSeq     "FSEQ1" | u32 header length | JSON header | f32 T x 35
//   Checkpoint  "CKPT1" | u64 header length | JSON manifest | tensor payload
//
// Checkpoint tensors are listed in the manifest as {name, dtype, shape, offset}
// with offsets relative to the payload start. Model parameters keep their
// names, the EMA shadow lives under "ema/", normalization statistics are f64
// tensors under "norm/".

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "baton/diffusion.hpp"
#include "baton/dsp.hpp"
#include "baton/kinematics.hpp"
#include "baton/toy_world.hpp"

namespace baton::io {

namespace fs = std::filesystem;
using MatD = kin::MatD;

std::string read_file(const fs::path& path);
void write_file(const fs::path& path, const std::string& bytes);

// FNV-1a 64-bit.
std::uint64_t fnv1a(const std::string& bytes);

// ---- MoSeq ------------------------------------------------------------------

std::string encode_moseq(const kin::MotionSequence& m);
kin::MotionSequence decode_moseq(const std::string& bytes);
void save_moseq(const fs::path& path, const kin::MotionSequence& m);
kin::MotionSequence load_moseq(const fs::path& path);

// ---- FeatSeq ----------------------------------------------------------------

struct FeatSeq {
  MatD frames;  // T x 35
  double fps = 30.0;
};

std::string encode_featseq(const FeatSeq& f);
FeatSeq decode_featseq(const std::string& bytes);
void save_featseq(const fs::path& path, const FeatSeq& f);
FeatSeq load_featseq(const fs::path& path);

// ---- Checkpoint -------------------------------------------------------------

std::string encode_checkpoint(const diffusion::Model& m);
diffusion::Model decode_checkpoint(const std::string& bytes);
void save_checkpoint(const fs::path& path, const diffusion::Model& m);
diffusion::Model load_checkpoint(const fs::path& path);

// ---- WAV --------------------------------------------------------------------

// PCM16 or float32, any channel count (averaged to mono).
dsp::AudioClip decode_wav(const std::string& bytes);
dsp::AudioClip read_wav(const fs::path& path);
// Mono PCM16.
std::string encode_wav(const dsp::AudioClip& clip);
void write_wav(const fs::path& path, const dsp::AudioClip& clip);

// ---- Stick-figure renderer ----------------------------------------------------

struct RenderOptions {
  int stride = 1;
  int size = 256;  // pixels, square
};

// Orthographic front view (x right, y up) of one frame. `bounds` is
// {min_x, min_y, max_x, max_y} in world units.
std::string render_svg(const MatD& positions_row, const kin::Skeleton& skel, const std::array<double, 4>& bounds,
                       int size);

// Writes frame_00000.svg, ... every `stride` frames with bounds shared across
// the sequence. Returns the number of files written.
int render_sequence(const kin::MotionSequence& m, const kin::Skeleton& skel, const fs::path& dir,
                    const RenderOptions& opts = {});

// ---- Corpus -----------------------------------------------------------------

struct CorpusItem {
  std::string id;
  std::string split;  // "train" or "test"
  MatD music;         // T x 35
  kin::MotionSequence motion;
  std::vector<int> beats;
  fs::path audio;     // empty when not written
};

struct Corpus {
  std::vector<CorpusItem> items;
  std::vector<const CorpusItem*> split(const std::string& name) const;
};

// Layout: manifest.json, {train,test}/NNN.{fseq,mosq,wav}.
void write_corpus(const fs::path& dir, const toy::ToyCorpus& corpus, std::uint64_t seed, bool with_audio = true);
Corpus read_corpus(const fs::path& dir);

// ---- Training configuration ---------------------------------------------------

struct TrainSetup {
  model::DenoiserConfig model;
  diffusion::TrainConfig train;
};

// Structured JSON. Keys (all optional): d_model, blocks, cond_layers, heads,
// ffn_dim, dropout, d_state, window, batch, steps, lr, wd, ema, betas[2],
// cond_drop, seed, weights{rec,hand,body,foot},
// flags{vel_on, fk_decomposed, bidirectional, backbone}. Unknown keys are errors.
TrainSetup parse_train_config(const std::string& text, int motion_dim);

}  // namespace baton::io
