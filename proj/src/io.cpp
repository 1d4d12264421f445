#include "baton/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

namespace baton::io {

using nlohmann::json;

namespace {

// ---- little-endian primitives ----

template <typename U>
void put_uint(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename U>
U get_uint(const std::string& in, std::size_t pos) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    v |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  return v;
}

void put_f32(std::string& out, double v) { put_uint(out, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
void put_f32(std::string& out, float v) { put_uint(out, std::bit_cast<std::uint32_t>(v)); }
void put_f64(std::string& out, double v) { put_uint(out, std::bit_cast<std::uint64_t>(v)); }
float get_f32(const std::string& in, std::size_t pos) { return std::bit_cast<float>(get_uint<std::uint32_t>(in, pos)); }
double get_f64(const std::string& in, std::size_t pos) { return std::bit_cast<double>(get_uint<std::uint64_t>(in, pos)); }

// Splits "<magic><len><json>" and returns the header plus the payload offset.
template <typename Len>
std::pair<json, std::size_t> read_header(const std::string& bytes, const std::string& magic, const char* what) {
  const std::string family = magic.substr(0, magic.size() - 1);
  if (bytes.size() < magic.size() || bytes.compare(0, family.size(), family) != 0) {
    fail(ErrorKind::FormatError, std::string(what) + ": bad magic");
  }
  if (bytes[magic.size() - 1] != magic.back()) {
    fail(ErrorKind::FormatError, std::string(what) + ": unsupported version '" + bytes.substr(0, magic.size()) + "'");
  }
  std::size_t pos = magic.size();
  if (bytes.size() < pos + sizeof(Len)) fail(ErrorKind::FormatError, std::string(what) + ": truncated header");
  const auto len = static_cast<std::size_t>(get_uint<Len>(bytes, pos));
  pos += sizeof(Len);
  if (bytes.size() - pos < len) fail(ErrorKind::FormatError, std::string(what) + ": truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(pos, len));
  } catch (const json::exception& e) {
    fail(ErrorKind::FormatError, std::string(what) + ": header is not valid JSON: " + e.what());
  }
  return {header, pos + len};
}

template <typename Len>
std::string write_header(const std::string& magic, const json& header) {
  const std::string text = header.dump();
  std::string out = magic;
  put_uint(out, static_cast<Len>(text.size()));
  out += text;
  return out;
}

void require_payload(const std::string& bytes, std::size_t offset, std::size_t need, const char* what) {
  if (bytes.size() < offset + need) fail(ErrorKind::FormatError, std::string(what) + ": truncated payload");
  if (bytes.size() > offset + need) fail(ErrorKind::FormatError, std::string(what) + ": trailing bytes after payload");
}

template <typename T>
T header_get(const json& h, const char* key, const char* what) {
  try {
    return h.at(key).get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::FormatError, std::string(what) + ": header field '" + key + "' missing or mistyped");
  }
}

void write_matrix_f32(std::string& out, const MatD& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) put_f32(out, m(i, j));
  }
}

MatD read_matrix_f32(const std::string& in, std::size_t& pos, Eigen::Index rows, Eigen::Index cols) {
  MatD m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      m(i, j) = get_f32(in, pos);
      pos += 4;
    }
  }
  return m;
}

}  // namespace

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::IoError, "cannot open '" + path.string() + "' for reading");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) fail(ErrorKind::IoError, "read error on '" + path.string() + "'");
  return data;
}

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) fail(ErrorKind::IoError, "cannot create directory '" + path.parent_path().string() + "': " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::IoError, "cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::IoError, "write error on '" + path.string() + "'");
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// ---- MoSeq ----

std::string encode_moseq(const kin::MotionSequence& m) {
  m.validate();
  const Eigen::Index t = m.frames();
  const int j = m.joints();
  const int k = m.contacts ? static_cast<int>(m.contacts->cols()) : 0;
  const json header = {{"fps", m.fps},       {"T", t},
                       {"J", j},             {"D", 3 + 6 * j},
                       {"K", k},             {"skeleton_name", m.skeleton_name},
                       {"has_contacts", m.contacts.has_value()}, {"norm", "raw"}};
  std::string out = write_header<std::uint32_t>("MOSQ1", header);
  write_matrix_f32(out, m.flat());
  if (m.contacts) write_matrix_f32(out, *m.contacts);
  return out;
}

kin::MotionSequence decode_moseq(const std::string& bytes) {
  const char* what = "MoSeq";
  const auto [h, offset] = read_header<std::uint32_t>(bytes, "MOSQ1", what);
  const auto t = header_get<std::int64_t>(h, "T", what);
  const auto j = header_get<std::int64_t>(h, "J", what);
  const auto d = header_get<std::int64_t>(h, "D", what);
  const bool has_contacts = header_get<bool>(h, "has_contacts", what);
  const std::int64_t k = has_contacts ? header_get<std::int64_t>(h, "K", what) : 0;
  if (t < 0 || j < 1 || d != 3 + 6 * j || k < 0) fail(ErrorKind::FormatError, "MoSeq: inconsistent header dimensions");
  if (h.value("norm", std::string("raw")) != "raw") fail(ErrorKind::FormatError, "MoSeq: only raw payloads are supported");
  require_payload(bytes, offset, static_cast<std::size_t>(4 * t * (d + k)), what);
  std::size_t pos = offset;
  const MatD flat = read_matrix_f32(bytes, pos, t, d);
  kin::MotionSequence m = kin::MotionSequence::from_flat(flat, header_get<double>(h, "fps", what),
                                                         h.value("skeleton_name", std::string()));
  if (has_contacts) m.contacts = read_matrix_f32(bytes, pos, t, k);
  return m;
}

void save_moseq(const fs::path& path, const kin::MotionSequence& m) { write_file(path, encode_moseq(m)); }
kin::MotionSequence load_moseq(const fs::path& path) { return decode_moseq(read_file(path)); }

// ---- FeatSeq ----

std::string encode_featseq(const FeatSeq& f) {
  require(f.frames.cols() == dsp::kFeatureDim, ErrorKind::ShapeError, "FeatSeq frames must have 35 columns");
  const json header = {{"fps", f.fps},
                       {"T", f.frames.rows()},
                       {"D", dsp::kFeatureDim},
                       {"column_layout", {{"mfcc", {dsp::kMfccCol, dsp::kChromaCol}},
                                          {"chroma", {dsp::kChromaCol, dsp::kPeakCol}},
                                          {"peak", {dsp::kPeakCol, dsp::kBeatCol}},
                                          {"beat", {dsp::kBeatCol, dsp::kEnvelopeCol}},
                                          {"envelope", {dsp::kEnvelopeCol, dsp::kFeatureDim}}}}};
  std::string out = write_header<std::uint32_t>("FSEQ1", header);
  write_matrix_f32(out, f.frames);
  return out;
}

FeatSeq decode_featseq(const std::string& bytes) {
  const char* what = "FeatSeq";
  const auto [h, offset] = read_header<std::uint32_t>(bytes, "FSEQ1", what);
  const auto t = header_get<std::int64_t>(h, "T", what);
  const auto d = header_get<std::int64_t>(h, "D", what);
  if (d != dsp::kFeatureDim || t < 0) fail(ErrorKind::FormatError, "FeatSeq: feature width must be 35");
  require_payload(bytes, offset, static_cast<std::size_t>(4 * t * d), what);
  std::size_t pos = offset;
  FeatSeq f;
  f.fps = header_get<double>(h, "fps", what);
  f.frames = read_matrix_f32(bytes, pos, t, d);
  return f;
}

void save_featseq(const fs::path& path, const FeatSeq& f) { write_file(path, encode_featseq(f)); }
FeatSeq load_featseq(const fs::path& path) { return decode_featseq(read_file(path)); }

// ---- Checkpoint ----

namespace {

constexpr double kBetaStart = 1e-4;
constexpr double kBetaEnd = 0.02;

struct TensorWriter {
  json table = json::array();
  std::string payload;

  void add_f32(const std::string& name, const nn::Mat<float>& m) {
    table.push_back({{"name", name}, {"dtype", "f32"}, {"shape", {m.rows(), m.cols()}}, {"offset", payload.size()}});
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) put_f32(payload, m(i, j));
    }
  }
  void add_f64(const std::string& name, const kin::RowD& v) {
    table.push_back({{"name", name}, {"dtype", "f64"}, {"shape", {1, v.size()}}, {"offset", payload.size()}});
    for (Eigen::Index i = 0; i < v.size(); ++i) put_f64(payload, v(i));
  }
};

}  // namespace

std::string encode_checkpoint(const diffusion::Model& m) {
  TensorWriter w;
  for (const auto& [name, value] : m.params) w.add_f32(name, value);
  for (const auto& [name, value] : m.ema) w.add_f32("ema/" + name, value);
  w.add_f64("norm/motion_mean", m.motion_stats.mean);
  w.add_f64("norm/motion_std", m.motion_stats.std);
  w.add_f64("norm/music_mean", m.music_stats.mean);
  w.add_f64("norm/music_std", m.music_stats.std);
  const json manifest = {
      {"format", "baton-checkpoint"},
      {"config", json::parse(m.config.to_json())},
      {"skeleton", json::parse(m.skeleton.to_json())},
      {"schedule", {{"kind", "linear"}, {"steps", m.config.t_max}, {"beta_start", kBetaStart}, {"beta_end", kBetaEnd}}},
      {"step", m.step},
      {"seed", m.seed},
      {"tensors", w.table}};
  std::string out = write_header<std::uint64_t>("CKPT1", manifest);
  out += w.payload;
  return out;
}

diffusion::Model decode_checkpoint(const std::string& bytes) {
  const char* what = "Checkpoint";
  const auto [h, offset] = read_header<std::uint64_t>(bytes, "CKPT1", what);
  diffusion::Model m;
  try {
    m.config = model::DenoiserConfig::from_json(h.at("config").dump());
    m.skeleton = kin::Skeleton::from_json(h.at("skeleton").dump());
    m.step = h.at("step").get<int>();
    m.seed = h.at("seed").get<std::uint64_t>();
    const json& sched = h.at("schedule");
    if (sched.at("kind") != "linear" || sched.at("beta_start").get<double>() != kBetaStart ||
        sched.at("beta_end").get<double>() != kBetaEnd) {
      fail(ErrorKind::FormatError, "Checkpoint: unsupported noise schedule");
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::FormatError, std::string("Checkpoint: bad manifest: ") + e.what());
  }
  const std::size_t payload_size = bytes.size() - offset;
  std::size_t expected = 0;
  std::map<std::string, kin::RowD> norms;
  for (const json& e : header_get<json>(h, "tensors", what)) {
    std::string name, dtype;
    std::vector<std::int64_t> shape;
    std::size_t off = 0;
    try {
      name = e.at("name").get<std::string>();
      dtype = e.at("dtype").get<std::string>();
      shape = e.at("shape").get<std::vector<std::int64_t>>();
      off = e.at("offset").get<std::size_t>();
    } catch (const json::exception&) {
      fail(ErrorKind::FormatError, "Checkpoint: malformed tensor table entry");
    }
    if (shape.size() != 2 || shape[0] < 0 || shape[1] < 0) fail(ErrorKind::FormatError, "Checkpoint: bad shape for " + name);
    const std::size_t elem = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
    if (elem == 0) fail(ErrorKind::FormatError, "Checkpoint: unknown dtype '" + dtype + "'");
    const std::size_t n = static_cast<std::size_t>(shape[0] * shape[1]);
    if (off != expected || off + n * elem > payload_size) fail(ErrorKind::FormatError, "Checkpoint: truncated payload");
    expected = off + n * elem;
    std::size_t pos = offset + off;
    if (dtype == "f32") {
      nn::Mat<float> t(shape[0], shape[1]);
      for (std::size_t i = 0; i < n; ++i, pos += 4) t.data()[i] = get_f32(bytes, pos);
      if (name.rfind("ema/", 0) == 0) {
        m.ema[name.substr(4)] = std::move(t);
      } else {
        m.params[name] = std::move(t);
      }
    } else {
      kin::RowD v(n);
      for (std::size_t i = 0; i < n; ++i, pos += 8) v(i) = get_f64(bytes, pos);
      norms[name] = std::move(v);
    }
  }
  if (expected != payload_size) fail(ErrorKind::FormatError, "Checkpoint: trailing bytes after payload");
  for (const char* key : {"norm/motion_mean", "norm/motion_std", "norm/music_mean", "norm/music_std"}) {
    if (!norms.count(key)) fail(ErrorKind::FormatError, std::string("Checkpoint: missing tensor ") + key);
  }
  m.motion_stats = {norms["norm/motion_mean"], norms["norm/motion_std"]};
  m.music_stats = {norms["norm/music_mean"], norms["norm/music_std"]};
  // Every parameter of a freshly initialized model must be present with the same shape.
  const nn::ParamSet<float> reference = model::init_params(m.config, 0);
  for (const auto& [name, value] : reference) {
    const auto it = m.params.find(name);
    if (it == m.params.end()) fail(ErrorKind::FormatError, "Checkpoint: missing parameter " + name);
    if (it->second.rows() != value.rows() || it->second.cols() != value.cols()) {
      fail(ErrorKind::FormatError, "Checkpoint: shape mismatch for " + name);
    }
  }
  if (m.params.size() != reference.size()) fail(ErrorKind::FormatError, "Checkpoint: unexpected extra parameters");
  if (!m.ema.empty() && m.ema.size() != m.params.size()) fail(ErrorKind::FormatError, "Checkpoint: incomplete EMA shadow");
  require(m.motion_stats.dim() == m.config.motion_dim && m.music_stats.dim() == m.config.music_dim,
          ErrorKind::FormatError, "Checkpoint: normalization width mismatch");
  return m;
}

void save_checkpoint(const fs::path& path, const diffusion::Model& m) { write_file(path, encode_checkpoint(m)); }
diffusion::Model load_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path)); }

// ---- WAV ----

dsp::AudioClip decode_wav(const std::string& bytes) {
  auto bad = [](const std::string& msg) { fail(ErrorKind::InvalidAudio, "WAV: " + msg); };
  if (bytes.size() < 12 || bytes.compare(0, 4, "RIFF") != 0 || bytes.compare(8, 4, "WAVE") != 0) bad("not a RIFF/WAVE file");
  std::size_t pos = 12;
  int format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  std::string data;
  bool have_data = false;
  while (pos + 8 <= bytes.size()) {
    const std::string id = bytes.substr(pos, 4);
    const std::size_t len = get_uint<std::uint32_t>(bytes, pos + 4);
    const std::size_t body = pos + 8;
    const std::size_t avail = std::min(len, bytes.size() - body);
    if (id == "fmt ") {
      if (avail < 16) bad("fmt chunk too short");
      format = get_uint<std::uint16_t>(bytes, body);
      channels = get_uint<std::uint16_t>(bytes, body + 2);
      rate = get_uint<std::uint32_t>(bytes, body + 4);
      bits = get_uint<std::uint16_t>(bytes, body + 14);
      if (format == 0xFFFE) {
        if (avail < 26) bad("extensible fmt chunk too short");
        format = get_uint<std::uint16_t>(bytes, body + 24);
      }
      have_fmt = true;
    } else if (id == "data") {
      data = bytes.substr(body, avail);
      have_data = true;
    }
    pos = body + len + (len & 1);
  }
  if (!have_fmt || !have_data) bad("missing fmt or data chunk");
  if (channels < 1 || rate == 0) bad("invalid channel count or sample rate");
  const bool pcm16 = format == 1 && bits == 16;
  const bool f32 = format == 3 && bits == 32;
  if (!pcm16 && !f32) bad("only PCM16 and float32 are supported");
  const std::size_t frame_bytes = static_cast<std::size_t>(channels) * (bits / 8);
  const std::size_t n = data.size() / frame_bytes;
  dsp::AudioClip clip;
  clip.sample_rate = static_cast<int>(rate);
  clip.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0;
    for (int c = 0; c < channels; ++c) {
      const std::size_t p = i * frame_bytes + static_cast<std::size_t>(c) * (bits / 8);
      acc += pcm16 ? static_cast<std::int16_t>(get_uint<std::uint16_t>(data, p)) / 32768.0
                   : static_cast<double>(get_f32(data, p));
    }
    clip.samples[i] = acc / channels;
  }
  return clip;
}

dsp::AudioClip read_wav(const fs::path& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const Error& e) {
    fail(ErrorKind::InvalidAudio, e.what());
  }
  return decode_wav(bytes);
}

std::string encode_wav(const dsp::AudioClip& clip) {
  require(clip.sample_rate > 0, ErrorKind::InvalidAudio, "sample rate must be positive");
  const auto data_len = static_cast<std::uint32_t>(clip.samples.size() * 2);
  std::string out = "RIFF";
  put_uint<std::uint32_t>(out, 36 + data_len);
  out += "WAVEfmt ";
  put_uint<std::uint32_t>(out, 16);
  put_uint<std::uint16_t>(out, 1);
  put_uint<std::uint16_t>(out, 1);
  put_uint<std::uint32_t>(out, static_cast<std::uint32_t>(clip.sample_rate));
  put_uint<std::uint32_t>(out, static_cast<std::uint32_t>(clip.sample_rate * 2));
  put_uint<std::uint16_t>(out, 2);
  put_uint<std::uint16_t>(out, 16);
  out += "data";
  put_uint<std::uint32_t>(out, data_len);
  for (double s : clip.samples) {
    const double q = std::round(std::clamp(s, -1.0, 1.0) * 32767.0);
    put_uint<std::uint16_t>(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  return out;
}

void write_wav(const fs::path& path, const dsp::AudioClip& clip) { write_file(path, encode_wav(clip)); }

// ---- renderer ----

std::string render_svg(const MatD& row, const kin::Skeleton& skel, const std::array<double, 4>& bounds, int size) {
  require(row.cols() == 3 * skel.num_joints(), ErrorKind::ShapeError, "positions width mismatch");
  const double margin = 0.08 * size;
  const double span = std::max({bounds[2] - bounds[0], bounds[3] - bounds[1], 1e-6});
  const double scale = (size - 2 * margin) / span;
  const double cx = 0.5 * (bounds[0] + bounds[2]), cy = 0.5 * (bounds[1] + bounds[3]);
  auto px = [&](int j) { return 0.5 * size + (row(0, 3 * j) - cx) * scale; };
  auto py = [&](int j) { return 0.5 * size - (row(0, 3 * j + 1) - cy) * scale; };
  const auto& hand = skel.groups.count("hand") ? skel.groups.at("hand") : std::vector<int>{};
  const std::set<int> hand_set(hand.begin(), hand.end());
  char buf[256];
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size << "\" viewBox=\"0 0 "
     << size << ' ' << size << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int j = 0; j < skel.num_joints(); ++j) {
    const int p = skel.joints[j].parent;
    if (p < 0) continue;
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"%s\" stroke-width=\"3\" "
                  "stroke-linecap=\"round\"/>\n",
                  px(p), py(p), px(j), py(j), hand_set.count(j) ? "#c0392b" : "#2c3e50");
    os << buf;
  }
  for (int j = 0; j < skel.num_joints(); ++j) {
    std::snprintf(buf, sizeof buf, "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"#34495e\"/>\n", px(j), py(j));
    os << buf;
  }
  os << "</svg>\n";
  return os.str();
}

int render_sequence(const kin::MotionSequence& m, const kin::Skeleton& skel, const fs::path& dir,
                    const RenderOptions& opts) {
  require(opts.stride >= 1 && opts.size >= 16, ErrorKind::ConfigError, "render stride must be >= 1 and size >= 16");
  const MatD pos = kin::forward_kinematics(skel, m);
  std::array<double, 4> b = {1e300, 1e300, -1e300, -1e300};
  for (Eigen::Index f = 0; f < pos.rows(); ++f) {
    for (int j = 0; j < skel.num_joints(); ++j) {
      b[0] = std::min(b[0], pos(f, 3 * j));
      b[1] = std::min(b[1], pos(f, 3 * j + 1));
      b[2] = std::max(b[2], pos(f, 3 * j));
      b[3] = std::max(b[3], pos(f, 3 * j + 1));
    }
  }
  int written = 0;
  char name[32];
  for (Eigen::Index f = 0; f < pos.rows(); f += opts.stride) {
    std::snprintf(name, sizeof name, "frame_%05d.svg", static_cast<int>(f));
    write_file(dir / name, render_svg(pos.row(f), skel, b, opts.size));
    ++written;
  }
  return written;
}

// ---- corpus ----

std::vector<const CorpusItem*> Corpus::split(const std::string& name) const {
  std::vector<const CorpusItem*> out;
  for (const auto& it : items) {
    if (it.split == name) out.push_back(&it);
  }
  return out;
}

void write_corpus(const fs::path& dir, const toy::ToyCorpus& corpus, std::uint64_t seed, bool with_audio) {
  json manifest = {{"format", "baton-corpus"},
                   {"seed", seed},
                   {"n_train", corpus.train.size()},
                   {"n_test", corpus.test.size()},
                   {"skeleton", "toy9"},
                   {"items", json::array()}};
  auto emit = [&](const std::vector<toy::ToyItem>& items, const std::string& split) {
    for (std::size_t i = 0; i < items.size(); ++i) {
      const toy::ToyItem& it = items[i];
      char stem[16];
      std::snprintf(stem, sizeof stem, "%03zu", i);
      const std::string rel = split + "/" + stem;
      const std::string music = encode_featseq({it.features, 30.0});
      const std::string motion = encode_moseq(it.motion);
      write_file(dir / (rel + ".fseq"), music);
      write_file(dir / (rel + ".mosq"), motion);
      json entry = {{"id", rel},
                    {"split", split},
                    {"music", rel + ".fseq"},
                    {"motion", rel + ".mosq"},
                    {"frames", it.motion.frames()},
                    {"bpm", it.spec.bpm},
                    {"meter", it.spec.meter},
                    {"amplitude", it.spec.amplitude},
                    {"beats", it.beats},
                    {"checksum_music", fnv1a(music)},
                    {"checksum_motion", fnv1a(motion)}};
      if (with_audio) {
        const std::string wav = encode_wav(it.audio);
        write_file(dir / (rel + ".wav"), wav);
        entry["audio"] = rel + ".wav";
        entry["checksum_audio"] = fnv1a(wav);
      }
      manifest["items"].push_back(entry);
    }
  };
  emit(corpus.train, "train");
  emit(corpus.test, "test");
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

Corpus read_corpus(const fs::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    fail(ErrorKind::FormatError, std::string("corpus manifest: ") + e.what());
  }
  Corpus c;
  try {
    for (const json& e : manifest.at("items")) {
      CorpusItem it;
      it.id = e.at("id").get<std::string>();
      it.split = e.at("split").get<std::string>();
      it.music = load_featseq(dir / e.at("music").get<std::string>()).frames;
      it.motion = load_moseq(dir / e.at("motion").get<std::string>());
      it.beats = e.at("beats").get<std::vector<int>>();
      if (e.contains("audio")) it.audio = dir / e.at("audio").get<std::string>();
      require(it.music.rows() == it.motion.frames(), ErrorKind::FormatError,
              "corpus item " + it.id + ": music and motion lengths differ");
      c.items.push_back(std::move(it));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::FormatError, std::string("corpus manifest: ") + e.what());
  }
  return c;
}

// ---- training configuration ----

TrainSetup parse_train_config(const std::string& text, int motion_dim) {
  TrainSetup s;
  s.model.motion_dim = motion_dim;
  s.train.steps = 1000;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::ConfigError, std::string("train config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) fail(ErrorKind::ConfigError, "train config must be a JSON object");
  static const std::set<std::string> known = {"d_model", "blocks", "cond_layers", "heads",  "ffn_dim", "dropout",
                                              "d_state", "window", "batch",       "steps",  "lr",      "wd",
                                              "ema",     "betas",  "cond_drop",   "seed",   "weights", "flags",
                                              "window_stride"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) fail(ErrorKind::ConfigError, "unknown train config key '" + key + "'");
  }
  try {
    auto& m = s.model;
    auto& t = s.train;
    m.d_model = j.value("d_model", m.d_model);
    m.n_blocks = j.value("blocks", m.n_blocks);
    m.n_cond_layers = j.value("cond_layers", m.n_cond_layers);
    m.heads = j.value("heads", m.heads);
    m.ffn_dim = j.value("ffn_dim", m.ffn_dim);
    m.dropout = j.value("dropout", m.dropout);
    m.ssm.d_state = j.value("d_state", m.ssm.d_state);
    t.window = j.value("window", t.window);
    t.window_stride = j.value("window_stride", t.window_stride);
    t.batch = j.value("batch", t.batch);
    t.steps = j.value("steps", t.steps);
    t.lr = j.value("lr", t.lr);
    t.weight_decay = j.value("wd", t.weight_decay);
    t.ema_decay = j.value("ema", t.ema_decay);
    t.cond_drop = j.value("cond_drop", t.cond_drop);
    t.seed = j.value("seed", t.seed);
    if (j.contains("betas")) {
      const auto b = j.at("betas").get<std::vector<double>>();
      require(b.size() == 2, ErrorKind::ConfigError, "betas must have two entries");
      t.beta1 = b[0];
      t.beta2 = b[1];
    }
    if (j.contains("weights")) {
      const json& w = j.at("weights");
      for (const auto& [key, _] : w.items()) {
        if (key != "rec" && key != "hand" && key != "body" && key != "foot") {
          fail(ErrorKind::ConfigError, "unknown loss weight '" + key + "'");
        }
      }
      t.weights.rec = w.value("rec", t.weights.rec);
      t.weights.hand = w.value("hand", t.weights.hand);
      t.weights.body = w.value("body", t.weights.body);
      t.weights.foot = w.value("foot", t.weights.foot);
    }
    if (j.contains("flags")) {
      const json& f = j.at("flags");
      for (const auto& [key, _] : f.items()) {
        if (key != "vel_on" && key != "fk_decomposed" && key != "bidirectional" && key != "backbone") {
          fail(ErrorKind::ConfigError, "unknown flag '" + key + "'");
        }
      }
      t.flags.velocity = f.value("vel_on", t.flags.velocity);
      t.flags.fk_decomposed = f.value("fk_decomposed", t.flags.fk_decomposed);
      m.bidirectional = f.value("bidirectional", m.bidirectional);
      if (f.contains("backbone")) m.backbone = model::backbone_from_string(f.at("backbone").get<std::string>());
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::ConfigError, std::string("train config: ") + e.what());
  }
  s.model.validate();
  require(s.train.steps >= 1 && s.train.batch >= 1 && s.train.window >= 2, ErrorKind::ConfigError,
          "steps, batch and window must be positive");
  return s;
}

}  // namespace baton::io
