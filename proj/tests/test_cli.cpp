#include <doctest.h>

#include <json.hpp>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <string>

#include "baton/io.hpp"
#include "baton/toy_world.hpp"
#include "cli.hpp"

using namespace baton;
namespace fs = std::filesystem;

namespace {

// Runs the installed binary through the shell and returns its exit status.
int sh(const std::string& args) {
  const char* bin = std::getenv("BATON_BIN");
  REQUIRE(bin != nullptr);
  const std::string cmd = std::string(bin) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

int run(std::initializer_list<const char*> args) {
  std::vector<const char*> argv{"baton"};
  argv.insert(argv.end(), args.begin(), args.end());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

fs::path workdir() {
  static const fs::path dir = [] {
    const fs::path p = fs::temp_directory_path() / "baton_cli_test";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

std::string at(const std::string& name) { return (workdir() / name).string(); }

const char* kTinyConfig =
    R"({"d_model": 8, "blocks": 1, "cond_layers": 1, "heads": 2, "ffn_dim": 8, "d_state": 4,
        "window": 60, "batch": 2, "steps": 2, "ema": 0.9})";

// A trained tiny checkpoint plus a long music file, built once.
void ensure_model() {
  if (fs::exists(at("ckpt/model.ckpt"))) return;
  REQUIRE(sh("toydata --n-train 2 --n-test 1 --seed 3 --no-audio -o " + at("corpus")) == 0);
  io::write_file(at("tiny.json"), kTinyConfig);
  REQUIRE(sh("train --config " + at("tiny.json") + " --data " + at("corpus") + " -o " + at("ckpt")) == 0);
  toy::ToySpec spec;
  spec.duration_s = 36.0;
  io::write_wav(at("long.wav"), toy::make_click_track(spec));
  REQUIRE(sh("extract " + at("long.wav") + " -o " + at("long.fseq")) == 0);
}

}  // namespace

TEST_CASE("usage errors exit 2") {
  CHECK(sh("") == 2);
  CHECK(sh("frobnicate") == 2);
  CHECK(sh("generate --no-such-flag") == 2);
  CHECK(sh("extract") == 2);
  CHECK(run({"render", "--moseq", "x.mosq", "-o", "out", "--stride", "0"}) == 2);
  CHECK(sh("--help") == 0);
}

TEST_CASE("extract: unreadable or malformed WAV exits 2, valid audio writes features") {
  CHECK(sh("extract /nonexistent/clip.wav -o " + at("x.fseq")) == 2);
  io::write_file(at("garbage.wav"), "RIFF....not really");
  CHECK(sh("extract " + at("garbage.wav") + " -o " + at("x.fseq")) == 2);
  CHECK_FALSE(fs::exists(at("x.fseq")));
  toy::ToySpec spec;
  spec.duration_s = 4.0;
  io::write_wav(at("clicks.wav"), toy::make_click_track(spec));
  CHECK(run({"extract", at("clicks.wav").c_str(), "-o", at("clicks.fseq").c_str()}) == 0);
  const io::FeatSeq f = io::load_featseq(at("clicks.fseq"));
  CHECK(f.frames.rows() == 120);
  CHECK(f.frames.cols() == 35);
}

TEST_CASE("toydata, train: corpus and checkpoint with loss log") {
  ensure_model();
  CHECK(io::read_corpus(at("corpus")).items.size() == 3);
  const diffusion::Model m = io::load_checkpoint(at("ckpt/model.ckpt"));
  CHECK(m.step == 2);
  CHECK(m.config.d_model == 8);
  const std::string log = io::read_file(at("ckpt/loss.csv"));
  CHECK(log.rfind("step,total", 0) == 0);
  CHECK(std::count(log.begin(), log.end(), '\n') == 3);
  CHECK(sh("train --config " + at("tiny.json") + " --data /nonexistent -o " + at("ckpt2")) == 2);
}

TEST_CASE("generate: fixed seed is byte-identical, 1024 frames in one pass") {
  ensure_model();
  const std::string base = "generate --ckpt " + at("ckpt/model.ckpt") + " --music " + at("long.fseq") + " --steps 3";
  REQUIRE(sh(base + " --frames 300 --seed 7 -o " + at("g1.mosq")) == 0);
  REQUIRE(sh(base + " --frames 300 --seed 7 -o " + at("g2.mosq")) == 0);
  REQUIRE(sh(base + " --frames 300 --seed 8 -o " + at("g3.mosq")) == 0);
  CHECK(io::read_file(at("g1.mosq")) == io::read_file(at("g2.mosq")));
  CHECK(io::read_file(at("g1.mosq")) != io::read_file(at("g3.mosq")));
  REQUIRE(sh(base + " --frames 1024 -o " + at("long.mosq")) == 0);
  const kin::MotionSequence m = io::load_moseq(at("long.mosq"));
  CHECK(m.frames() == 1024);
  CHECK(m.joints() == 9);
  CHECK(sh(base + " --frames 5000 -o " + at("too_long.mosq")) == 2);
  CHECK(sh("generate --ckpt /nonexistent.ckpt --music " + at("long.fseq") + " -o " + at("n.mosq")) == 2);
}

TEST_CASE("edit: continuation keeps the known prefix") {
  ensure_model();
  REQUIRE(sh("generate --ckpt " + at("ckpt/model.ckpt") + " --music " + at("long.fseq") +
             " --steps 2 --frames 90 --seed 1 -o " + at("known.mosq")) == 0);
  REQUIRE(sh("edit --ckpt " + at("ckpt/model.ckpt") + " --music " + at("long.fseq") + " --known " +
             at("known.mosq") + " --mode continuation --span 30 --steps 2 --seed 2 -o " + at("edited.mosq")) == 0);
  const kin::MotionSequence known = io::load_moseq(at("known.mosq"));
  const kin::MotionSequence edited = io::load_moseq(at("edited.mosq"));
  CHECK(edited.frames() == 90);
  CHECK(edited.flat().topRows(30) == known.flat().topRows(30));
  io::write_file(at("mask.json"), R"([{"frames": [0, 90], "parts": "all"}])");
  REQUIRE(sh("edit --ckpt " + at("ckpt/model.ckpt") + " --music " + at("long.fseq") + " --known " +
             at("known.mosq") + " --mask " + at("mask.json") + " --steps 2 -o " + at("full.mosq")) == 0);
  CHECK(io::load_moseq(at("full.mosq")).flat() == known.flat());
  CHECK(sh("edit --ckpt " + at("ckpt/model.ckpt") + " --music " + at("long.fseq") + " --known " +
           at("known.mosq") + " --steps 2 -o " + at("none.mosq")) == 2);
}

TEST_CASE("eval: report against the corpus test split") {
  ensure_model();
  const io::Corpus corpus = io::read_corpus(at("corpus"));
  fs::create_directories(at("gen"));
  fs::create_directories(at("gen_music"));
  int i = 0;
  for (const auto* it : corpus.split("train")) {
    const std::string stem = "s" + std::to_string(i++);
    io::save_moseq(at("gen/" + stem + ".mosq"), it->motion);
    io::save_featseq(at("gen_music/" + stem + ".fseq"), {it->music, 30.0});
  }
  REQUIRE(sh("eval --generated " + at("gen") + " --reference " + at("corpus") + " --split train --music " +
             at("gen_music") + " -o " + at("report.json")) == 0);
  const auto j = nlohmann::json::parse(io::read_file(at("report.json")));
  CHECK(std::abs(j.at("fid_body").get<double>()) < 1e-6);
  CHECK(j.at("bas").get<double>() > 0.5);
  CHECK(j.at("generated") == 2);
  CHECK(sh("eval --generated " + at("gen") + " --reference " + at("corpus") + " -o " + at("r2.json")) == 2);
}

TEST_CASE("bench: small grid report") {
  io::write_file(at("bench.json"), kTinyConfig);
  REQUIRE(sh("bench --config " + at("bench.json") + " --grid 16..64 --reps 1 --steps 1 -o " + at("bench.csv")) == 0);
  const std::string csv = io::read_file(at("bench.csv"));
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
  CHECK(sh("bench --grid 16,32 --reps 1 --steps 1 -o " + at("b2.csv")) == 2);
}

TEST_CASE("render: static motion gives identical frames") {
  kin::MatD flat = kin::MatD::Zero(5, 57);
  for (int j = 0; j < 9; ++j) flat.middleCols(3 + 6 * j, 6).rowwise() = kin::identity_sixd().transpose();
  io::save_moseq(at("static.mosq"), kin::MotionSequence::from_flat(flat, 30.0, "toy9"));
  REQUIRE(sh("render --moseq " + at("static.mosq") + " --skeleton toy9 -o " + at("frames")) == 0);
  int n = 0;
  std::string first;
  for (const auto& e : fs::directory_iterator(at("frames"))) {
    const std::string svg = io::read_file(e.path());
    if (n++ == 0) first = svg;
    CHECK(svg == first);
  }
  CHECK(n == 5);
}
