#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <Eigen/Core>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <map>
#include <sstream>

#include "baton/bench.hpp"
#include "baton/diffusion.hpp"
#include "baton/dsp.hpp"
#include "baton/io.hpp"
#include "baton/metrics.hpp"
#include "baton/toy_world.hpp"

namespace baton::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

kin::Skeleton resolve_skeleton(const std::string& spec) {
  if (spec == "toy9" || spec == "smplx55") return kin::builtin_skeleton(spec);
  return kin::Skeleton::from_json(io::read_file(spec));
}

// "256..4096" doubles from the lower bound; otherwise a comma-separated list.
std::vector<int> parse_grid(const std::string& text) {
  std::vector<int> out;
  try {
    const auto dots = text.find("..");
    if (dots != std::string::npos) {
      const int lo = std::stoi(text.substr(0, dots));
      const int hi = std::stoi(text.substr(dots + 2));
      if (lo < 1 || hi < lo) throw UsageError("bad grid range '" + text + "'");
      for (int v = lo; v <= hi; v *= 2) out.push_back(v);
    } else {
      std::stringstream ss(text);
      std::string item;
      while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
    }
  } catch (const std::logic_error&) {
    throw UsageError("bad grid '" + text + "'");
  }
  return out;
}

std::vector<fs::path> list_moseq(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) fail(ErrorKind::IoError, "'" + dir.string() + "' is not a directory");
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".mosq") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> featseq_beats(const io::FeatSeq& f) {
  std::vector<int> out;
  for (Eigen::Index i = 0; i < f.frames.rows(); ++i) {
    if (f.frames(i, dsp::kBeatCol) > 0.5) out.push_back(static_cast<int>(i));
  }
  return out;
}

void print_error(const char* kind, const std::string& msg) {
  std::cerr << json{{"error", kind}, {"message", msg}}.dump() << '\n';
}

int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::InvalidAudio:
    case ErrorKind::FormatError:
    case ErrorKind::IoError:
    case ErrorKind::ConfigError:
      return 2;
    default:
      return 1;
  }
}

}  // namespace

int run(int argc, const char* const* argv) {
  if (const char* threads = std::getenv("BATON_THREADS")) Eigen::setNbThreads(std::max(1, std::atoi(threads)));

  CLI::App app{"Music-conditioned conducting motion: features, training, sampling, editing, metrics"};
  app.require_subcommand(1);

  // extract
  std::string wav_in, out_path;
  auto* extract = app.add_subcommand("extract", "WAV -> 35-d music features (FeatSeq)");
  extract->add_option("audio", wav_in, "input WAV")->required();
  extract->add_option("-o,--output", out_path, "output FeatSeq")->required();

  // toydata
  int n_train = 64, n_test = 16;
  std::uint64_t seed = 42;
  bool no_audio = false;
  auto* toydata = app.add_subcommand("toydata", "generate a synthetic conducting corpus");
  toydata->add_option("--n-train", n_train, "training pairs")->check(CLI::PositiveNumber);
  toydata->add_option("--n-test", n_test, "test pairs")->check(CLI::NonNegativeNumber);
  toydata->add_option("--seed", seed, "corpus seed");
  toydata->add_flag("--no-audio", no_audio, "skip writing WAV files");
  toydata->add_option("-o,--output", out_path, "output directory")->required();

  // train
  std::string config_path, data_dir, skeleton_spec = "toy9";
  int log_every = 50;
  int checkpoint_every = 0;
  auto* train = app.add_subcommand("train", "train a denoiser on a corpus directory");
  train->add_option("--config", config_path, "JSON training configuration")->required();
  train->add_option("--data", data_dir, "corpus directory")->required();
  train->add_option("--skeleton", skeleton_spec, "toy9, smplx55 or a skeleton JSON path");
  train->add_option("--log-every", log_every, "loss print interval")->check(CLI::PositiveNumber);
  train->add_option("--checkpoint-every", checkpoint_every, "intermediate checkpoint interval (0: off)");
  train->add_option("-o,--output", out_path, "checkpoint directory")->required();

  // generate
  std::string ckpt_path, music_path;
  int frames = 0;
  diffusion::SamplerConfig sampler;
  bool no_ema = false;
  auto* generate = app.add_subcommand("generate", "sample motion for a music feature file");
  generate->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  generate->add_option("--music", music_path, "FeatSeq file")->required();
  generate->add_option("--frames", frames, "frames to generate (default: music length)");
  generate->add_option("--steps", sampler.steps, "DDIM steps")->check(CLI::PositiveNumber);
  generate->add_option("--guidance", sampler.guidance, "guidance weight");
  generate->add_option("--seed", sampler.seed, "noise seed");
  generate->add_flag("--no-ema", no_ema, "use raw instead of EMA weights");
  generate->add_option("-o,--output", out_path, "output MoSeq")->required();

  // edit
  std::string mask_path, known_path, mode_name;
  int span = 30;
  auto* edit = app.add_subcommand("edit", "masked motion editing");
  edit->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  edit->add_option("--music", music_path, "FeatSeq file")->required();
  auto* mask_opt = edit->add_option("--mask", mask_path, "mask JSON");
  auto* mode_opt = edit->add_option("--mode", mode_name, "inbetween, continuation, upper_to_lower, body_to_hand_face");
  mask_opt->excludes(mode_opt);
  edit->add_option("--span", span, "known frames for inbetween/continuation")->check(CLI::PositiveNumber);
  edit->add_option("--known", known_path, "MoSeq with known content")->required();
  edit->add_option("--steps", sampler.steps, "DDIM steps")->check(CLI::PositiveNumber);
  edit->add_option("--guidance", sampler.guidance, "guidance weight");
  edit->add_option("--seed", sampler.seed, "noise seed");
  edit->add_option("-o,--output", out_path, "output MoSeq")->required();

  // eval
  std::string gen_dir, ref_dir, music_dir, split = "test";
  auto* eval = app.add_subcommand("eval", "FID / DIV / BAS of generated vs reference motion");
  eval->add_option("--generated", gen_dir, "directory of generated MoSeq files")->required();
  eval->add_option("--reference", ref_dir, "corpus or MoSeq directory")->required();
  eval->add_option("--split", split, "corpus split used as reference");
  eval->add_option("--music", music_dir, "FeatSeq directory providing music beats by file stem");
  eval->add_option("--skeleton", skeleton_spec, "toy9, smplx55 or a skeleton JSON path");
  eval->add_option("-o,--output", out_path, "report JSON")->required();

  // bench
  std::string grid_text = "256..4096";
  int reps = 5;
  auto* bench = app.add_subcommand("bench", "sampling latency vs sequence length for both backbones");
  auto* bench_ckpt = bench->add_option("--ckpt", ckpt_path, "take model sizes from a checkpoint");
  auto* bench_cfg = bench->add_option("--config", config_path, "take model sizes from a training config");
  bench_ckpt->excludes(bench_cfg);
  bench->add_option("--grid", grid_text, "lengths: 'lo..hi' doubling or comma list");
  bench->add_option("--reps", reps, "timed repetitions per point")->check(CLI::PositiveNumber);
  bench->add_option("--steps", sampler.steps, "DDIM steps")->check(CLI::PositiveNumber);
  bench->add_option("-o,--output", out_path, "report .csv or .json")->required();

  // render
  std::string moseq_path;
  io::RenderOptions ropts;
  auto* render = app.add_subcommand("render", "SVG stick-figure frames");
  render->add_option("--moseq", moseq_path, "MoSeq file")->required();
  render->add_option("--skeleton", skeleton_spec, "toy9, smplx55 or a skeleton JSON path");
  render->add_option("--stride", ropts.stride, "frame stride")->check(CLI::PositiveNumber);
  render->add_option("--size", ropts.size, "image size in pixels")->check(CLI::Range(16, 4096));
  render->add_option("-o,--output", out_path, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*extract) {
      const dsp::MusicFeatures feats = dsp::extract_music_features(io::read_wav(wav_in));
      if (feats.resampled) std::cerr << "note: input resampled to 24000 Hz for analysis\n";
      io::save_featseq(out_path, {feats.frames, feats.fps});
      std::cout << "wrote " << feats.frames.rows() << " frames to " << out_path << '\n';
    } else if (*toydata) {
      const toy::ToyCorpus corpus = toy::make_corpus(n_train, n_test, seed);
      io::write_corpus(out_path, corpus, seed, !no_audio);
      std::cout << "wrote " << n_train + n_test << " pairs to " << out_path << '\n';
    } else if (*train) {
      const kin::Skeleton skel = resolve_skeleton(skeleton_spec);
      io::TrainSetup setup = io::parse_train_config(io::read_file(config_path), skel.frame_dim() + skel.num_contacts());
      setup.train.checkpoint_every = checkpoint_every;
      const io::Corpus corpus = io::read_corpus(data_dir);
      std::vector<diffusion::TrainingPair> pairs;
      for (const auto* it : corpus.split("train")) pairs.push_back({it->motion, it->music});
      if (pairs.empty()) fail(ErrorKind::ConfigError, "corpus has no training items");
      diffusion::Model m = diffusion::make_model(setup.model, skel, setup.train.seed);
      diffusion::fit_normalization(m, pairs);
      const fs::path out_dir(out_path);
      fs::create_directories(out_dir);
      std::ostringstream log;
      log << "step,total,rec,hand,body,foot\n";
      auto on_step = [&](int step, const diffusion::LossTerms& l) {
        log << step << ',' << l.total << ',' << l.rec << ',' << l.hand << ',' << l.body << ',' << l.foot << '\n';
        if (step % log_every == 0 || step == setup.train.steps) {
          std::fprintf(stderr, "step %d/%d  loss %.5f\n", step, setup.train.steps, l.total);
        }
      };
      auto on_ckpt = [&](const diffusion::Model& cur) {
        char name[48];
        std::snprintf(name, sizeof name, "step_%06d.ckpt", cur.step);
        io::save_checkpoint(out_dir / name, cur);
      };
      diffusion::train(m, pairs, setup.train, on_step, on_ckpt);
      io::save_checkpoint(out_dir / "model.ckpt", m);
      io::write_file(out_dir / "loss.csv", log.str());
      std::cout << "wrote " << (out_dir / "model.ckpt").string() << '\n';
    } else if (*generate) {
      const diffusion::Model m = io::load_checkpoint(ckpt_path);
      const io::FeatSeq music = io::load_featseq(music_path);
      const int n = frames > 0 ? frames : static_cast<int>(music.frames.rows());
      if (music.frames.rows() < n) fail(ErrorKind::ConfigError, "music is shorter than --frames");
      sampler.use_ema = !no_ema;
      const auto out = diffusion::ddim_sample(m, {music.frames}, n, sampler);
      io::save_moseq(out_path, out.front());
      std::cout << "wrote " << n << " frames to " << out_path << '\n';
    } else if (*edit) {
      const diffusion::Model m = io::load_checkpoint(ckpt_path);
      const io::FeatSeq music = io::load_featseq(music_path);
      const kin::MotionSequence known = io::load_moseq(known_path);
      const int n = static_cast<int>(known.frames());
      if (music.frames.rows() < n) fail(ErrorKind::ConfigError, "music is shorter than the known motion");
      diffusion::EditMask mask;
      mask.known = known.flat();
      if (!mask_path.empty()) {
        mask.mask = diffusion::compile_mask_spec(io::read_file(mask_path), n, m.skeleton);
      } else if (!mode_name.empty()) {
        mask.mask = diffusion::build_mode_mask(diffusion::edit_mode_from_string(mode_name), n, m.skeleton, span);
      } else {
        throw UsageError("edit needs --mask or --mode");
      }
      const auto out = diffusion::edit_masked(m, music.frames.topRows(n), mask, sampler);
      io::save_moseq(out_path, out);
      std::cout << "wrote " << n << " frames to " << out_path << '\n';
    } else if (*eval) {
      const kin::Skeleton skel = resolve_skeleton(skeleton_spec);
      std::vector<kin::MotionSequence> generated, reference;
      std::vector<std::vector<int>> beats;
      std::map<std::string, std::vector<int>> corpus_beats;
      if (fs::exists(fs::path(ref_dir) / "manifest.json")) {
        const io::Corpus corpus = io::read_corpus(ref_dir);
        for (const auto* it : corpus.split(split)) {
          reference.push_back(it->motion);
          corpus_beats[fs::path(it->id).filename().string()] = it->beats;
        }
      } else {
        for (const auto& p : list_moseq(ref_dir)) reference.push_back(io::load_moseq(p));
      }
      for (const auto& p : list_moseq(gen_dir)) {
        generated.push_back(io::load_moseq(p));
        const std::string stem = p.stem().string();
        if (!music_dir.empty()) {
          beats.push_back(featseq_beats(io::load_featseq(fs::path(music_dir) / (stem + ".fseq"))));
        } else if (corpus_beats.count(stem)) {
          beats.push_back(corpus_beats[stem]);
        } else {
          fail(ErrorKind::ConfigError, "no music beats for '" + stem + "'; pass --music or use matching corpus names");
        }
      }
      if (generated.empty() || reference.empty()) fail(ErrorKind::ConfigError, "no motion files found");
      const metrics::MetricReport report = metrics::evaluate(generated, reference, beats, skel);
      io::write_file(out_path, report.to_json() + "\n");
      std::cout << report.to_json() << '\n';
    } else if (*bench) {
      bench::BenchConfig cfg;
      cfg.grid = parse_grid(grid_text);
      cfg.reps = reps;
      cfg.sampler = sampler;
      const kin::Skeleton skel = kin::toy9();
      const int dim = skel.frame_dim() + skel.num_contacts();
      if (!ckpt_path.empty()) {
        cfg.base = io::load_checkpoint(ckpt_path).config;
      } else if (!config_path.empty()) {
        cfg.base = io::parse_train_config(io::read_file(config_path), dim).model;
      } else {
        cfg.base = model::DenoiserConfig::toy(dim);
      }
      cfg.base.motion_dim = dim;
      const bench::BenchReport report = bench::run_bench_suite(cfg, [](const bench::LatencyPoint& p) {
        std::fprintf(stderr, "%-9s T=%-5d %.3f s\n", model::to_string(p.backbone), p.frames, p.seconds);
      });
      io::write_file(out_path, fs::path(out_path).extension() == ".csv" ? report.to_csv() : report.to_json() + "\n");
      std::printf("exponent bimamba %.3f  attention %.3f\n", report.exponent_bimamba, report.exponent_attention);
    } else if (*render) {
      const kin::Skeleton skel = resolve_skeleton(skeleton_spec);
      const int n = io::render_sequence(io::load_moseq(moseq_path), skel, out_path, ropts);
      std::cout << "wrote " << n << " SVG frames to " << out_path << '\n';
    }
  } catch (const UsageError& e) {
    print_error("UsageError", e.what());
    std::cerr << app.help();
    return 2;
  } catch (const Error& e) {
    print_error(to_string(e.kind()), e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    print_error("InternalError", e.what());
    return 1;
  }
  return 0;
}

}  // namespace baton::cli
