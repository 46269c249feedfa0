#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ctrlgen/run_config.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace ctrlgen;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;  // stdout and stderr together
};

Run cli(const std::string& args) {
  const std::string cmd = std::string(CTRLGEN_CLI) + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("ctrlgen_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& f) const { return (path / f).string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_SUITE("run_config") {

TEST_CASE("defaults survive an empty document") {
  const RunConfig c = parse_run_config("{}");
  CHECK(c.train.lr == 5e-5);
  CHECK(c.train.batch_size == 64);
  CHECK(c.train.epochs == 200);
  CHECK(c.sampler.lambda == 5.0);
  CHECK(c.sampler.rho1 == 0.9);
  CHECK(c.sampler.rho2 == 0.3);
  CHECK(c.spec.vocab_size == 64);
  CHECK(c.n_per_class == 1000);
}

TEST_CASE("sections overlay their keys") {
  const RunConfig c = parse_run_config(R"({"train": {"lr": 0.001, "kd_enabled": false, "init_scale": 0.1},
      "sampler": {"mode": "no-ad", "max_len": 12}, "spec": {"beta": 0.8},
      "paths": {"corpus": "c.jsonl"}, "n_per_class": 7})");
  CHECK(c.train.lr == 0.001);
  CHECK(!c.train.kd_enabled);
  CHECK(c.train.init_scale == 0.1);
  CHECK(c.train.epochs == 200);
  CHECK(c.sampler.mode == DecodeMode::no_ad);
  CHECK(c.sampler.max_len == 12);
  CHECK(c.spec.beta == 0.8);
  CHECK(c.paths.at("corpus") == "c.jsonl");
  CHECK(c.n_per_class == 7);
}

TEST_CASE("unknown keys and bad values are rejected") {
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"learning_rate": 1}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"spec": {"vocab_size": 64}, "extra": 1})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"epochs": "ten"}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"batch_size": -3}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"kd_enabled": 1}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"sampler": {"mode": "beam"}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("{not json"), ConfigError);
  try {
    parse_run_config(R"({"train": {"learning_rate": 1}})");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("train.learning_rate") != std::string::npos);
  }
}

TEST_CASE("a bare spec document and a sidecar are accepted") {
  const RunConfig bare = parse_run_config(R"({"vocab_size": 32, "beta": 0.9})");
  CHECK(bare.spec.vocab_size == 32);
  CHECK(bare.spec.beta == 0.9);
  CHECK_THROWS_AS(parse_run_config(R"({"vocab_size": 32, "bogus": 1})"), ConfigError);

  RunConfig c;
  c.spec.seed = 9;
  c.sampler.lambda = 2.0;
  Json meta;
  meta["command"] = "gen-corpus";
  meta["config"] = to_json(c);
  const RunConfig back = parse_run_config(meta.dump());
  CHECK(back.spec.seed == 9);
  CHECK(back.sampler.lambda == 2.0);
}

TEST_CASE("to_json round trip") {
  RunConfig c;
  c.spec.vocab_size = 20;
  c.spec = c.spec.resolve();
  c.train.init_scale = 0.2;
  c.train.weight_decay = 0.0;
  c.backbone.d_h = 12;
  c.sampler.mode = DecodeMode::unconditional;
  c.paths["x"] = "y";
  const RunConfig back = parse_run_config(to_json(c).dump());
  CHECK(to_json(back).dump() == to_json(c).dump());
}

TEST_CASE("sidecar records input and artifact hashes") {
  TempDir dir("meta");
  const std::string art = dir / "a.bin", in = dir / "in.txt";
  std::ofstream(art) << "artifact";
  std::ofstream(in) << "input";
  write_meta(art, "test", RunConfig{}, {{"source", in}});
  const Json j = Json::parse(slurp(meta_path(art)));
  CHECK(j["command"] == "test");
  CHECK(j["artifact_hash"] == hash_hex(file_hash(art)));
  CHECK(j["inputs"]["source"]["hash"] == hash_hex(file_hash(in)));
  CHECK(j["config"]["train"]["lr"] == 5e-5);
  CHECK(hash_hex(0xabc) == "0000000000000abc");
}

TEST_CASE("cli help lists the default values") {
  const Run gen = cli("generate --help");
  CHECK(gen.code == 0);
  for (const char* v : {"5.0", "0.9", "0.3"}) CHECK(gen.out.find(std::string("(default ") + v + ")") != std::string::npos);
  const Run disc = cli("train-disc --help");
  for (const char* v : {"64", "200", "5e-5"}) CHECK(disc.out.find(std::string("(default ") + v + ")") != std::string::npos);
}

TEST_CASE("cli error categories") {
  TempDir dir("cli");
  const Run missing = cli("train-backbone --corpus " + dir / "none.jsonl" + " --out " + dir / "b.bin");
  CHECK(missing.code == 3);
  CHECK(missing.out.find("error: missing-file:") != std::string::npos);

  const Run no_sub = cli("");
  CHECK(no_sub.code == 2);
  CHECK(cli("generate --bogus 1").code == 2);

  std::ofstream(dir / "cfg.json") << R"({"train": {"nope": 1}})";
  const Run bad_cfg = cli("train-disc --config " + dir / "cfg.json" + " --corpus c --backbone b --out o");
  CHECK(bad_cfg.code == 2);
  CHECK(bad_cfg.out.find("error: bad-config:") != std::string::npos);

  const auto& bb = testutil::small_backbone();
  bb.save(dir / "bb.bin");
  save_discriminator(dir / "other.bin", testutil::random_disc(bb.d_h(), bb.d_e(), 1), bb.hash() ^ 1);
  const Run mismatch = cli("generate --backbone " + dir / "bb.bin" + " --disc " + dir / "other.bin" +
                           " --out " + dir / "s.jsonl");
  CHECK(mismatch.code == 4);
  CHECK(mismatch.out.find("error: hash-mismatch:") != std::string::npos);

  std::ofstream(dir / "junk.bin") << "not a checkpoint";
  const Run junk = cli("generate --mode uncond --backbone " + dir / "junk.bin" + " --out " + dir / "s.jsonl");
  CHECK(junk.code == 5);
  CHECK(junk.out.find("error: bad-format:") != std::string::npos);

  const Run unknown = cli("generate --mode uncond --prefix zzz --backbone " + dir / "bb.bin" + " --out " +
                          dir / "s.jsonl");
  CHECK(unknown.code == 2);
  CHECK(std::count(unknown.out.begin(), unknown.out.end(), '\n') == 1);
}

TEST_CASE("generate with --num 0 writes an empty file") {
  TempDir dir("num0");
  const auto& bb = testutil::small_backbone();
  bb.save(dir / "bb.bin");
  save_discriminator(dir / "d.bin", testutil::random_disc(bb.d_h(), bb.d_e(), 1), bb.hash());
  const Run r = cli("generate --num 0 --backbone " + dir / "bb.bin" + " --disc " + dir / "d.bin" + " --out " +
                    dir / "s.jsonl");
  CHECK(r.code == 0);
  REQUIRE(fs::exists(dir / "s.jsonl"));
  CHECK(fs::file_size(dir / "s.jsonl") == 0);
}

}
