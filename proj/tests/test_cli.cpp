#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fcvae/cli.hpp"

using namespace fcvae;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "fcvae");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path workdir(const std::string& name) {
  auto d = fs::temp_directory_path() / "fcvae_test_cli" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small enough to train in well under a second.
void write_tiny_config(const fs::path& path) {
  std::ofstream(path) << R"({"d_h": 8, "d_z": 4, "batch_size": 8, "total_steps": 6, "warmup_steps": 3,
                             "kl_anneal_steps": 4, "peak_lr": 0.01, "n_pairs": 60, "seed": 3})";
}

}  // namespace

TEST_CASE("gradcheck subcommand passes and reports per-parameter errors") {
  const auto d = workdir("gc");
  const Result r = run_cli({"gradcheck", "--variant", "focconstrain", "--seed", "1", "--out", d.string()});
  CHECK(r.code == 0);
  CHECK(r.out.find("max relative error") != std::string::npos);
  CHECK(r.out.find("out.W_d") != std::string::npos);
  CHECK(fs::exists(d / "resolved_config.json"));
}

TEST_CASE("usage errors exit with 1") {
  const Result eval = run_cli({"eval", "--corpus", "x.jsonl"});
  CHECK(eval.code == 1);
  CHECK(eval.err.find("--checkpoint") != std::string::npos);
  CHECK(eval.err.find("Usage") != std::string::npos);
  CHECK(run_cli({"train", "--bogus"}).code == 1);
  CHECK(run_cli({"explode"}).code == 1);
  CHECK(run_cli({}).code == 1);
  CHECK(run_cli({"gradcheck", "--variant", "vae"}).code == 1);
  CHECK(run_cli({"train", "--corpus", "/nonexistent/corpus.jsonl", "--out", workdir("none").string()}).code == 1);
}

TEST_CASE("config files reject unknown keys") {
  const auto d = workdir("badcfg");
  std::ofstream(d / "c.json") << R"({"d_h": 8, "learning_rate": 0.1})";
  const Result r = run_cli({"make-corpus", "--config", (d / "c.json").string(), "--out", d.string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("learning_rate") != std::string::npos);
}

TEST_CASE("make-corpus, train twice, generate and eval") {
  const auto d = workdir("pipeline");
  write_tiny_config(d / "c.json");
  const std::string cfg = (d / "c.json").string();

  REQUIRE(run_cli({"make-corpus", "--config", cfg, "--out", (d / "corpus").string()}).code == 0);
  CHECK(slurp(d / "corpus" / "corpus.jsonl") == [] {
    std::string s;
    for (const auto& r : generate_synthetic(3, 60).dataset.records) s += to_jsonl_line(r) + "\n";
    return s;
  }());
  const std::string corpus = (d / "corpus" / "corpus.jsonl").string();
  const std::string vocab = (d / "corpus" / "vocab.json").string();

  for (const char* run : {"a", "b"}) {
    const Result r = run_cli({"train", "--config", cfg, "--corpus", corpus, "--vocab", vocab, "--variant", "focconstrain",
                              "--out", (d / run).string()});
    INFO(r.err);
    REQUIRE(r.code == 0);
  }
  const std::string log = slurp(d / "a" / "loss_log.csv");
  CHECK(log == slurp(d / "b" / "loss_log.csv"));
  CHECK(log.rfind("step,l_seq,l_foc,l_kl,l_bow,gamma,lr,total\n", 0) == 0);
  CHECK(std::count(log.begin(), log.end(), '\n') == 7);
  CHECK(slurp(d / "a" / "checkpoint.bin") == slurp(d / "b" / "checkpoint.bin"));

  // The resolved config alone reproduces the run.
  const Result again = run_cli({"train", "--config", (d / "a" / "resolved_config.json").string(), "--out", (d / "c").string()});
  INFO(again.err);
  REQUIRE(again.code == 0);
  CHECK(slurp(d / "c" / "loss_log.csv") == log);

  // Resume to 9 steps from the 6-step checkpoint.
  const Result resumed = run_cli({"train", "--config", cfg, "--corpus", corpus, "--vocab", vocab, "--checkpoint",
                                  (d / "a" / "checkpoint.bin").string(), "--steps", "9", "--out", (d / "r").string()});
  INFO(resumed.err);
  REQUIRE(resumed.code == 0);
  CHECK(load_checkpoint((d / "r" / "checkpoint.bin").string()).step == 9);

  const Result gen = run_cli({"generate", "--checkpoint", (d / "a" / "checkpoint.bin").string(), "--posts", corpus,
                              "--n-samples", "2", "--max-len", "5", "--out", (d / "gen").string()});
  INFO(gen.err);
  REQUIRE(gen.code == 0);
  std::ifstream in(d / "gen" / "generations.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("samples").size() == 2);
    CHECK(j.at("samples")[0].at("focus").size() == j.at("post").size());
    CHECK(j.at("samples")[0].at("tokens").size() <= 5);
    ++lines;
  }
  CHECK(lines == 20);

  const auto test = d / "test";
  REQUIRE(run_cli({"make-corpus", "--config", cfg, "--seed", "8", "--n-pairs", "9", "--out", test.string()}).code == 0);
  const Result ev = run_cli({"eval", "--checkpoint", (d / "a" / "checkpoint.bin").string(), "--corpus",
                             (test / "corpus.jsonl").string(), "--vocab", (test / "vocab.json").string(), "--out",
                             (d / "ev").string()});
  INFO(ev.err);
  REQUIRE(ev.code == 0);
  const auto report = nlohmann::json::parse(slurp(d / "ev" / "report.json"));
  CHECK(report.at("n_posts") == 3);
  CHECK(report.at("n_responses") == 9);
  CHECK(report.at("variant") == "focconstrain");
  CHECK(slurp(d / "ev" / "details.csv").rfind("post_id,sample_id,tokens,alignment_gap\n", 0) == 0);
  const Result ev2 = run_cli({"eval", "--checkpoint", (d / "a" / "checkpoint.bin").string(), "--corpus",
                              (test / "corpus.jsonl").string(), "--out", (d / "ev2").string()});
  CHECK(ev2.code == 0);
  CHECK(slurp(d / "ev2" / "report.json") == slurp(d / "ev" / "report.json"));
}

TEST_CASE("corrupt checkpoint is a runtime failure") {
  const auto d = workdir("corrupt");
  std::ofstream(d / "bad.bin", std::ios::binary) << "FCVAECKP garbage that is long enough";
  std::ofstream(d / "posts.jsonl") << R"({"post":["a"]})" << '\n';
  const Result r = run_cli({"generate", "--checkpoint", (d / "bad.bin").string(), "--posts", (d / "posts.jsonl").string(),
                            "--out", d.string()});
  CHECK(r.code == 2);
}

TEST_CASE("the installed binary maps exit codes") {
  const std::string bin = FCVAE_CLI_PATH;
  const auto d = workdir("binary");
  const std::string quiet = " > " + (d / "log.txt").string() + " 2>&1";
  auto code = [&](const std::string& args) {
    const int status = std::system((bin + " " + args + quiet).c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  CHECK(code("gradcheck --variant foc --seed 2 --out " + d.string()) == 0);
  CHECK(code("eval") == 1);
  CHECK(code("--nope") == 1);
}
