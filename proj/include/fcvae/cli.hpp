#pragma once

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fcvae/checkpoint.hpp"
#include "fcvae/config_io.hpp"
#include "fcvae/corpus.hpp"
#include "fcvae/decoder.hpp"
#include "fcvae/evaluation.hpp"
#include "fcvae/model_check.hpp"
#include "fcvae/training.hpp"

namespace fcvae::cli {

// A required input is missing; reported with the subcommand's usage text.
class UsageError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Everything one invocation can be configured with. Precedence: built-in
// defaults, then the --config file, then flags.
struct RunConfig {
  TrainConfig train;
  bool paper_init = false;  // uniform [-1, 1] initialization
  std::string corpus;       // JSONL dataset (train: training set, eval: test set)
  std::string vocab;        // vocabulary JSON; derived from the corpus when empty
  std::string posts;        // generate: JSONL records with a "post" key
  std::string checkpoint;
  std::string out = ".";
  std::size_t n_pairs = 20000;
  std::size_t post_len = 8;
  std::size_t slots = 2;
  std::size_t responses_per_post = 3;
  std::size_t n_samples = 3;
  std::size_t max_len = 0;  // 0: the checkpoint's max_decode_len
  bool write_alignment = false;
};

inline bool apply_run_key(RunConfig& c, const std::string& k, const nlohmann::json& v) {
  using detail::json_as;
  if (apply_train_key(c.train, k, v)) return true;
  if (k == "paper_init") c.paper_init = json_as<bool>(v, k);
  else if (k == "corpus") c.corpus = json_as<std::string>(v, k);
  else if (k == "vocab") c.vocab = json_as<std::string>(v, k);
  else if (k == "posts") c.posts = json_as<std::string>(v, k);
  else if (k == "checkpoint") c.checkpoint = json_as<std::string>(v, k);
  else if (k == "out") c.out = json_as<std::string>(v, k);
  else if (k == "n_pairs") c.n_pairs = json_as<std::size_t>(v, k);
  else if (k == "post_len") c.post_len = json_as<std::size_t>(v, k);
  else if (k == "slots") c.slots = json_as<std::size_t>(v, k);
  else if (k == "responses_per_post") c.responses_per_post = json_as<std::size_t>(v, k);
  else if (k == "n_samples") c.n_samples = json_as<std::size_t>(v, k);
  else if (k == "max_len") c.max_len = json_as<std::size_t>(v, k);
  else if (k == "write_alignment") c.write_alignment = json_as<bool>(v, k);
  else return false;
  return true;
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j = fcvae::to_json(c.train);
  j["paper_init"] = c.paper_init;
  j["corpus"] = c.corpus;
  j["vocab"] = c.vocab;
  j["posts"] = c.posts;
  j["checkpoint"] = c.checkpoint;
  j["out"] = c.out;
  j["n_pairs"] = c.n_pairs;
  j["post_len"] = c.post_len;
  j["slots"] = c.slots;
  j["responses_per_post"] = c.responses_per_post;
  j["n_samples"] = c.n_samples;
  j["max_len"] = c.max_len;
  j["write_alignment"] = c.write_alignment;
  return j;
}

inline RunConfig load_run_config(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config " + path + " must hold a JSON object");
  for (const auto& [k, v] : j.items())
    if (!apply_run_key(base, k, v)) throw ConfigError("unknown config key '" + k + "' in " + path);
  return base;
}

inline void write_json_file(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline std::filesystem::path prepare_out(const RunConfig& c) {
  std::filesystem::path dir(c.out);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create output directory " + c.out + ": " + ec.message());
  return dir;
}

inline SyntheticConfig synthetic_config(const RunConfig& c) {
  return {c.train.model.vocab_size, c.post_len, c.slots, c.responses_per_post};
}

// Posts file: JSONL objects with a "post" token array. "responses" and
// "gold_focus_slot" may be present (so a corpus file works) and are ignored.
inline std::vector<std::vector<std::string>> load_posts(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read posts file " + path);
  std::vector<std::vector<std::string>> posts;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, e.what());
    }
    if (!j.is_object() || !j.contains("post")) throw ParseError(line_no, "missing \"post\"");
    for (const auto& [k, v] : j.items())
      if (k != "post" && k != "responses" && k != "gold_focus_slot") throw ParseError(line_no, "unknown key \"" + k + "\"");
    std::vector<std::string> p;
    try {
      p = j.at("post").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, e.what());
    }
    if (p.empty()) throw ValidationError("line " + std::to_string(line_no) + ": empty post");
    posts.push_back(std::move(p));
  }
  return posts;
}

inline int cmd_make_corpus(const RunConfig& c, std::ostream& out) {
  const auto dir = prepare_out(c);
  const auto sy = generate_synthetic(c.train.seed, c.n_pairs, synthetic_config(c));
  save_jsonl(sy.dataset, (dir / "corpus.jsonl").string());
  sy.vocab.save((dir / "vocab.json").string());
  write_json_file(to_json(c), dir / "resolved_config.json");
  out << "wrote " << sy.dataset.records.size() << " posts, " << sy.dataset.pair_count() << " pairs, vocabulary of "
      << sy.vocab.size() << " to " << dir.string() << '\n';
  return 0;
}

inline int cmd_train(RunConfig c, std::ostream& out) {
  if (c.corpus.empty()) throw UsageError("train needs --corpus");
  const auto dir = prepare_out(c);
  const Dataset ds = load_jsonl(c.corpus);
  if (ds.records.empty()) throw ValidationError("training corpus " + c.corpus + " is empty");
  const Vocabulary vocab =
      c.vocab.empty() ? Vocabulary::from_token_lists(all_token_lists(ds)) : Vocabulary::load(c.vocab);
  auto pairs = encode_pairs(ds, vocab, c.train.max_post_len, c.train.max_resp_len);
  if (c.paper_init) c.train.model.init_scale = 1.0;
  c.train.model.vocab_size = vocab.size();

  const std::string ckpt = (dir / "checkpoint.bin").string();
  std::optional<Trainer> trainer;
  if (!c.checkpoint.empty()) {
    Checkpoint saved = load_checkpoint(c.checkpoint);
    if (!(saved.vocab == vocab)) throw CompatibilityError("checkpoint vocabulary differs from the corpus vocabulary");
    const std::size_t steps = c.train.total_steps;
    saved.config.total_steps = steps;
    c.train = saved.config;
    trainer.emplace(resume_trainer(saved, std::move(pairs)));
  } else {
    trainer.emplace(c.train, vocab, std::move(pairs));
    c.train = trainer->config();
  }
  vocab.save((dir / "vocab.json").string());
  write_json_file(to_json(c), dir / "resolved_config.json");

  TrainRunOptions o;
  o.log_path = (dir / "loss_log.csv").string();
  o.checkpoint_path = ckpt;
  const std::size_t every = std::max<std::size_t>(1, c.train.total_steps / 20);
  o.on_step = [&out, every](const LogRow& r) {
    if (r.step % every == 0) out << "step " << r.step << " total " << r.losses.total << '\n';
  };
  run_training(*trainer, o);
  out << "trained to step " << trainer->step_count() << "; checkpoint " << ckpt << '\n';
  return 0;
}

inline int cmd_generate(RunConfig c, std::ostream& out) {
  if (c.checkpoint.empty()) throw UsageError("generate needs --checkpoint");
  if (c.posts.empty()) throw UsageError("generate needs --posts");
  const auto dir = prepare_out(c);
  const Checkpoint ck = load_checkpoint(c.checkpoint);
  const auto model = model_from_checkpoint(ck);
  if (c.max_len == 0) c.max_len = ck.config.max_decode_len;
  write_json_file(to_json(c), dir / "resolved_config.json");

  const auto posts = load_posts(c.posts);
  std::mt19937_64 rng(c.train.seed);
  std::ofstream gen(dir / "generations.jsonl", std::ios::binary);
  if (!gen) throw Error("cannot write generations.jsonl");
  for (std::size_t p = 0; p < posts.size(); ++p) {
    const auto ids = ck.vocab.encode(posts[p]);
    const auto results = generate(*model, ids, c.n_samples, rng, c.max_len);
    nlohmann::json line;
    line["post"] = posts[p];
    line["samples"] = nlohmann::json::array();
    for (std::size_t s = 0; s < results.size(); ++s) {
      const auto& g = results[s];
      const std::size_t steps = g.token_ids.size();
      std::vector<double> cov;
      for (double d : g.coverage_final) cov.push_back(d / static_cast<double>(steps));
      line["samples"].push_back({{"tokens", ck.vocab.decode(strip_special(g.token_ids))}, {"focus", g.focus},
                                 {"coverage_over_len", cov}});
      if (c.write_alignment && !g.focus.empty()) {
        const auto rec = coverage_report(g.coverage_final, steps, g.focus);
        write_alignment_csv(rec, posts[p],
                            (dir / ("alignment_" + std::to_string(p) + "_" + std::to_string(s) + ".csv")).string());
      }
    }
    gen << line.dump() << '\n';
  }
  out << "wrote " << posts.size() << " x " << c.n_samples << " generations to " << (dir / "generations.jsonl").string()
      << '\n';
  return 0;
}

inline int cmd_eval(RunConfig c, std::ostream& out) {
  if (c.checkpoint.empty()) throw UsageError("eval needs --checkpoint");
  if (c.corpus.empty()) throw UsageError("eval needs --corpus (the test set)");
  const auto dir = prepare_out(c);
  const Checkpoint ck = load_checkpoint(c.checkpoint);
  const auto model = model_from_checkpoint(ck);
  if (c.max_len == 0) c.max_len = ck.config.max_decode_len;
  const Vocabulary data_vocab = c.vocab.empty() ? ck.vocab : Vocabulary::load(c.vocab);
  write_json_file(to_json(c), dir / "resolved_config.json");

  const Dataset test = load_jsonl(c.corpus);
  EvaluateOptions eo;
  eo.n_samples = c.n_samples;
  eo.seed = c.train.seed;
  eo.max_len = c.max_len;
  const auto res = evaluate(*model, ck.vocab, data_vocab, test, eo);
  write_report(res.report, (dir / "report.json").string());
  write_detail_csv(res.details, ck.vocab, (dir / "details.csv").string());
  out << report_to_json(res.report) << '\n';
  return 0;
}

inline int cmd_gradcheck(const RunConfig& c, std::ostream& out) {
  const auto dir = prepare_out(c);
  write_json_file(to_json(c), dir / "resolved_config.json");
  const auto t0 = std::chrono::steady_clock::now();
  const GradCheckReport r = model_grad_check(c.train.model.variant, c.train.seed);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out << "gradcheck variant=" << to_string(c.train.model.variant) << " seed=" << c.train.seed << '\n' << r;
  char buf[96];
  std::snprintf(buf, sizeof buf, "max relative error %.3e, %.2f s\n", r.max_rel_error(), secs);
  out << buf;
  return r.pass ? 0 : 2;
}

// Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Focus-constrained CVAE response generator: corpus, training, generation, evaluation"};
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all");

  std::string config_path, variant, checkpoint, out_dir, corpus, vocab, posts;
  std::uint64_t seed = 0;
  std::size_t n_samples = 0, max_len = 0, steps = 0, n_pairs = 0;
  bool paper_init = false;

  auto add_common = [&](CLI::App* s) {
    s->add_option("--config", config_path, "JSON config file");
    s->add_option("--seed", seed, "random seed");
    s->add_option("--out", out_dir, "output directory");
  };
  auto* mk = app.add_subcommand("make-corpus", "generate the synthetic keyword-slot corpus");
  add_common(mk);
  mk->add_option("--n-pairs", n_pairs, "number of post-response pairs");

  auto* tr = app.add_subcommand("train", "train a model");
  add_common(tr);
  tr->add_option("--variant", variant, "s2s|foc|foccoverage|focconstrain");
  tr->add_option("--corpus", corpus, "training corpus (JSONL)");
  tr->add_option("--vocab", vocab, "vocabulary JSON");
  tr->add_option("--checkpoint", checkpoint, "resume from this checkpoint");
  tr->add_option("--steps", steps, "total training steps");
  tr->add_flag("--paper-init", paper_init, "initialize uniformly in [-1, 1]");

  auto* ge = app.add_subcommand("generate", "sample responses for a posts file");
  add_common(ge);
  ge->add_option("--checkpoint", checkpoint, "trained checkpoint");
  ge->add_option("--posts", posts, "JSONL posts file");
  ge->add_option("--n-samples", n_samples, "responses per post");
  ge->add_option("--max-len", max_len, "decoding length limit");

  auto* ev = app.add_subcommand("eval", "compute BLEU, Dist and alignment metrics on a test set");
  add_common(ev);
  ev->add_option("--checkpoint", checkpoint, "trained checkpoint");
  ev->add_option("--corpus", corpus, "test corpus (JSONL)");
  ev->add_option("--vocab", vocab, "vocabulary the test corpus was built with");
  ev->add_option("--n-samples", n_samples, "responses per post");
  ev->add_option("--max-len", max_len, "decoding length limit");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the micro model");
  add_common(gc);
  gc->add_option("--variant", variant, "s2s|foc|foccoverage|focconstrain");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    RunConfig c;
    if (!config_path.empty()) c = load_run_config(config_path);
    if (sub->count("--seed")) c.train.seed = seed;
    if (sub->count("--out")) c.out = out_dir;
    if (sub->get_option_no_throw("--variant") && sub->count("--variant")) c.train.model.variant = parse_variant(variant);
    if (sub->get_option_no_throw("--corpus") && sub->count("--corpus")) c.corpus = corpus;
    if (sub->get_option_no_throw("--vocab") && sub->count("--vocab")) c.vocab = vocab;
    if (sub->get_option_no_throw("--posts") && sub->count("--posts")) c.posts = posts;
    if (sub->get_option_no_throw("--checkpoint") && sub->count("--checkpoint")) c.checkpoint = checkpoint;
    if (sub->get_option_no_throw("--steps") && sub->count("--steps")) c.train.total_steps = steps;
    if (sub->get_option_no_throw("--n-samples") && sub->count("--n-samples")) c.n_samples = n_samples;
    if (sub->get_option_no_throw("--max-len") && sub->count("--max-len")) c.max_len = max_len;
    if (sub->get_option_no_throw("--n-pairs") && sub->count("--n-pairs")) c.n_pairs = n_pairs;
    if (sub->get_option_no_throw("--paper-init") && sub->count("--paper-init")) c.paper_init = paper_init;
    if (c.n_samples == 0) throw ValidationError("n_samples must be >= 1");

    const std::string name = sub->get_name();
    if (name == "make-corpus") return cmd_make_corpus(c, out);
    if (name == "train") return cmd_train(c, out);
    if (name == "generate") return cmd_generate(c, out);
    if (name == "eval") return cmd_eval(c, out);
    return cmd_gradcheck(c, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n\n" << sub->help();
    return 1;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.is_validation() ? 1 : 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace fcvae::cli
