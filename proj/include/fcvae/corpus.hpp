#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "fcvae/error.hpp"

namespace fcvae {

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kEosId = 2;
inline const std::string kPadToken = "<pad>";
inline const std::string kUnkToken = "<unk>";
inline const std::string kEosToken = "<eos>";

class Vocabulary {
 public:
  Vocabulary() : Vocabulary(std::vector<std::string>{kPadToken, kUnkToken, kEosToken}, false) {}

  // `tokens` must start with the three reserved tokens in id order.
  explicit Vocabulary(std::vector<std::string> tokens) : Vocabulary(std::move(tokens), true) {}

  // Reserved tokens followed by every dataset token in first-appearance order.
  template <class Range>
  static Vocabulary from_token_lists(const Range& lists) {
    std::vector<std::string> tokens{kPadToken, kUnkToken, kEosToken};
    std::unordered_map<std::string, int> seen;
    for (const auto& t : tokens) seen.emplace(t, 0);
    for (const auto& list : lists)
      for (const auto& tok : list)
        if (seen.emplace(tok, 0).second) tokens.push_back(tok);
    return Vocabulary(std::move(tokens));
  }

  std::size_t size() const noexcept { return id_to_token_.size(); }

  int id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnkId : it->second;
  }
  bool contains(const std::string& token) const { return token_to_id_.count(token) != 0; }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
      throw ValidationError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(size()));
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  std::vector<int> encode(std::span<const std::string> tokens) const {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(id(t));
    return ids;
  }

  std::vector<std::string> decode(std::span<const int> ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(token(i));
    return out;
  }

  const std::vector<std::string>& tokens() const noexcept { return id_to_token_; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.id_to_token_ == b.id_to_token_; }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write vocabulary to " + path);
    out << nlohmann::json(id_to_token_).dump() << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot read vocabulary from " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(1, std::string("vocabulary: ") + e.what());
    }
    if (!j.is_array()) throw ParseError(1, "vocabulary file must hold a JSON array of tokens");
    return Vocabulary(j.get<std::vector<std::string>>());
  }

 private:
  Vocabulary(std::vector<std::string> tokens, bool validate) : id_to_token_(std::move(tokens)) {
    if (id_to_token_.size() < 3 || id_to_token_[0] != kPadToken || id_to_token_[1] != kUnkToken ||
        id_to_token_[2] != kEosToken)
      throw ConfigError("vocabulary must begin with " + kPadToken + ", " + kUnkToken + ", " + kEosToken);
    if (validate && id_to_token_.size() < 4) throw ConfigError("vocabulary needs at least one non-reserved token");
    for (std::size_t i = 0; i < id_to_token_.size(); ++i)
      if (!token_to_id_.emplace(id_to_token_[i], static_cast<int>(i)).second)
        throw ConfigError("duplicate vocabulary token '" + id_to_token_[i] + "'");
  }

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

// One post with its responses, the unit stored per JSONL line. Responses do
// not carry EOS; it is appended when encoding.
struct Record {
  std::vector<std::string> post;
  std::vector<std::vector<std::string>> responses;
  std::vector<int> gold_focus_slot;  // empty, or one entry per response

  friend bool operator==(const Record&, const Record&) = default;
};

struct Dataset {
  std::vector<Record> records;

  std::size_t pair_count() const {
    std::size_t n = 0;
    for (const auto& r : records) n += r.responses.size();
    return n;
  }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct PostResponsePair {
  std::vector<int> post;
  std::vector<int> response;  // ends with EOS
  std::optional<int> gold_focus_slot;
  std::size_t record_index = 0;
};

// ---------------------------------------------------------------------------
// Synthetic keyword-slot corpus.
//
// Vocabulary layout after the reserved ids: six template words tp0..tp5,
// then n keywords kwNN, n content words ctNN (ctNN "elaborates" kwNN), and
// the remaining ids as filler words flNN. A post holds `slots` distinct
// keywords at random positions among fillers. Every response realizes one
// template around the content word of exactly one of the post's keywords;
// gold_focus_slot is that keyword's rank among the post's keywords in
// position order.

struct SyntheticConfig {
  std::size_t vocab_size = 64;
  std::size_t post_len = 8;
  std::size_t slots = 2;
  std::size_t responses_per_post = 3;
};

namespace synthetic {

inline constexpr std::size_t kTemplateWords = 6;

struct Layout {
  std::size_t keywords = 0;
  std::size_t fillers = 0;
};

inline Layout layout(const SyntheticConfig& c) {
  if (c.slots == 0 || c.post_len < c.slots) throw ConfigError("synthetic grammar needs 1 <= slots <= post_len");
  if (c.responses_per_post == 0) throw ConfigError("synthetic grammar needs at least one response per post");
  const std::size_t reserved = 3 + kTemplateWords;
  if (c.vocab_size <= reserved) throw ConfigError("vocab_size " + std::to_string(c.vocab_size) + " too small for grammar");
  const std::size_t rest = c.vocab_size - reserved;
  Layout l;
  l.keywords = rest / 3;
  l.fillers = rest - 2 * l.keywords;
  if (l.keywords < c.slots || (c.post_len > c.slots && l.fillers == 0))
    throw ConfigError("vocab_size " + std::to_string(c.vocab_size) + " too small for " + std::to_string(c.slots) +
                      " keyword slots");
  return l;
}

inline std::string numbered(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%02zu", prefix, i);
  return buf;
}
inline std::string keyword(std::size_t i) { return numbered("kw", i); }
inline std::string content(std::size_t i) { return numbered("ct", i); }
inline std::string filler(std::size_t i) { return numbered("fl", i); }
inline std::string template_word(std::size_t i) { return "tp" + std::to_string(i); }

inline bool has_numbered_prefix(const std::string& t, const char* prefix) {
  return t.size() > 2 && t.compare(0, 2, prefix) == 0 &&
         std::all_of(t.begin() + 2, t.end(), [](char c) { return c >= '0' && c <= '9'; });
}
inline bool is_keyword(const std::string& t) { return has_numbered_prefix(t, "kw"); }
inline bool is_content(const std::string& t) { return has_numbered_prefix(t, "ct"); }

// The keyword a content word elaborates ("ct07" -> "kw07").
inline std::string keyword_of_content(const std::string& t) { return "kw" + t.substr(2); }

inline Vocabulary vocabulary(const SyntheticConfig& c) {
  const Layout l = layout(c);
  std::vector<std::string> tokens{kPadToken, kUnkToken, kEosToken};
  for (std::size_t i = 0; i < kTemplateWords; ++i) tokens.push_back(template_word(i));
  for (std::size_t i = 0; i < l.keywords; ++i) tokens.push_back(keyword(i));
  for (std::size_t i = 0; i < l.keywords; ++i) tokens.push_back(content(i));
  for (std::size_t i = 0; i < l.fillers; ++i) tokens.push_back(filler(i));
  return Vocabulary(std::move(tokens));
}

// Positions of keyword tokens in a post, in order; index k is slot k.
inline std::vector<std::size_t> keyword_positions(std::span<const std::string> post) {
  std::vector<std::size_t> pos;
  for (std::size_t i = 0; i < post.size(); ++i)
    if (is_keyword(post[i])) pos.push_back(i);
  return pos;
}

// Slot whose keyword the response elaborates: the first content word in the
// response that matches one of the post's keywords.
inline std::optional<int> response_slot(std::span<const std::string> post, std::span<const std::string> response) {
  const auto pos = keyword_positions(post);
  for (const auto& tok : response) {
    if (!is_content(tok)) continue;
    const std::string kw = keyword_of_content(tok);
    for (std::size_t k = 0; k < pos.size(); ++k)
      if (post[pos[k]] == kw) return static_cast<int>(k);
  }
  return std::nullopt;
}

inline std::vector<std::string> realize_template(std::size_t which, const std::string& c) {
  switch (which) {
    case 0: return {template_word(0), c};
    case 1: return {template_word(1), template_word(2), c};
    case 2: return {c, template_word(3)};
    default: return {template_word(4), c, template_word(5)};
  }
}

}  // namespace synthetic

struct SyntheticCorpus {
  Dataset dataset;
  Vocabulary vocab;
};

// Pure function of (seed, n_pairs, config). The final post is truncated when
// n_pairs is not a multiple of responses_per_post.
inline SyntheticCorpus generate_synthetic(std::uint64_t seed, std::size_t n_pairs, const SyntheticConfig& config = {}) {
  const auto lay = synthetic::layout(config);
  SyntheticCorpus out{{}, synthetic::vocabulary(config)};
  std::mt19937_64 rng(seed);
  auto pick = [&rng](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };

  std::size_t produced = 0;
  while (produced < n_pairs) {
    Record rec;
    std::vector<std::size_t> kw_ids(lay.keywords);
    std::iota(kw_ids.begin(), kw_ids.end(), 0);
    std::shuffle(kw_ids.begin(), kw_ids.end(), rng);
    kw_ids.resize(config.slots);
    std::vector<std::size_t> positions(config.post_len);
    std::iota(positions.begin(), positions.end(), 0);
    std::shuffle(positions.begin(), positions.end(), rng);
    positions.resize(config.slots);
    std::sort(positions.begin(), positions.end());

    rec.post.resize(config.post_len);
    for (auto& t : rec.post) t = synthetic::filler(pick(lay.fillers));
    for (std::size_t k = 0; k < config.slots; ++k) rec.post[positions[k]] = synthetic::keyword(kw_ids[k]);

    // Each slot is covered once, the remainder drawn uniformly.
    std::vector<int> targets;
    for (std::size_t r = 0; r < config.responses_per_post; ++r)
      targets.push_back(static_cast<int>(r < config.slots ? r : pick(config.slots)));
    std::shuffle(targets.begin(), targets.end(), rng);

    const std::size_t take = std::min(config.responses_per_post, n_pairs - produced);
    for (std::size_t r = 0; r < take; ++r) {
      const auto slot = static_cast<std::size_t>(targets[r]);
      rec.responses.push_back(
          synthetic::realize_template(pick(4), synthetic::content(kw_ids[slot])));
      rec.gold_focus_slot.push_back(targets[r]);
    }
    produced += take;
    out.dataset.records.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL: {"gold_focus_slot":[...],"post":[...],"responses":[[...],...]}

inline std::string to_jsonl_line(const Record& r) {
  nlohmann::json j;
  j["post"] = r.post;
  j["responses"] = r.responses;
  if (!r.gold_focus_slot.empty()) j["gold_focus_slot"] = r.gold_focus_slot;
  return j.dump();
}

inline void save_jsonl(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write dataset to " + path);
  for (const auto& r : ds.records) out << to_jsonl_line(r) << '\n';
  if (!out) throw Error("write failed for " + path);
}

inline Record parse_jsonl_line(const std::string& line, std::size_t line_no) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line_no, e.what());
  }
  if (!j.is_object()) throw ParseError(line_no, "record is not a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "post" && it.key() != "responses" && it.key() != "gold_focus_slot")
      throw ParseError(line_no, "unknown key \"" + it.key() + "\"");
  if (!j.contains("post")) throw ParseError(line_no, "missing \"post\"");
  if (!j.contains("responses")) throw ParseError(line_no, "missing \"responses\"");
  Record r;
  try {
    r.post = j.at("post").get<std::vector<std::string>>();
    r.responses = j.at("responses").get<std::vector<std::vector<std::string>>>();
    if (j.contains("gold_focus_slot")) r.gold_focus_slot = j.at("gold_focus_slot").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line_no, e.what());
  }
  const std::string where = "line " + std::to_string(line_no) + ": ";
  if (r.post.empty()) throw ValidationError(where + "empty post");
  if (r.responses.empty()) throw ValidationError(where + "no responses");
  for (const auto& resp : r.responses)
    if (resp.empty()) throw ValidationError(where + "empty response");
  if (!r.gold_focus_slot.empty() && r.gold_focus_slot.size() != r.responses.size())
    throw ValidationError(where + "gold_focus_slot needs one entry per response");
  return r;
}

inline Dataset load_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read dataset " + path);
  Dataset ds;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ds.records.push_back(parse_jsonl_line(line, line_no));
  }
  return ds;
}

inline std::vector<std::vector<std::string>> all_token_lists(const Dataset& ds) {
  std::vector<std::vector<std::string>> lists;
  for (const auto& r : ds.records) {
    lists.push_back(r.post);
    for (const auto& resp : r.responses) lists.push_back(resp);
  }
  return lists;
}

// Flattens records into id-encoded pairs, appending EOS to each response.
inline std::vector<PostResponsePair> encode_pairs(const Dataset& ds, const Vocabulary& vocab, std::size_t max_post_len,
                                                  std::size_t max_resp_len) {
  std::vector<PostResponsePair> pairs;
  for (std::size_t ri = 0; ri < ds.records.size(); ++ri) {
    const Record& r = ds.records[ri];
    if (r.post.empty() || r.post.size() > max_post_len)
      throw ValidationError("record " + std::to_string(ri) + ": post length " + std::to_string(r.post.size()) +
                            " outside [1, " + std::to_string(max_post_len) + "]");
    const auto post = vocab.encode(r.post);
    for (std::size_t k = 0; k < r.responses.size(); ++k) {
      PostResponsePair p;
      p.post = post;
      p.response = vocab.encode(r.responses[k]);
      p.response.push_back(kEosId);
      if (p.response.size() > max_resp_len)
        throw ValidationError("record " + std::to_string(ri) + ": response length " + std::to_string(p.response.size()) +
                              " exceeds max_resp_len " + std::to_string(max_resp_len));
      if (!r.gold_focus_slot.empty()) p.gold_focus_slot = r.gold_focus_slot[k];
      p.record_index = ri;
      pairs.push_back(std::move(p));
    }
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Batches, padded to the per-batch maximum lengths.

struct Batch {
  std::size_t size = 0;
  std::size_t post_len = 0;
  std::size_t resp_len = 0;
  std::vector<int> post_ids;  // size x post_len, PAD filled
  std::vector<std::uint8_t> post_mask;
  std::vector<int> resp_ids;  // size x resp_len, PAD filled
  std::vector<std::uint8_t> resp_mask;
  std::vector<std::size_t> post_lengths;
  std::vector<std::size_t> resp_lengths;
  std::vector<std::size_t> pair_indices;

  int post_id(std::size_t b, std::size_t i) const { return post_ids[b * post_len + i]; }
  int resp_id(std::size_t b, std::size_t t) const { return resp_ids[b * resp_len + t]; }
};

inline Batch make_batch(std::span<const PostResponsePair> pairs, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ValidationError("empty batch");
  Batch b;
  b.size = indices.size();
  for (std::size_t i : indices) {
    const auto& p = pairs[i];
    if (p.post.empty() || p.response.empty()) throw ValidationError("pair " + std::to_string(i) + " has an empty sequence");
    b.post_len = std::max(b.post_len, p.post.size());
    b.resp_len = std::max(b.resp_len, p.response.size());
  }
  b.post_ids.assign(b.size * b.post_len, kPadId);
  b.post_mask.assign(b.size * b.post_len, 0);
  b.resp_ids.assign(b.size * b.resp_len, kPadId);
  b.resp_mask.assign(b.size * b.resp_len, 0);
  for (std::size_t r = 0; r < b.size; ++r) {
    const auto& p = pairs[indices[r]];
    for (std::size_t i = 0; i < p.post.size(); ++i) {
      b.post_ids[r * b.post_len + i] = p.post[i];
      b.post_mask[r * b.post_len + i] = 1;
    }
    for (std::size_t t = 0; t < p.response.size(); ++t) {
      b.resp_ids[r * b.resp_len + t] = p.response[t];
      b.resp_mask[r * b.resp_len + t] = 1;
    }
    b.post_lengths.push_back(p.post.size());
    b.resp_lengths.push_back(p.response.size());
    b.pair_indices.push_back(indices[r]);
  }
  return b;
}

// One epoch: every pair exactly once, order a deterministic function of
// shuffle_seed.
inline std::vector<Batch> make_batches(std::span<const PostResponsePair> pairs, std::size_t batch_size,
                                       std::uint64_t shuffle_seed) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (pairs.empty()) throw ValidationError("cannot batch an empty dataset");
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(shuffle_seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Batch> out;
  for (std::size_t s = 0; s < order.size(); s += batch_size) {
    const std::size_t e = std::min(order.size(), s + batch_size);
    out.push_back(make_batch(pairs, std::span<const std::size_t>(order.data() + s, e - s)));
  }
  return out;
}

}  // namespace fcvae
