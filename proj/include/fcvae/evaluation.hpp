#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "fcvae/corpus.hpp"
#include "fcvae/decoder.hpp"
#include "fcvae/focus_attention.hpp"
#include "fcvae/model.hpp"

namespace fcvae {

template <class T>
using Sentence = std::vector<T>;

// Drops EOS and PAD ids; everything else, UNK included, is an ordinary token.
inline std::vector<int> strip_special(std::span<const int> ids) {
  std::vector<int> out;
  for (int id : ids)
    if (id != kEosId && id != kPadId) out.push_back(id);
  return out;
}

namespace detail {
template <class T>
std::map<std::vector<T>, std::size_t> ngram_counts(const Sentence<T>& s, std::size_t n) {
  std::map<std::vector<T>, std::size_t> c;
  if (s.size() < n) return c;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++c[std::vector<T>(s.begin() + i, s.begin() + i + n)];
  return c;
}
}  // namespace detail

// Corpus-level BLEU-n against per-post reference sets. Each hypothesis of a
// post is clipped against the maximum count of every n-gram over that post's
// references; counts pool over the corpus; orders 1..n combine by geometric
// mean; brevity penalty exp(min(0, 1 - r/c)) with r the closest reference
// length per hypothesis (shorter wins ties). Any order with zero matches
// makes the score 0.
template <class T>
double multi_bleu(const std::vector<std::vector<Sentence<T>>>& hypotheses,
                  const std::vector<std::vector<Sentence<T>>>& references, std::size_t n) {
  if (n < 1) throw ValidationError("multi_bleu: n must be >= 1");
  if (hypotheses.size() != references.size())
    throw DimensionError("multi_bleu: " + std::to_string(hypotheses.size()) + " hypothesis groups vs " +
                         std::to_string(references.size()) + " reference groups");
  std::vector<double> match(n, 0.0), total(n, 0.0);
  double hyp_len = 0.0, ref_len = 0.0;
  for (std::size_t p = 0; p < hypotheses.size(); ++p) {
    const auto& refs = references[p];
    if (refs.empty()) throw ValidationError("multi_bleu: post " + std::to_string(p) + " has no references");
    std::vector<std::map<std::vector<T>, std::size_t>> max_ref(n);
    for (const auto& r : refs)
      for (std::size_t k = 1; k <= n; ++k)
        for (const auto& [g, c] : detail::ngram_counts(r, k)) max_ref[k - 1][g] = std::max(max_ref[k - 1][g], c);
    for (const auto& h : hypotheses[p]) {
      hyp_len += static_cast<double>(h.size());
      std::size_t best = refs.front().size();
      for (const auto& r : refs) {
        const auto d = [&](std::size_t len) { return len > h.size() ? len - h.size() : h.size() - len; };
        if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
      }
      ref_len += static_cast<double>(best);
      for (std::size_t k = 1; k <= n; ++k) {
        for (const auto& [g, c] : detail::ngram_counts(h, k)) {
          auto it = max_ref[k - 1].find(g);
          match[k - 1] += static_cast<double>(std::min(c, it == max_ref[k - 1].end() ? std::size_t{0} : it->second));
          total[k - 1] += static_cast<double>(c);
        }
      }
    }
  }
  if (hyp_len == 0.0) return 0.0;
  double log_p = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (match[k] == 0.0) return 0.0;
    log_p += std::log(match[k] / total[k]);
  }
  const double bp = std::exp(std::min(0.0, 1.0 - ref_len / hyp_len));
  return bp * std::exp(log_p / static_cast<double>(n));
}

enum class DistScope { Intra, Inter };

// Distinct n-grams over total n-grams. Intra: per post, then the mean over
// posts. Inter: pooled over every response. A post (or pool) with no n-grams
// scores 0.
template <class T>
double dist_metrics(const std::vector<std::vector<Sentence<T>>>& groups, std::size_t n, DistScope scope) {
  if (n < 1) throw ValidationError("dist_metrics: n must be >= 1");
  for (std::size_t p = 0; p < groups.size(); ++p)
    for (const auto& r : groups[p])
      if (r.empty()) throw ValidationError("dist_metrics: empty response for post " + std::to_string(p));
  const auto ratio = [n](auto begin, auto end) {
    std::set<std::vector<T>> distinct;
    std::size_t count = 0;
    for (auto it = begin; it != end; ++it)
      for (const auto& r : *it) {
        if (r.size() < n) continue;
        for (std::size_t i = 0; i + n <= r.size(); ++i) distinct.emplace(r.begin() + i, r.begin() + i + n);
        count += r.size() - n + 1;
      }
    return count == 0 ? 0.0 : static_cast<double>(distinct.size()) / static_cast<double>(count);
  };
  if (scope == DistScope::Inter) return ratio(groups.begin(), groups.end());
  if (groups.empty()) return 0.0;
  double sum = 0.0;
  for (auto it = groups.begin(); it != groups.end(); ++it) sum += ratio(it, std::next(it));
  return sum / static_cast<double>(groups.size());
}

struct MetricReport {
  std::string variant;
  double bleu1 = 0.0;
  double bleu2 = 0.0;
  double intra_dist1 = 0.0;
  double intra_dist2 = 0.0;
  double inter_dist1 = 0.0;
  double inter_dist2 = 0.0;
  std::size_t n_posts = 0;
  std::size_t n_responses = 0;
  std::optional<double> mean_alignment_gap;  // absent for S2S, which has no focus

  friend bool operator==(const MetricReport&, const MetricReport&) = default;
};

// Canonical JSON: keys sorted, floats printed with six decimals.
inline std::string report_to_json(const MetricReport& r) {
  char buf[1024];
  const auto f = [](double v) {
    char b[64];
    std::snprintf(b, sizeof b, "%.6f", v);
    return std::string(b);
  };
  std::snprintf(buf, sizeof buf,
                "{\"bleu1\":%s,\"bleu2\":%s,\"inter_dist1\":%s,\"inter_dist2\":%s,\"intra_dist1\":%s,\"intra_dist2\":%s,"
                "\"mean_alignment_gap\":%s,\"n_posts\":%zu,\"n_responses\":%zu,\"variant\":%s}",
                f(r.bleu1).c_str(), f(r.bleu2).c_str(), f(r.inter_dist1).c_str(), f(r.inter_dist2).c_str(),
                f(r.intra_dist1).c_str(), f(r.intra_dist2).c_str(),
                r.mean_alignment_gap ? f(*r.mean_alignment_gap).c_str() : "null", r.n_posts, r.n_responses,
                nlohmann::json(r.variant).dump().c_str());
  return buf;
}

struct GenerationDetail {
  std::size_t post_id = 0;
  std::size_t sample_id = 0;
  std::vector<int> tokens;  // EOS and PAD stripped
  std::optional<double> alignment_gap;
};

struct EvaluationResult {
  MetricReport report;
  std::vector<std::vector<GenerationResult>> generations;  // [post][sample]
  std::vector<GenerationDetail> details;
};

struct EvaluateOptions {
  std::size_t n_samples = 3;
  std::uint64_t seed = 1;
  std::size_t max_len = 32;
  std::size_t chunk_posts = 64;  // posts decoded together; part of the rng contract
};

// Alignment gap of one generation: || D/|y| - F ||_2 with |y| the number of
// decoding steps taken (EOS included).
inline std::optional<double> alignment_gap(const GenerationResult& g) {
  if (g.focus.empty() || g.token_ids.empty()) return std::nullopt;
  return coverage_report(g.coverage_final, g.token_ids.size(), g.focus).distance;
}

// `data_vocab` is the vocabulary the test set was built with; it must equal
// the model's.
inline EvaluationResult evaluate(const Model& model, const Vocabulary& model_vocab, const Vocabulary& data_vocab,
                                 const Dataset& test, const EvaluateOptions& opt) {
  if (model_vocab.size() != model.config().vocab_size)
    throw CompatibilityError("model expects " + std::to_string(model.config().vocab_size) + " tokens, vocabulary has " +
                             std::to_string(model_vocab.size()));
  if (!(model_vocab == data_vocab)) throw CompatibilityError("test set vocabulary differs from the checkpoint vocabulary");
  if (opt.chunk_posts == 0) throw ValidationError("evaluate: chunk_posts must be >= 1");

  std::vector<std::vector<int>> posts;
  std::vector<std::vector<Sentence<int>>> refs;
  for (const auto& rec : test.records) {
    posts.push_back(model_vocab.encode(rec.post));
    auto& r = refs.emplace_back();
    for (const auto& resp : rec.responses) r.push_back(strip_special(model_vocab.encode(resp)));
  }

  EvaluationResult out;
  std::mt19937_64 rng(opt.seed);
  for (std::size_t begin = 0; begin < posts.size(); begin += opt.chunk_posts) {
    const std::size_t end = std::min(posts.size(), begin + opt.chunk_posts);
    std::vector<std::vector<int>> chunk(posts.begin() + static_cast<std::ptrdiff_t>(begin),
                                        posts.begin() + static_cast<std::ptrdiff_t>(end));
    for (auto& g : generate_batch(model, chunk, opt.n_samples, rng, opt.max_len)) out.generations.push_back(std::move(g));
  }

  std::vector<std::vector<Sentence<int>>> hyps(posts.size()), nonempty(posts.size());
  double gap_sum = 0.0;
  std::size_t gap_n = 0;
  for (std::size_t p = 0; p < posts.size(); ++p)
    for (std::size_t s = 0; s < out.generations[p].size(); ++s) {
      const auto& g = out.generations[p][s];
      GenerationDetail d{p, s, strip_special(g.token_ids), alignment_gap(g)};
      hyps[p].push_back(d.tokens);
      if (!d.tokens.empty()) nonempty[p].push_back(d.tokens);
      if (d.alignment_gap) {
        gap_sum += *d.alignment_gap;
        ++gap_n;
      }
      out.details.push_back(std::move(d));
    }

  MetricReport& r = out.report;
  r.variant = to_string(model.variant());
  r.n_posts = posts.size();
  r.n_responses = out.details.size();
  if (!posts.empty()) {
    r.bleu1 = multi_bleu(hyps, refs, 1);
    r.bleu2 = multi_bleu(hyps, refs, 2);
    r.intra_dist1 = dist_metrics(nonempty, 1, DistScope::Intra);
    r.intra_dist2 = dist_metrics(nonempty, 2, DistScope::Intra);
    r.inter_dist1 = dist_metrics(nonempty, 1, DistScope::Inter);
    r.inter_dist2 = dist_metrics(nonempty, 2, DistScope::Inter);
  }
  if (gap_n > 0) r.mean_alignment_gap = gap_sum / static_cast<double>(gap_n);
  return out;
}

// Fraction of posts whose samples disagree on the argmax focus position
// (at least two distinct argmaxes among the samples).
inline double focus_argmax_variation(const std::vector<std::vector<GenerationResult>>& generations) {
  if (generations.empty()) return 0.0;
  std::size_t varied = 0;
  for (const auto& samples : generations) {
    std::set<std::size_t> argmaxes;
    for (const auto& g : samples)
      if (!g.focus.empty())
        argmaxes.insert(static_cast<std::size_t>(std::max_element(g.focus.begin(), g.focus.end()) - g.focus.begin()));
    if (argmaxes.size() >= 2) ++varied;
  }
  return static_cast<double>(varied) / static_cast<double>(generations.size());
}

// Synthetic corpus only: fraction of generations whose content word
// elaborates the keyword at the argmax focus position. A generation with no
// focus, no content word, or an argmax off every keyword counts as a miss.
inline double focus_content_agreement(const Dataset& test, const Vocabulary& vocab,
                                      const std::vector<std::vector<GenerationResult>>& generations) {
  if (generations.size() != test.records.size())
    throw DimensionError("focus_content_agreement: " + std::to_string(generations.size()) + " generation groups for " +
                         std::to_string(test.records.size()) + " posts");
  std::size_t hits = 0, total = 0;
  for (std::size_t p = 0; p < generations.size(); ++p) {
    const auto& post = test.records[p].post;
    const auto kw = synthetic::keyword_positions(post);
    for (const auto& g : generations[p]) {
      ++total;
      if (g.focus.empty()) continue;
      const auto arg = static_cast<std::size_t>(std::max_element(g.focus.begin(), g.focus.end()) - g.focus.begin());
      const auto it = std::find(kw.begin(), kw.end(), arg);
      if (it == kw.end()) continue;
      const auto slot = synthetic::response_slot(post, vocab.decode(strip_special(g.token_ids)));
      if (slot && static_cast<std::size_t>(*slot) == static_cast<std::size_t>(it - kw.begin())) ++hits;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

inline void write_report(const MetricReport& r, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << report_to_json(r) << '\n';
}

inline void write_detail_csv(const std::vector<GenerationDetail>& details, const Vocabulary& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << "post_id,sample_id,tokens,alignment_gap\n";
  char buf[64];
  for (const auto& d : details) {
    out << d.post_id << ',' << d.sample_id << ',';
    for (std::size_t i = 0; i < d.tokens.size(); ++i) out << (i ? " " : "") << vocab.token(d.tokens[i]);
    out << ',';
    if (d.alignment_gap) {
      std::snprintf(buf, sizeof buf, "%.6f", *d.alignment_gap);
      out << buf;
    }
    out << '\n';
  }
}

}  // namespace fcvae
