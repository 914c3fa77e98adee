#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "urec/error.hpp"
#include "urec/hash.hpp"
#include "urec/rng.hpp"

namespace urec {

// ---------------------------------------------------------------------------
// Core records
// ---------------------------------------------------------------------------

struct Interaction {
  std::string user_id;
  std::string item_id;
  std::string item_title;
  int64_t timestamp = 0;
  int label = 0;  // 1 = click, 0 = no click

  friend bool operator==(const Interaction&, const Interaction&) = default;
};

// Closed word-level vocabulary: reserved tokens, the prompt-template words,
// and one token per item title.
class Vocabulary {
public:
  static constexpr int32_t kPad = 0;
  static constexpr int32_t kBos = 1;
  static constexpr int32_t kYes = 2;
  static constexpr int32_t kNo = 3;

  Vocabulary() {
    for (const char* t : {"<pad>", "<bos>", "Yes", "No"}) add(t);
  }

  int32_t add(const std::string& token) {
    auto it = index_.find(token);
    if (it != index_.end()) return it->second;
    const auto id = static_cast<int32_t>(tokens_.size());
    tokens_.push_back(token);
    index_.emplace(token, id);
    return id;
  }

  int32_t id(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end())
      raise(ErrorKind::vocabulary, "token not in vocabulary: \"" + token + "\"");
    return it->second;
  }

  std::optional<int32_t> try_id(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& token(int32_t id) const {
    if (id < 0 || static_cast<size_t>(id) >= tokens_.size())
      raise(ErrorKind::index, "token id out of range: " + std::to_string(id));
    return tokens_[static_cast<size_t>(id)];
  }

  size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

private:
  std::vector<std::string> tokens_;
  std::map<std::string, int32_t> index_;
};

struct RenderedSample {
  std::vector<int32_t> token_ids;  // BOS-prefixed prompt
  int32_t answer_token_id = Vocabulary::kNo;
  std::string user_id;
  int label = 0;

  friend bool operator==(const RenderedSample&, const RenderedSample&) = default;
};

struct DatasetBundle {
  std::vector<RenderedSample> train;
  std::vector<RenderedSample> valid;
  std::vector<RenderedSample> test;
  std::vector<RenderedSample> forgotten;  // D_f, subset of train
  std::vector<RenderedSample> retained;   // D_r = train \ D_f
  std::set<std::string> forgotten_user_ids;
  Vocabulary vocab;
};

// ---------------------------------------------------------------------------
// Prompt rendering
// ---------------------------------------------------------------------------

namespace prompt {

inline const std::vector<std::string>& history_words() {
  static const std::vector<std::string> w = {"The",    "user", "watched", "the",
                                             "following", "movies", "in", "order"};
  return w;
}

inline const std::vector<std::string>& question_words() {
  static const std::vector<std::string> w = {"Please", "deduce", "if",  "he",
                                             "will",   "like",   "the", "movie"};
  return w;
}

inline const std::vector<std::string>& punctuation() {
  static const std::vector<std::string> w = {":", ",", "."};
  return w;
}

inline bool is_punct(const std::string& tok) {
  return tok == ":" || tok == "," || tok == ".";
}

}  // namespace prompt

inline void add_template_tokens(Vocabulary& vocab) {
  for (const auto& w : prompt::history_words()) vocab.add(w);
  for (const auto& w : prompt::question_words()) vocab.add(w);
  for (const auto& w : prompt::punctuation()) vocab.add(w);
}

// Builds the closed vocabulary over the full dataset: reserved + template
// words + one token per distinct item title (sorted for determinism).
inline Vocabulary build_vocabulary(const std::vector<Interaction>& data) {
  Vocabulary vocab;
  add_template_tokens(vocab);
  std::set<std::string> titles;
  for (const auto& it : data) titles.insert(it.item_title);
  for (const auto& t : titles) vocab.add(t);
  return vocab;
}

struct RenderOptions {
  size_t max_history = 10;   // most recent K history items kept
  size_t max_seq_len = 128;  // hard cap on token_ids length
};

// Renders one sample into the tokenized click-question prompt. History is
// truncated to the most recent items, first by max_history and then further
// if the sequence would exceed max_seq_len.
inline RenderedSample render_prompt(const std::vector<std::string>& user_history,
                                    const std::string& candidate, const Vocabulary& vocab,
                                    const RenderOptions& opts = {}, const std::string& user_id = "",
                                    int label = 0) {
  if (candidate.empty()) raise(ErrorKind::validation, "render_prompt: empty candidate title");

  size_t keep = std::min(user_history.size(), opts.max_history);
  // Tokens outside the history list: BOS + question words + candidate + '.'
  // plus, when history is present, the history clause scaffolding.
  const size_t question_len = prompt::question_words().size() + 2;
  auto total_len = [&](size_t k) {
    size_t n = 1 + question_len;  // BOS + question + candidate + '.'
    if (k > 0) n += prompt::history_words().size() + 1 /*colon*/ + k + (k - 1) /*commas*/ + 1 /*dot*/;
    return n;
  };
  while (keep > 0 && total_len(keep) > opts.max_seq_len) --keep;
  if (total_len(keep) > opts.max_seq_len)
    raise(ErrorKind::dimension, "render_prompt: prompt cannot fit in max_seq_len=" +
                                    std::to_string(opts.max_seq_len));

  RenderedSample s;
  s.user_id = user_id;
  s.label = label;
  s.answer_token_id = label == 1 ? Vocabulary::kYes : Vocabulary::kNo;
  s.token_ids.reserve(total_len(keep));
  s.token_ids.push_back(Vocabulary::kBos);
  if (keep > 0) {
    for (const auto& w : prompt::history_words()) s.token_ids.push_back(vocab.id(w));
    s.token_ids.push_back(vocab.id(":"));
    const size_t start = user_history.size() - keep;
    for (size_t i = start; i < user_history.size(); ++i) {
      if (i > start) s.token_ids.push_back(vocab.id(","));
      s.token_ids.push_back(vocab.id(user_history[i]));
    }
    s.token_ids.push_back(vocab.id("."));
  }
  for (const auto& w : prompt::question_words()) s.token_ids.push_back(vocab.id(w));
  s.token_ids.push_back(vocab.id(candidate));
  s.token_ids.push_back(vocab.id("."));
  return s;
}

// Inverse of render_prompt's tokenization: space-joined words, with
// punctuation attached to the preceding token. BOS/PAD are dropped.
inline std::string detokenize(const std::vector<int32_t>& token_ids, const Vocabulary& vocab) {
  std::string out;
  for (int32_t id : token_ids) {
    if (id == Vocabulary::kBos || id == Vocabulary::kPad) continue;
    const std::string& tok = vocab.token(id);
    if (!out.empty() && !prompt::is_punct(tok)) out += ' ';
    out += tok;
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

struct CsvFormat {
  std::string expected_header = "user_id,item_id,item_title,timestamp,label";
  char delimiter = ',';
};

namespace detail {

// RFC-4180-ish split of one line: quoted fields may contain the delimiter
// and doubled quotes.
inline std::vector<std::string> split_csv_line(const std::string& line, char delim, size_t line_no) {
  std::vector<std::string> fields;
  std::string cur;
  bool in_quotes = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"' && cur.empty()) {
      in_quotes = true;
    } else if (c == delim) {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (in_quotes)
    raise(ErrorKind::validation, "line " + std::to_string(line_no) + ": unterminated quote");
  fields.push_back(std::move(cur));
  return fields;
}

inline std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

}  // namespace detail

// Loads and validates interaction rows. Malformed rows are rejected with
// their 1-based line number.
inline std::vector<Interaction> load_interactions(const std::string& path,
                                                  const CsvFormat& format = {}) {
  std::ifstream in(path);
  if (!in) raise(ErrorKind::data, "cannot open interactions file: " + path);

  std::string line;
  if (!std::getline(in, line)) raise(ErrorKind::schema, path + ": empty file, expected header");
  line = detail::strip_cr(line);
  if (line != format.expected_header)
    raise(ErrorKind::schema, path + ": header mismatch, expected \"" + format.expected_header +
                                 "\", got \"" + line + "\"");

  std::vector<Interaction> out;
  size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::strip_cr(line);
    if (line.empty()) continue;
    auto fields = detail::split_csv_line(line, format.delimiter, line_no);
    if (fields.size() != 5)
      raise(ErrorKind::schema, path + ": line " + std::to_string(line_no) + ": expected 5 columns, got " +
                                   std::to_string(fields.size()));
    Interaction it;
    it.user_id = fields[0];
    it.item_id = fields[1];
    it.item_title = fields[2];
    if (it.user_id.empty() || it.item_id.empty() || it.item_title.empty())
      raise(ErrorKind::validation, path + ": line " + std::to_string(line_no) + ": empty identifier field");
    try {
      size_t pos = 0;
      it.timestamp = std::stoll(fields[3], &pos);
      if (pos != fields[3].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      raise(ErrorKind::validation, path + ": line " + std::to_string(line_no) + ": bad timestamp \"" +
                                       fields[3] + "\"");
    }
    if (it.timestamp < 0)
      raise(ErrorKind::validation, path + ": line " + std::to_string(line_no) + ": negative timestamp");
    if (fields[4] == "0")
      it.label = 0;
    else if (fields[4] == "1")
      it.label = 1;
    else
      raise(ErrorKind::validation, path + ": line " + std::to_string(line_no) + ": label must be 0 or 1, got \"" +
                                       fields[4] + "\"");
    out.push_back(std::move(it));
  }
  return out;
}

inline void write_interactions_csv(const std::string& path, const std::vector<Interaction>& data,
                                   const CsvFormat& format = {}) {
  std::ofstream out(path);
  if (!out) raise(ErrorKind::data, "cannot write interactions file: " + path);
  out << format.expected_header << "\n";
  auto quote = [](const std::string& s) {
    std::string q = "\"";
    for (char c : s) {
      if (c == '"') q += "\"\"";
      else q += c;
    }
    q += '"';
    return q;
  };
  for (const auto& it : data)
    out << it.user_id << ',' << it.item_id << ',' << quote(it.item_title) << ',' << it.timestamp
        << ',' << it.label << "\n";
}

// ---------------------------------------------------------------------------
// Splitting and partitioning
// ---------------------------------------------------------------------------

struct SplitRatios {
  double train = 0.6;
  double valid = 0.2;
  double test = 0.2;
};

inline bool chrono_less(const Interaction& a, const Interaction& b) {
  if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
  if (a.user_id != b.user_id) return a.user_id < b.user_id;
  return a.item_id < b.item_id;
}

struct TemporalSplit {
  std::vector<Interaction> train, valid, test;
};

// Global-timestamp split; ties broken by (user_id, item_id) so the cut is
// deterministic for any input order.
inline TemporalSplit temporal_split(std::vector<Interaction> data, const SplitRatios& ratios = {}) {
  if (data.empty()) raise(ErrorKind::data, "temporal_split: empty dataset");
  if (std::abs(ratios.train + ratios.valid + ratios.test - 1.0) > 1e-9)
    raise(ErrorKind::config, "temporal_split: ratios must sum to 1");
  std::sort(data.begin(), data.end(), chrono_less);
  const size_t n = data.size();
  const auto i0 = static_cast<size_t>(std::floor(ratios.train * static_cast<double>(n)));
  const auto i1 = static_cast<size_t>(std::floor((ratios.train + ratios.valid) * static_cast<double>(n)));
  TemporalSplit out;
  out.train.assign(data.begin(), data.begin() + static_cast<ptrdiff_t>(i0));
  out.valid.assign(data.begin() + static_cast<ptrdiff_t>(i0), data.begin() + static_cast<ptrdiff_t>(i1));
  out.test.assign(data.begin() + static_cast<ptrdiff_t>(i1), data.end());
  return out;
}

struct ForgetPartition {
  std::vector<RenderedSample> forgotten;  // D_f
  std::vector<RenderedSample> retained;   // D_r
  std::set<std::string> user_ids;
};

// Samples ceil(fraction * distinct_users) users without replacement; all of
// their training rows leave together.
inline ForgetPartition select_forgotten_users(const std::vector<RenderedSample>& train,
                                              double fraction, uint64_t seed) {
  if (fraction <= 0.0 || fraction >= 1.0)
    raise(ErrorKind::config, "select_forgotten_users: fraction must lie in (0, 1)");
  std::set<std::string> distinct;
  for (const auto& s : train) distinct.insert(s.user_id);
  if (distinct.size() < 2)
    raise(ErrorKind::partition, "select_forgotten_users: need at least 2 distinct users, got " +
                                    std::to_string(distinct.size()));
  std::vector<std::string> users(distinct.begin(), distinct.end());
  const auto want = std::max<size_t>(
      1, static_cast<size_t>(std::ceil(fraction * static_cast<double>(users.size()))));
  Rng rng(derive_seed(seed, "forgotten-users"));
  rng.shuffle(users);
  ForgetPartition out;
  out.user_ids.insert(users.begin(), users.begin() + static_cast<ptrdiff_t>(want));
  for (const auto& s : train) {
    if (out.user_ids.count(s.user_id))
      out.forgotten.push_back(s);
    else
      out.retained.push_back(s);
  }
  if (out.forgotten.empty())
    raise(ErrorKind::partition, "select_forgotten_users: selected users have no training rows");
  return out;
}

// ---------------------------------------------------------------------------
// Rendering a full interaction log
// ---------------------------------------------------------------------------

// Renders every interaction in chronological order. A user's history at a
// given row is that user's previous positively-labeled rows (any split),
// most recent last.
inline std::vector<RenderedSample> render_interactions(const std::vector<Interaction>& sorted_rows,
                                                       const Vocabulary& vocab,
                                                       const RenderOptions& opts = {}) {
  std::map<std::string, std::vector<std::string>> history;
  std::vector<RenderedSample> out;
  out.reserve(sorted_rows.size());
  for (const auto& row : sorted_rows) {
    auto& h = history[row.user_id];
    out.push_back(render_prompt(h, row.item_title, vocab, opts, row.user_id, row.label));
    if (row.label == 1) h.push_back(row.item_title);
  }
  return out;
}

struct BundleOptions {
  SplitRatios ratios;
  double forgotten_fraction = 0.2;
  RenderOptions render;
};

// Full pipeline: sort, split, render, partition.
inline DatasetBundle build_bundle(std::vector<Interaction> data, const BundleOptions& opts,
                                  uint64_t seed) {
  DatasetBundle bundle;
  bundle.vocab = build_vocabulary(data);
  std::sort(data.begin(), data.end(), chrono_less);
  auto rendered = render_interactions(data, bundle.vocab, opts.render);

  TemporalSplit split = temporal_split(std::move(data), opts.ratios);
  const size_t n_train = split.train.size(), n_valid = split.valid.size();
  bundle.train.assign(rendered.begin(), rendered.begin() + static_cast<ptrdiff_t>(n_train));
  bundle.valid.assign(rendered.begin() + static_cast<ptrdiff_t>(n_train),
                      rendered.begin() + static_cast<ptrdiff_t>(n_train + n_valid));
  bundle.test.assign(rendered.begin() + static_cast<ptrdiff_t>(n_train + n_valid), rendered.end());

  auto part = select_forgotten_users(bundle.train, opts.forgotten_fraction, seed);
  bundle.forgotten = std::move(part.forgotten);
  bundle.retained = std::move(part.retained);
  bundle.forgotten_user_ids = std::move(part.user_ids);
  return bundle;
}

// Canonical content hash of a rendered sample stream (manifests, rerun checks).
inline uint64_t hash_samples(const std::vector<RenderedSample>& samples) {
  Fnv1a64 h;
  for (const auto& s : samples) {
    h.update_string(s.user_id);
    h.update_value(s.label);
    h.update_value(s.answer_token_id);
    for (int32_t t : s.token_ids) h.update_value(t);
  }
  return h.digest();
}

// ---------------------------------------------------------------------------
// Synthetic interaction generator
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  size_t n_users = 300;
  size_t n_items = 160;
  size_t n_samples = 3334;
  size_t n_genres = 4;
  // Users mix a cluster-level taste with an idiosyncratic component; the
  // personal part is what an unlearnable model would memorize per user.
  double personal_weight = 0.8;
  double affinity_scale = 2.2;
};

namespace detail {

inline std::string synthetic_title(size_t item_index) {
  static const std::array<const char*, 16> adjectives = {
      "Crimson", "Silent",  "Golden",  "Hollow",  "Electric", "Midnight", "Paper",  "Frozen",
      "Scarlet", "Wandering", "Iron",  "Velvet",  "Broken",   "Lunar",    "Savage", "Gentle"};
  static const std::array<const char*, 10> nouns = {"Harbor",  "Garden", "Mirror", "Empire",
                                                    "Highway", "Orchid", "Canyon", "Lantern",
                                                    "Reverie", "Tide"};
  std::string t = std::string(adjectives[item_index % adjectives.size()]) + " " +
                  nouns[(item_index / adjectives.size()) % nouns.size()];
  const size_t round = item_index / (adjectives.size() * nouns.size());
  if (round > 0) t += " " + std::to_string(round + 1);
  return t;
}

}  // namespace detail

// Deterministic synthetic click log. Click probability follows a per-user
// genre affinity so the task is learnable from prompt text, while the
// personal component gives each user's data something worth forgetting.
inline std::vector<Interaction> generate_synthetic(const SyntheticSpec& spec, uint64_t seed) {
  if (spec.n_users < 2 || spec.n_items < 2 || spec.n_samples == 0 || spec.n_genres == 0)
    raise(ErrorKind::config, "generate_synthetic: degenerate spec");
  Rng rng(derive_seed(seed, "synthetic"));

  // Cluster tastes alternate sign across genres; two clusters, opposite signs.
  std::vector<std::vector<double>> user_pref(spec.n_users, std::vector<double>(spec.n_genres));
  for (size_t u = 0; u < spec.n_users; ++u) {
    const double cluster_sign = (u % 2 == 0) ? 1.0 : -1.0;
    for (size_t g = 0; g < spec.n_genres; ++g) {
      const double base = cluster_sign * ((g % 2 == 0) ? 1.0 : -1.0);
      user_pref[u][g] = base + spec.personal_weight * rng.normal();
    }
  }

  std::vector<Interaction> out;
  out.reserve(spec.n_samples);
  const int width = spec.n_users >= 100 ? 4 : 3;
  auto pad_id = [width](const char* prefix, size_t idx) {
    std::string n = std::to_string(idx);
    while (static_cast<int>(n.size()) < width) n.insert(n.begin(), '0');
    return std::string(prefix) + n;
  };
  for (size_t i = 0; i < spec.n_samples; ++i) {
    const size_t u = rng.below(spec.n_users);
    const size_t item = rng.below(spec.n_items);
    const size_t genre = item % spec.n_genres;
    const double logit = spec.affinity_scale * user_pref[u][genre];
    const double p = 1.0 / (1.0 + std::exp(-logit));
    Interaction it;
    it.user_id = pad_id("u", u);
    it.item_id = pad_id("i", item);
    it.item_title = detail::synthetic_title(item);
    it.timestamp = static_cast<int64_t>(i);
    it.label = rng.bernoulli(p) ? 1 : 0;
    out.push_back(std::move(it));
  }
  return out;
}

}  // namespace urec
