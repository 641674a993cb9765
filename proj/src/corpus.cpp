#include "ovl/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "json.hpp"

namespace ovl::corpus {

using nlohmann::json;

const char* role_name(Role r) {
  return r == Role::dominant ? "dominant" : "suppressed";
}

void GroupSpec::validate() const {
  if (m < n || n < 1)
    throw Error(ErrorKind::invalid_argument, "group spec requires m >= n >= 1");
  if (len_share < 1 || len_distinct < 1 || len_answer < 1)
    throw Error(ErrorKind::invalid_argument,
                "group spec requires len_share, len_distinct, len_answer >= 1");
  if (insertion_pos < 0 || insertion_pos > len_share)
    throw Error(ErrorKind::invalid_argument,
                "insertion_pos must lie in [0, len_share]");
}

int Group::m() const {
  int c = 0;
  for (const auto& s : statements) c += s.role == Role::dominant;
  return c;
}

int Group::n() const {
  int c = 0;
  for (const auto& s : statements) c += s.role == Role::suppressed;
  return c;
}

TokenSeq Group::dominant_answer() const {
  for (const auto& s : statements)
    if (s.role == Role::dominant) {
      auto a = s.answer();
      return TokenSeq(a.begin(), a.end());
    }
  throw Error(ErrorKind::invalid_argument, "group has no dominant statements");
}

TokenSeq Group::suppressed_answer() const {
  for (const auto& s : statements)
    if (s.role == Role::suppressed) {
      auto a = s.answer();
      return TokenSeq(a.begin(), a.end());
    }
  throw Error(ErrorKind::invalid_argument,
              "group has no suppressed statements");
}

std::int64_t Corpus::total_tokens() const {
  std::int64_t t = 0;
  for (const auto& g : groups)
    for (const auto& s : g.statements) t += std::int64_t(s.tokens.size());
  return t;
}

int Corpus::max_statement_len() const {
  std::size_t m = 0;
  for (const auto& g : groups)
    for (const auto& s : g.statements) m = std::max(m, s.tokens.size());
  return int(m);
}

GroupShape infer_shape(const Group& g) {
  if (g.statements.size() < 2)
    throw Error(ErrorKind::invalid_argument,
                "shape inference needs at least two statements");
  const auto& first = g.statements.front();
  const int plen = first.prompt_len;
  const int alen = int(first.tokens.size()) - plen;
  for (const auto& s : g.statements)
    if (s.prompt_len != plen || int(s.tokens.size()) - s.prompt_len != alen)
      throw Error(ErrorKind::invalid_argument,
                  "group statements disagree on lengths");

  int prefix = plen;
  int suffix = plen;
  const auto p0 = first.prompt();
  for (std::size_t si = 1; si < g.statements.size(); ++si) {
    const auto p = g.statements[si].prompt();
    int a = 0;
    while (a < prefix && p[a] == p0[a]) ++a;
    prefix = a;
    int b = 0;
    while (b < suffix && p[plen - 1 - b] == p0[plen - 1 - b]) ++b;
    suffix = b;
  }
  const int len_distinct = plen - prefix - suffix;
  if (len_distinct < 1)
    throw Error(ErrorKind::invalid_argument,
                "group prompts are identical; no distinct sequence");
  return GroupShape{prefix + suffix, len_distinct, prefix, alen};
}

double relative_popularity(const Group& g) {
  const int n = g.n();
  if (n < 1)
    throw Error(ErrorKind::invalid_argument,
                "relative popularity needs n >= 1");
  return double(g.m()) / double(n);
}

double relative_length(const GroupSpec& spec) {
  if (spec.len_distinct < 1)
    throw Error(ErrorKind::invalid_argument,
                "relative length needs len_distinct >= 1");
  return double(spec.len_share + spec.len_distinct) /
         double(spec.len_distinct);
}

double relative_length(const Group& g) {
  if (g.spec) return relative_length(*g.spec);
  const GroupShape shape = infer_shape(g);
  return double(shape.len_share + shape.len_distinct) /
         double(shape.len_distinct);
}

namespace {

// First `count` entries of a seeded partial Fisher-Yates over [0, V).
TokenSeq sample_unique_tokens(Rng& rng, int vocab_size, int count) {
  std::vector<Token> pool(static_cast<std::size_t>(vocab_size));
  for (int i = 0; i < vocab_size; ++i) pool[std::size_t(i)] = Token(i);
  for (int i = 0; i < count; ++i) {
    const auto j = std::size_t(i) + rng.next_below(std::uint64_t(vocab_size - i));
    std::swap(pool[std::size_t(i)], pool[j]);
  }
  pool.resize(std::size_t(count));
  return pool;
}

TokenSeq splice(std::span<const Token> share, std::span<const Token> distinct,
                int insertion_pos) {
  TokenSeq out;
  out.reserve(share.size() + distinct.size());
  out.insert(out.end(), share.begin(), share.begin() + insertion_pos);
  out.insert(out.end(), distinct.begin(), distinct.end());
  out.insert(out.end(), share.begin() + insertion_pos, share.end());
  return out;
}

}  // namespace

Group build_group(const GroupSpec& spec, int vocab_size) {
  spec.validate();
  const std::int64_t need = std::int64_t(spec.len_share) +
                            std::int64_t(spec.m + spec.n) * spec.len_distinct +
                            2 * std::int64_t(spec.len_answer);
  if (need > vocab_size)
    throw Error(ErrorKind::vocabulary_exhausted,
                "group needs " + std::to_string(need) +
                    " unique tokens but vocab_size is " +
                    std::to_string(vocab_size));

  Rng rng(spec.seed);
  const TokenSeq draw = sample_unique_tokens(rng, vocab_size, int(need));
  auto at = draw.begin();
  auto take = [&](int k) {
    std::span<const Token> s{&*at, std::size_t(k)};
    at += k;
    return s;
  };

  const auto share = take(spec.len_share);
  std::vector<std::span<const Token>> distinct_a, distinct_b;
  for (int i = 0; i < spec.m; ++i) distinct_a.push_back(take(spec.len_distinct));
  for (int j = 0; j < spec.n; ++j) distinct_b.push_back(take(spec.len_distinct));
  const auto answer_a = take(spec.len_answer);
  const auto answer_b = take(spec.len_answer);

  Group g;
  g.group_id = spec.group_id;
  g.spec = spec;
  auto emit = [&](Role role, std::span<const Token> distinct,
                  std::span<const Token> answer) {
    Statement s;
    s.group_id = spec.group_id;
    s.role = role;
    s.tokens = splice(share, distinct, spec.insertion_pos);
    s.prompt_len = int(s.tokens.size());
    s.tokens.insert(s.tokens.end(), answer.begin(), answer.end());
    g.statements.push_back(std::move(s));
  };
  for (int i = 0; i < spec.m; ++i) emit(Role::dominant, distinct_a[std::size_t(i)], answer_a);
  for (int j = 0; j < spec.n; ++j) emit(Role::suppressed, distinct_b[std::size_t(j)], answer_b);
  return g;
}

void CorpusConfig::validate() const {
  if (p_schedule.empty() || l_schedule.empty())
    throw Error(ErrorKind::invalid_argument, "schedules must be non-empty");
  if (groups_per_point < 1)
    throw Error(ErrorKind::invalid_argument, "groups_per_point must be >= 1");
  if (n_suppressed < 1 || len_distinct < 1 || len_answer < 1)
    throw Error(ErrorKind::invalid_argument,
                "n_suppressed, len_distinct, len_answer must be >= 1");
  if (vocab_size < 2)
    throw Error(ErrorKind::invalid_argument, "vocab_size must be >= 2");
  for (double p : p_schedule)
    if (p < 1.0)
      throw Error(ErrorKind::invalid_argument, "P schedule values must be >= 1");
  for (double l : l_schedule)
    if (std::llround((l - 1.0) * len_distinct) < 1)
      throw Error(ErrorKind::invalid_argument,
                  "L schedule values must give len_share >= 1");
}

Corpus build_corpus(const CorpusConfig& config) {
  config.validate();
  Corpus corpus;
  corpus.vocab_size = config.vocab_size;
  corpus.global_seed = config.global_seed;

  std::set<TokenSeq> shares_seen;
  int group_id = 0;
  for (double p : config.p_schedule) {
    for (double l : config.l_schedule) {
      for (int rep = 0; rep < config.groups_per_point; ++rep) {
        const std::uint64_t base =
            derive_seed(config.global_seed, std::uint64_t(group_id));
        GroupSpec spec;
        spec.group_id = group_id;
        spec.n = config.statements_per_group > 0
                     ? std::max(1, int(std::llround(
                                     config.statements_per_group / (p + 1.0))))
                     : config.n_suppressed;
        spec.m = int(std::llround(p * spec.n));
        if (std::abs(double(spec.m) - p * spec.n) > 1e-9)
          throw Error(ErrorKind::invalid_argument,
                      "P value cannot be realized exactly as m/n");
        spec.len_distinct = config.len_distinct;
        spec.len_share = int(std::llround((l - 1.0) * config.len_distinct));
        spec.len_answer = config.len_answer;
        Rng pos_rng(derive_seed(base, 1));
        spec.insertion_pos =
            int(pos_rng.next_below(std::uint64_t(spec.len_share) + 1));

        // X_share must be unique across groups; collide -> reseed, cap 64.
        Group g;
        bool placed = false;
        for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
          spec.seed = derive_seed(base, 2 + attempt);
          g = build_group(spec, config.vocab_size);
          TokenSeq share(g.statements.front().prompt().begin(),
                         g.statements.front().prompt().end());
          share.erase(share.begin() + spec.insertion_pos,
                      share.begin() + spec.insertion_pos + spec.len_distinct);
          if (shares_seen.insert(share).second) {
            placed = true;
            break;
          }
        }
        if (!placed)
          throw Error(ErrorKind::vocabulary_exhausted,
                      "could not draw a fresh X_share after 64 attempts "
                      "(group " + std::to_string(group_id) + ")");
        corpus.groups.push_back(std::move(g));
        ++group_id;
      }
    }
  }
  return corpus;
}

// ------------------------------------------------------------------ file io
//
// One JSON object per line, LF-terminated. Line 1 is the header.

void write_corpus(const Corpus& c, const std::filesystem::path& path) {
  std::string out;
  json header;
  header["format_version"] = 1;
  header["global_seed"] = c.global_seed;
  header["vocab_size"] = c.vocab_size;
  out += header.dump();
  out += '\n';
  for (const auto& g : c.groups) {
    for (const auto& s : g.statements) {
      json rec;
      rec["group_id"] = s.group_id;
      rec["role"] = role_name(s.role);
      rec["tokens"] = s.tokens;
      rec["prompt_len"] = s.prompt_len;
      out += rec.dump();
      out += '\n';
    }
  }
  atomic_write_file(path, out);
}

namespace {

[[noreturn]] void malformed(int line, const std::string& what) {
  throw Error(ErrorKind::malformed,
              "corpus line " + std::to_string(line) + ": " + what);
}

}  // namespace

Corpus read_corpus(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  std::istringstream in(text);
  std::string line;
  int lineno = 0;

  Corpus c;
  if (!std::getline(in, line)) malformed(1, "missing header");
  ++lineno;
  try {
    const json header = json::parse(line);
    if (!header.is_object() || header.value("format_version", -1) != 1)
      malformed(lineno, "bad header or unsupported format_version");
    c.vocab_size = header.at("vocab_size").get<int>();
    c.global_seed = header.at("global_seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    malformed(lineno, e.what());
  }
  if (c.vocab_size < 1) malformed(lineno, "vocab_size must be >= 1");

  std::map<int, std::size_t> group_index;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) malformed(lineno, "empty record");
    Statement s;
    try {
      const json rec = json::parse(line);
      s.group_id = rec.at("group_id").get<int>();
      const std::string role = rec.at("role").get<std::string>();
      if (role == "dominant")
        s.role = Role::dominant;
      else if (role == "suppressed")
        s.role = Role::suppressed;
      else
        malformed(lineno, "unknown role: " + role);
      s.tokens = rec.at("tokens").get<TokenSeq>();
      s.prompt_len = rec.at("prompt_len").get<int>();
    } catch (const json::exception& e) {
      malformed(lineno, e.what());
    }
    if (s.prompt_len < 1 || std::size_t(s.prompt_len) >= s.tokens.size())
      malformed(lineno, "prompt_len out of range");
    for (Token t : s.tokens)
      if (t < 0 || t >= c.vocab_size) malformed(lineno, "token out of vocab");

    auto it = group_index.find(s.group_id);
    if (it == group_index.end()) {
      group_index.emplace(s.group_id, c.groups.size());
      Group g;
      g.group_id = s.group_id;
      c.groups.push_back(std::move(g));
      it = group_index.find(s.group_id);
    }
    c.groups[it->second].statements.push_back(std::move(s));
  }
  if (c.groups.empty()) malformed(lineno + 1, "corpus has no statements");
  return c;
}

}  // namespace ovl::corpus
