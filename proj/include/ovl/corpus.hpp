#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "ovl/common.hpp"

namespace ovl::corpus {

enum class Role { dominant, suppressed };

const char* role_name(Role r);

// Parameters for one knowledge-pair group: m dominant statements sharing
// answer Y_a and n suppressed statements sharing answer Y_b, all built around
// one shared token sequence with a per-statement distinct sequence spliced in
// at insertion_pos.
struct GroupSpec {
  int group_id = 0;
  int m = 1;
  int n = 1;
  int len_share = 1;
  int len_distinct = 1;
  int len_answer = 1;
  int insertion_pos = 0;  // in [0, len_share]
  std::uint64_t seed = 0;

  void validate() const;  // throws Error(invalid_argument)
};

struct Statement {
  int group_id = 0;
  Role role = Role::dominant;
  TokenSeq tokens;      // prompt ++ answer
  int prompt_len = 0;

  std::span<const Token> prompt() const {
    return {tokens.data(), std::size_t(prompt_len)};
  }
  std::span<const Token> answer() const {
    return {tokens.data() + prompt_len, tokens.size() - prompt_len};
  }

  friend bool operator==(const Statement&, const Statement&) = default;
};

struct Group {
  int group_id = 0;
  std::vector<Statement> statements;
  // Present when the group was generated in-process; absent after a file
  // round trip (the on-disk record does not carry generation parameters).
  std::optional<GroupSpec> spec;

  int m() const;
  int n() const;
  // Y_a / Y_b as stored on the statements.
  TokenSeq dominant_answer() const;
  TokenSeq suppressed_answer() const;

  friend bool operator==(const Group& a, const Group& b) {
    return a.group_id == b.group_id && a.statements == b.statements;
  }
};

struct Corpus {
  int vocab_size = 0;
  std::uint64_t global_seed = 0;
  std::vector<Group> groups;

  std::int64_t total_tokens() const;
  int max_statement_len() const;

  friend bool operator==(const Corpus& a, const Corpus& b) {
    return a.vocab_size == b.vocab_size && a.global_seed == b.global_seed &&
           a.groups == b.groups;
  }
};

// Group layout recovered from the statements alone (prompts of one group
// agree exactly outside the spliced distinct sequence, whose tokens are
// unique within the group).
struct GroupShape {
  int len_share = 0;
  int len_distinct = 0;
  int insertion_pos = 0;
  int len_answer = 0;
};

GroupShape infer_shape(const Group& g);

// One corpus holds groups_per_point replicates for every (P, L) pair in the
// cross product of the two schedules. Sweeps pass singleton schedules.
struct CorpusConfig {
  int vocab_size = 256;
  int groups_per_point = 16;
  int n_suppressed = 1;       // n; m follows from the P schedule
  // When > 0, n is derived per P point as round(spg / (P+1)) so that group
  // size (and with it the optimization budget per epoch) stays roughly
  // constant across a P sweep; n_suppressed is then a lower bound of 1.
  int statements_per_group = 0;
  int len_distinct = 4;
  int len_answer = 2;
  std::vector<double> p_schedule{5.0};
  std::vector<double> l_schedule{5.0};
  std::uint64_t global_seed = 0;

  void validate() const;
};

// P = m / n.
double relative_popularity(const Group& g);
// L = (len_share + len_distinct) / len_distinct.
double relative_length(const GroupSpec& spec);
double relative_length(const Group& g);  // via spec or inferred shape

Group build_group(const GroupSpec& spec, int vocab_size);
Corpus build_corpus(const CorpusConfig& config);

void write_corpus(const Corpus& c, const std::filesystem::path& path);
Corpus read_corpus(const std::filesystem::path& path);

}  // namespace ovl::corpus
