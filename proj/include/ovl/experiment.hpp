#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ovl/common.hpp"
#include "ovl/corpus.hpp"
#include "ovl/lm.hpp"
#include "ovl/probe.hpp"
#include "ovl/scaling_law.hpp"

namespace ovl::experiment {

struct SweepSpec {
  std::string variable = "P";  // "P" | "L" | "S"
  std::vector<double> values;  // P or L points
  std::vector<lm::ModelConfig> model_points;  // S points
  int seeds = 1;               // replicate seeds per point
};

// One experiment = one JSON file; CLI flags override individual fields.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  bool seed_set = false;  // seed is mandatory; no entropy default
  std::string out_dir = "out";
  double plausibility_alpha = 0.01;
  int jobs = 1;
  // default_p / default_l are the fixed values of the variable not swept
  corpus::CorpusConfig corpus;  // p_schedule/l_schedule hold the defaults
  lm::ModelConfig model;        // vocab_size mirrors corpus.vocab_size
  lm::TrainConfig train;
  SweepSpec sweep;
};

ExperimentConfig default_config();
ExperimentConfig load_config(const std::filesystem::path& path);
void apply_json_overrides(ExperimentConfig& cfg, const std::string& json_text);

// Canonical dump (sorted keys, full field set); its FNV-1a hash is the
// provenance id stamped into every output file.
std::string config_to_json(const ExperimentConfig& cfg);
std::uint64_t config_hash(const ExperimentConfig& cfg);
std::string provenance_line(const ExperimentConfig& cfg);  // "# ...\n"

// Derived seeds for the pipeline stages of one sweep point.
std::uint64_t point_corpus_seed(const ExperimentConfig& cfg, int point,
                                int seed_index);
std::uint64_t point_train_seed(const ExperimentConfig& cfg, int point,
                               int seed_index);

corpus::CorpusConfig corpus_config_for_point(const ExperimentConfig& cfg,
                                             const std::string& variable,
                                             double value, int point,
                                             int seed_index);

struct SweepPoint {
  double x = 0;        // P value, L value, or param count
  int seed_index = 0;
  probe::SweepRow row;
};

struct SweepResult {
  std::vector<SweepPoint> points;  // sorted by (x, seed_index)
  law::LawFit fit;                 // over all (x, R) points
};

// gen -> train -> probe per (point x seed), up to cfg.jobs in parallel; the
// merged table is order-normalized. When artifacts_dir is non-empty, each
// point writes corpus.jsonl and checkpoint.bin under it.
SweepResult run_sweep(const ExperimentConfig& cfg,
                      const std::filesystem::path& artifacts_dir = {},
                      bool verbose = false);

// Parses a rate CSV (comment lines ignored); returns one map per data row
// keyed by header column.
std::vector<std::map<std::string, double>> parse_csv(const std::string& text);

}  // namespace ovl::experiment
