#include "ovl/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "ovl/provider.hpp"

namespace ovl::experiment {

using nlohmann::json;

ExperimentConfig default_config() {
  ExperimentConfig cfg;
  cfg.corpus.vocab_size = 256;
  cfg.corpus.groups_per_point = 16;
  cfg.corpus.n_suppressed = 1;
  cfg.corpus.len_distinct = 4;
  cfg.corpus.len_answer = 2;
  cfg.corpus.p_schedule = {5.0};
  cfg.corpus.l_schedule = {5.0};
  cfg.model.vocab_size = cfg.corpus.vocab_size;
  cfg.model.d_model = 64;
  cfg.model.n_layers = 2;
  cfg.model.n_heads = 2;
  cfg.model.context_len = 48;
  cfg.model.mlp_mult = 4;
  cfg.model.precision = Precision::f32;
  cfg.train.lr = 3e-4;
  cfg.train.weight_decay = 1e-2;
  cfg.train.epochs = 200;
  cfg.train.batch_size = 16;
  cfg.train.plateau_patience = 10;
  cfg.train.plateau_tol = 1e-3;
  return cfg;
}

namespace {

lm::ModelConfig model_from_json(const json& j, lm::ModelConfig base) {
  if (j.contains("d_model")) base.d_model = j.at("d_model").get<int>();
  if (j.contains("n_layers")) base.n_layers = j.at("n_layers").get<int>();
  if (j.contains("n_heads")) base.n_heads = j.at("n_heads").get<int>();
  if (j.contains("context_len")) base.context_len = j.at("context_len").get<int>();
  if (j.contains("mlp_mult")) base.mlp_mult = j.at("mlp_mult").get<int>();
  if (j.contains("precision")) {
    const std::string p = j.at("precision").get<std::string>();
    if (p == "f32")
      base.precision = Precision::f32;
    else if (p == "f64")
      base.precision = Precision::f64;
    else
      throw Error(ErrorKind::invalid_argument, "precision must be f32 or f64");
  }
  return base;
}

void config_from_json(ExperimentConfig& cfg, const json& j) {
  if (j.contains("seed")) {
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.seed_set = true;
  }
  if (j.contains("out_dir")) cfg.out_dir = j.at("out_dir").get<std::string>();
  if (j.contains("plausibility_alpha"))
    cfg.plausibility_alpha = j.at("plausibility_alpha").get<double>();
  if (j.contains("jobs")) cfg.jobs = j.at("jobs").get<int>();

  if (j.contains("corpus")) {
    const json& c = j.at("corpus");
    auto& cc = cfg.corpus;
    if (c.contains("vocab_size")) cc.vocab_size = c.at("vocab_size").get<int>();
    if (c.contains("groups_per_point"))
      cc.groups_per_point = c.at("groups_per_point").get<int>();
    if (c.contains("n_suppressed"))
      cc.n_suppressed = c.at("n_suppressed").get<int>();
    if (c.contains("statements_per_group"))
      cc.statements_per_group = c.at("statements_per_group").get<int>();
    if (c.contains("len_distinct"))
      cc.len_distinct = c.at("len_distinct").get<int>();
    if (c.contains("len_answer")) cc.len_answer = c.at("len_answer").get<int>();
    if (c.contains("default_p"))
      cc.p_schedule = {c.at("default_p").get<double>()};
    if (c.contains("default_l"))
      cc.l_schedule = {c.at("default_l").get<double>()};
  }
  if (j.contains("model")) cfg.model = model_from_json(j.at("model"), cfg.model);
  cfg.model.vocab_size = cfg.corpus.vocab_size;

  if (j.contains("train")) {
    const json& t = j.at("train");
    auto& tc = cfg.train;
    if (t.contains("lr")) tc.lr = t.at("lr").get<double>();
    if (t.contains("weight_decay"))
      tc.weight_decay = t.at("weight_decay").get<double>();
    if (t.contains("epochs")) tc.epochs = t.at("epochs").get<int>();
    if (t.contains("batch_size")) tc.batch_size = t.at("batch_size").get<int>();
    if (t.contains("beta1")) tc.beta1 = t.at("beta1").get<double>();
    if (t.contains("beta2")) tc.beta2 = t.at("beta2").get<double>();
    if (t.contains("adam_eps")) tc.adam_eps = t.at("adam_eps").get<double>();
    if (t.contains("threads")) tc.threads = t.at("threads").get<int>();
    if (t.contains("plateau_patience"))
      tc.plateau_patience = t.at("plateau_patience").get<int>();
    if (t.contains("plateau_tol"))
      tc.plateau_tol = t.at("plateau_tol").get<double>();
  }

  if (j.contains("sweep")) {
    const json& s = j.at("sweep");
    if (s.contains("variable"))
      cfg.sweep.variable = s.at("variable").get<std::string>();
    if (s.contains("values"))
      cfg.sweep.values = s.at("values").get<std::vector<double>>();
    if (s.contains("seeds")) cfg.sweep.seeds = s.at("seeds").get<int>();
    if (s.contains("model_points")) {
      cfg.sweep.model_points.clear();
      for (const auto& mp : s.at("model_points"))
        cfg.sweep.model_points.push_back(model_from_json(mp, cfg.model));
    }
  }
}

}  // namespace

ExperimentConfig load_config(const std::filesystem::path& path) {
  ExperimentConfig cfg = default_config();
  const std::string text = read_file(path);
  try {
    config_from_json(cfg, json::parse(text));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::malformed,
                "config " + path.string() + ": " + e.what());
  }
  return cfg;
}

void apply_json_overrides(ExperimentConfig& cfg, const std::string& json_text) {
  try {
    config_from_json(cfg, json::parse(json_text));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::malformed, std::string("bad override: ") + e.what());
  }
}

std::string config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;
  j["plausibility_alpha"] = cfg.plausibility_alpha;
  j["jobs"] = cfg.jobs;
  j["corpus"] = {{"vocab_size", cfg.corpus.vocab_size},
                 {"groups_per_point", cfg.corpus.groups_per_point},
                 {"n_suppressed", cfg.corpus.n_suppressed},
                 {"statements_per_group", cfg.corpus.statements_per_group},
                 {"len_distinct", cfg.corpus.len_distinct},
                 {"len_answer", cfg.corpus.len_answer},
                 {"default_p", cfg.corpus.p_schedule},
                 {"default_l", cfg.corpus.l_schedule}};
  auto model_json = [](const lm::ModelConfig& m) {
    return json{{"vocab_size", m.vocab_size},
                {"d_model", m.d_model},
                {"n_layers", m.n_layers},
                {"n_heads", m.n_heads},
                {"context_len", m.context_len},
                {"mlp_mult", m.mlp_mult},
                {"precision", precision_name(m.precision)}};
  };
  j["model"] = model_json(cfg.model);
  j["train"] = {{"lr", cfg.train.lr},
                {"weight_decay", cfg.train.weight_decay},
                {"epochs", cfg.train.epochs},
                {"batch_size", cfg.train.batch_size},
                {"beta1", cfg.train.beta1},
                {"beta2", cfg.train.beta2},
                {"adam_eps", cfg.train.adam_eps},
                {"threads", cfg.train.threads},
                {"plateau_patience", cfg.train.plateau_patience},
                {"plateau_tol", cfg.train.plateau_tol}};
  j["sweep"] = {{"variable", cfg.sweep.variable},
                {"values", cfg.sweep.values},
                {"seeds", cfg.sweep.seeds}};
  j["sweep"]["model_points"] = json::array();
  for (const auto& mp : cfg.sweep.model_points)
    j["sweep"]["model_points"].push_back(model_json(mp));
  return j.dump();
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  const std::string s = config_to_json(cfg);
  return fnv1a64(s.data(), s.size());
}

std::string provenance_line(const ExperimentConfig& cfg) {
  return "# config_hash=" + hex64(config_hash(cfg)) +
         " seed=" + std::to_string(cfg.seed) + "\n";
}

std::uint64_t point_corpus_seed(const ExperimentConfig& cfg, int point,
                                int seed_index) {
  return derive_seed(cfg.seed, 0xC0000000ull + std::uint64_t(point) * 4096 +
                                   std::uint64_t(seed_index));
}

std::uint64_t point_train_seed(const ExperimentConfig& cfg, int point,
                               int seed_index) {
  return derive_seed(cfg.seed, 0x70000000ull + std::uint64_t(point) * 4096 +
                                   std::uint64_t(seed_index));
}

corpus::CorpusConfig corpus_config_for_point(const ExperimentConfig& cfg,
                                             const std::string& variable,
                                             double value, int point,
                                             int seed_index) {
  corpus::CorpusConfig cc = cfg.corpus;
  if (variable == "P")
    cc.p_schedule = {value};
  else if (variable == "L")
    cc.l_schedule = {value};
  else if (variable != "S")
    throw Error(ErrorKind::invalid_argument,
                "sweep variable must be P, L or S");
  cc.global_seed = point_corpus_seed(cfg, point, seed_index);
  return cc;
}

namespace {

// Runs tasks with at most `jobs` worker threads; results land in fixed
// slots, keeping the merged output independent of scheduling.
void parallel_tasks(int count, int jobs, const std::function<void(int)>& task) {
  if (jobs <= 1 || count <= 1) {
    for (int i = 0; i < count; ++i) task(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> workers;
  const int nworkers = std::min(jobs, count);
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(nworkers));
  for (int w = 0; w < nworkers; ++w) {
    workers.emplace_back([&, w] {
      try {
        for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1))
          task(i);
      } catch (...) {
        errors[std::size_t(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : workers) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

SweepResult run_sweep(const ExperimentConfig& cfg,
                      const std::filesystem::path& artifacts_dir,
                      bool verbose) {
  if (!cfg.seed_set)
    throw Error(ErrorKind::invalid_argument, "seed is mandatory");
  const std::string& var = cfg.sweep.variable;
  int n_points;
  if (var == "S") {
    n_points = int(cfg.sweep.model_points.size());
    if (n_points < 1)
      throw Error(ErrorKind::invalid_argument,
                  "S sweep needs sweep.model_points");
  } else if (var == "P" || var == "L") {
    n_points = int(cfg.sweep.values.size());
    if (n_points < 1)
      throw Error(ErrorKind::invalid_argument, "sweep needs sweep.values");
  } else {
    throw Error(ErrorKind::invalid_argument, "sweep variable must be P, L or S");
  }
  const int seeds = std::max(1, cfg.sweep.seeds);
  const int total = n_points * seeds;

  std::vector<SweepPoint> slots(static_cast<std::size_t>(total));
  parallel_tasks(total, cfg.jobs, [&](int idx) {
    const int point = idx / seeds;
    const int seed_index = idx % seeds;

    lm::ModelConfig model =
        var == "S" ? cfg.sweep.model_points[std::size_t(point)] : cfg.model;
    model.vocab_size = cfg.corpus.vocab_size;

    const double value = var == "S" ? 0.0 : cfg.sweep.values[std::size_t(point)];
    const corpus::CorpusConfig cc =
        corpus_config_for_point(cfg, var, value, point, seed_index);
    const corpus::Corpus corpus = corpus::build_corpus(cc);

    lm::TrainConfig tc = cfg.train;
    tc.seed = point_train_seed(cfg, point, seed_index);
    const lm::TrainResult trained = lm::train(corpus, model, tc);

    if (!artifacts_dir.empty()) {
      const auto dir = artifacts_dir /
                       ("point_" + std::to_string(point) + "_s" +
                        std::to_string(seed_index));
      corpus::write_corpus(corpus, dir / "corpus.jsonl");
      lm::write_checkpoint(trained.checkpoint, dir / "checkpoint.bin");
    }

    provider::LocalProvider local(trained.checkpoint);
    const auto rows = probe::sweep_rates(
        {{&local, lm::param_count(model)}}, {&corpus});
    if (rows.size() != 1)
      throw Error(ErrorKind::internal, "sweep point produced multiple rows");

    SweepPoint sp;
    sp.seed_index = seed_index;
    sp.row = rows.front();
    sp.x = var == "P" ? sp.row.p : var == "L" ? sp.row.l : double(sp.row.s);
    slots[std::size_t(idx)] = sp;
    if (verbose) {
      char buf[160];
      std::snprintf(buf, sizeof(buf),
                    "sweep %s=%.6g seed=%d: RR=%.3f HR=%.3f R=%.3f\n",
                    var.c_str(), sp.x, seed_index, sp.row.rates.rr,
                    sp.row.rates.hr, sp.row.rates.r);
      std::cout << buf << std::flush;
    }
  });

  std::stable_sort(slots.begin(), slots.end(),
                   [](const SweepPoint& a, const SweepPoint& b) {
                     return a.x != b.x ? a.x < b.x
                                       : a.seed_index < b.seed_index;
                   });

  std::vector<std::pair<double, double>> fit_points;
  for (const auto& s : slots) fit_points.push_back({s.x, s.row.rates.r});

  SweepResult result;
  result.points = std::move(slots);
  result.fit = law::fit_log_linear(fit_points, var);
  return result;
}

std::vector<std::map<std::string, double>> parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> header;
  std::vector<std::map<std::string, double>> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (header.empty()) {
      header = cells;
      continue;
    }
    if (cells.size() != header.size())
      throw Error(ErrorKind::malformed, "csv row width mismatch");
    std::map<std::string, double> row;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      try {
        row[header[i]] = std::stod(cells[i]);
      } catch (const std::exception&) {
        row[header[i]] = std::numeric_limits<double>::quiet_NaN();
      }
    }
    rows.push_back(std::move(row));
  }
  if (header.empty())
    throw Error(ErrorKind::malformed, "csv has no header");
  return rows;
}

}  // namespace ovl::experiment
