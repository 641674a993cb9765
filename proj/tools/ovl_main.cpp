// Experiment driver: corpus generation, training, probing, law fitting,
// prediction, and CoDA evaluation, all reproducible from (config, seed).

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "ovl/coda.hpp"
#include "ovl/common.hpp"
#include "ovl/corpus.hpp"
#include "ovl/experiment.hpp"
#include "ovl/kernels.hpp"
#include "ovl/lm.hpp"
#include "ovl/probe.hpp"
#include "ovl/provider.hpp"
#include "ovl/scaling_law.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ovl;

namespace {

int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::io:
      return 2;
    case ErrorKind::malformed:
      return 3;
    case ErrorKind::invalid_argument:
    case ErrorKind::vocabulary_exhausted:
    case ErrorKind::context_overflow:
    case ErrorKind::out_of_vocab:
      return 4;
    case ErrorKind::divergence:
    case ErrorKind::undefined_ratio:
    case ErrorKind::flagged_fit:
      return 5;
    case ErrorKind::remote_timeout:
    case ErrorKind::remote_malformed:
    case ErrorKind::remote_retry_exhausted:
    case ErrorKind::remote_http:
      return 6;
    case ErrorKind::internal:
      return 1;
  }
  return 1;
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p))
    throw Error(ErrorKind::io, what + " not found: " + p.string());
}

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> jobs;
  std::optional<double> alpha;
  std::string endpoint;
  std::string kernel = "auto";
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config_path, "experiment config JSON");
  cmd->add_option("--seed", a.seed, "experiment seed (mandatory)");
  cmd->add_option("--out", a.out, "output file or directory");
  cmd->add_option("--jobs", a.jobs, "max parallel sweep points");
  cmd->add_option("--alpha", a.alpha, "plausibility alpha");
  cmd->add_option("--endpoint", a.endpoint, "remote log-probability endpoint");
  cmd->add_option("--kernel", a.kernel, "kernel backend: auto|scalar|avx2");
}

experiment::ExperimentConfig effective_config(const CommonArgs& a) {
  experiment::ExperimentConfig cfg = a.config_path.empty()
                                         ? experiment::default_config()
                                         : experiment::load_config(a.config_path);
  if (a.seed) {
    cfg.seed = *a.seed;
    cfg.seed_set = true;
  }
  if (!a.out.empty()) cfg.out_dir = a.out;
  if (a.jobs) cfg.jobs = *a.jobs;
  if (a.alpha) cfg.plausibility_alpha = *a.alpha;
  if (!a.kernel.empty() && !kernels::set_backend_by_name(a.kernel))
    throw Error(ErrorKind::invalid_argument, "unknown kernel backend: " + a.kernel);
  if (!cfg.seed_set)
    throw Error(ErrorKind::invalid_argument,
                "seed is mandatory (set --seed or config.seed)");
  return cfg;
}

// Providers for commands that accept either a checkpoint or an endpoint.
struct ProviderHolder {
  std::optional<lm::Checkpoint> ckpt;
  std::unique_ptr<provider::NextTokenProvider> remote;
  std::unique_ptr<provider::LocalProvider> local;
  std::int64_t param_count = 0;

  const provider::NextTokenProvider& get() const {
    return remote ? *remote : static_cast<const provider::NextTokenProvider&>(*local);
  }
};

ProviderHolder make_provider(const std::string& checkpoint_path,
                             const std::string& endpoint,
                             const corpus::Corpus& corpus) {
  ProviderHolder h;
  if (!endpoint.empty()) {
    provider::RemoteProviderConfig rc;
    rc.endpoint = endpoint;
    rc.top_k = corpus.vocab_size;
    rc.vocab_size = corpus.vocab_size;
    rc.max_context = corpus.max_statement_len() + 1;
    h.remote = provider::make_remote_provider(rc);
    return h;
  }
  require_file(checkpoint_path, "checkpoint");
  h.ckpt = lm::read_checkpoint(checkpoint_path);
  h.param_count = lm::param_count(h.ckpt->config);
  h.local = std::make_unique<provider::LocalProvider>(*h.ckpt);
  return h;
}

std::string trace_csv(const experiment::ExperimentConfig& cfg,
                      const std::vector<double>& trace) {
  std::string out = experiment::provenance_line(cfg) + "epoch,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < trace.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i, trace[i]);
    out += buf;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"knowledge-overshadowing laboratory"};
  app.require_subcommand(1);

  // ---- gen
  auto* gen = app.add_subcommand("gen", "generate a synthetic corpus");
  CommonArgs gen_a;
  add_common(gen, gen_a);
  std::optional<double> gen_p, gen_l;
  std::optional<int> gen_groups, gen_vocab;
  std::string gen_file;
  gen->add_option("--p", gen_p, "relative popularity P = m/n");
  gen->add_option("--l", gen_l, "relative length L");
  gen->add_option("--groups", gen_groups, "groups per schedule point");
  gen->add_option("--vocab", gen_vocab, "vocabulary size");
  gen->add_option("--file", gen_file, "corpus output path");

  // ---- train / finetune
  auto* train = app.add_subcommand("train", "train a model on a corpus");
  CommonArgs train_a;
  add_common(train, train_a);
  std::string train_corpus, train_ckpt, train_trace, train_base;
  train->add_option("--corpus", train_corpus, "corpus path")->required();
  train->add_option("--checkpoint", train_ckpt, "checkpoint output path");
  train->add_option("--trace", train_trace, "loss trace CSV output path");

  auto* ft = app.add_subcommand("finetune", "continue training from a checkpoint");
  CommonArgs ft_a;
  add_common(ft, ft_a);
  std::string ft_base, ft_corpus, ft_ckpt, ft_trace;
  ft->add_option("--base", ft_base, "base checkpoint")->required();
  ft->add_option("--corpus", ft_corpus, "corpus path")->required();
  ft->add_option("--checkpoint", ft_ckpt, "checkpoint output path");
  ft->add_option("--trace", ft_trace, "loss trace CSV output path");

  // ---- probe
  auto* probe_cmd = app.add_subcommand("probe", "measure RR/HR/R rates");
  CommonArgs probe_a;
  add_common(probe_cmd, probe_a);
  std::string probe_ckpt, probe_corpus, probe_csv;
  probe_cmd->add_option("--checkpoint", probe_ckpt, "checkpoint path");
  probe_cmd->add_option("--corpus", probe_corpus, "corpus path")->required();
  probe_cmd->add_option("--csv", probe_csv, "rate table output path");

  // ---- fit / predict
  auto* fit_cmd = app.add_subcommand("fit", "fit a log-linear law to a rate table");
  CommonArgs fit_a;
  add_common(fit_cmd, fit_a);
  std::string fit_rates, fit_var = "P", fit_out;
  fit_cmd->add_option("--rates", fit_rates, "rate CSV path")->required();
  fit_cmd->add_option("--variable", fit_var, "P, L or S");
  fit_cmd->add_option("--fit", fit_out, "fit JSON output path");

  auto* pred = app.add_subcommand("predict", "predict R from a fitted law");
  CommonArgs pred_a;
  add_common(pred, pred_a);
  std::string pred_fit, pred_out;
  std::vector<double> pred_xs;
  pred->add_option("--fit", pred_fit, "fit JSON path")->required();
  pred->add_option("--x", pred_xs, "x values")->required();
  pred->add_option("--csv", pred_out, "predictions CSV output path");

  // ---- coda-eval / detect
  auto* ce = app.add_subcommand("coda-eval", "greedy vs CoDA exact match");
  CommonArgs ce_a;
  add_common(ce, ce_a);
  std::string ce_ckpt, ce_corpus, ce_csv;
  ce->add_option("--checkpoint", ce_ckpt, "checkpoint path");
  ce->add_option("--corpus", ce_corpus, "corpus path")->required();
  ce->add_option("--csv", ce_csv, "evaluation CSV output path");

  auto* det = app.add_subcommand("detect", "dump overshadow detection reports");
  CommonArgs det_a;
  add_common(det, det_a);
  std::string det_ckpt, det_corpus, det_json;
  int det_limit = 16;
  det->add_option("--checkpoint", det_ckpt, "checkpoint path");
  det->add_option("--corpus", det_corpus, "corpus path")->required();
  det->add_option("--json", det_json, "report JSON output path");
  det->add_option("--limit", det_limit, "max probes to report");

  // ---- sweep
  auto* sweep = app.add_subcommand("sweep", "gen+train+probe over a schedule, then fit");
  CommonArgs sweep_a;
  add_common(sweep, sweep_a);
  std::string sweep_var;
  sweep->add_option("--variable", sweep_var, "override sweep variable (P|L|S)");

  // ---- grad-check
  auto* gc = app.add_subcommand("grad-check", "finite-difference gradient check");
  CommonArgs gc_a;
  add_common(gc, gc_a);
  std::string gc_prec = "f64";
  double gc_eps = 1e-5, gc_tol = 1e-6;
  int gc_d = 8, gc_layers = 1, gc_heads = 2, gc_ctx = 8, gc_vocab = 16,
      gc_mlp = 2, gc_sample_len = 6;
  gc->add_option("--precision", gc_prec, "f32 or f64");
  gc->add_option("--epsilon", gc_eps, "central difference step");
  gc->add_option("--tol", gc_tol, "max relative error to pass");
  gc->add_option("--d-model", gc_d, "");
  gc->add_option("--n-layers", gc_layers, "");
  gc->add_option("--n-heads", gc_heads, "");
  gc->add_option("--ctx", gc_ctx, "");
  gc->add_option("--vocab", gc_vocab, "");
  gc->add_option("--mlp-mult", gc_mlp, "");
  gc->add_option("--sample-len", gc_sample_len, "");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      auto cfg = effective_config(gen_a);
      corpus::CorpusConfig cc = cfg.corpus;
      if (gen_p) cc.p_schedule = {*gen_p};
      if (gen_l) cc.l_schedule = {*gen_l};
      if (gen_groups) cc.groups_per_point = *gen_groups;
      if (gen_vocab) cc.vocab_size = *gen_vocab;
      cc.global_seed = cfg.seed;
      const corpus::Corpus c = corpus::build_corpus(cc);
      const fs::path out = gen_file.empty()
                               ? fs::path(cfg.out_dir) / "corpus.jsonl"
                               : fs::path(gen_file);
      corpus::write_corpus(c, out);
      std::printf("wrote %zu groups, %lld tokens to %s\n", c.groups.size(),
                  (long long)c.total_tokens(), out.string().c_str());
    } else if (*train || *ft) {
      const bool is_ft = bool(*ft);
      auto cfg = effective_config(is_ft ? ft_a : train_a);
      const std::string corpus_path = is_ft ? ft_corpus : train_corpus;
      require_file(corpus_path, "corpus");
      const corpus::Corpus c = corpus::read_corpus(corpus_path);
      lm::TrainConfig tc = cfg.train;
      tc.seed = cfg.seed;
      lm::TrainResult res;
      if (is_ft) {
        require_file(ft_base, "base checkpoint");
        const lm::Checkpoint base = lm::read_checkpoint(ft_base);
        res = lm::finetune(base, c, tc);
      } else {
        lm::ModelConfig mc = cfg.model;
        mc.vocab_size = c.vocab_size;
        res = lm::train(c, mc, tc);
      }
      const std::string ckpt_path = is_ft ? ft_ckpt : train_ckpt;
      const fs::path out = ckpt_path.empty()
                               ? fs::path(cfg.out_dir) / "checkpoint.bin"
                               : fs::path(ckpt_path);
      lm::write_checkpoint(res.checkpoint, out);
      const std::string trace_path = is_ft ? ft_trace : train_trace;
      if (!trace_path.empty())
        atomic_write_file(trace_path, trace_csv(cfg, res.loss_trace));
      std::printf("trained %lld params, %llu steps, final loss %.6f -> %s\n",
                  (long long)lm::param_count(res.checkpoint.config),
                  (unsigned long long)res.checkpoint.steps,
                  res.checkpoint.final_loss, out.string().c_str());
    } else if (*probe_cmd) {
      auto cfg = effective_config(probe_a);
      require_file(probe_corpus, "corpus");
      const corpus::Corpus c = corpus::read_corpus(probe_corpus);
      ProviderHolder h = make_provider(probe_ckpt, probe_a.endpoint, c);
      const auto rows = probe::sweep_rates({{&h.get(), h.param_count}}, {&c});
      const fs::path out = probe_csv.empty()
                               ? fs::path(cfg.out_dir) / "rates.csv"
                               : fs::path(probe_csv);
      atomic_write_file(out,
                        experiment::provenance_line(cfg) + probe::rates_csv(rows));
      std::printf("wrote %zu rate rows to %s\n", rows.size(),
                  out.string().c_str());
    } else if (*fit_cmd) {
      auto cfg = effective_config(fit_a);
      require_file(fit_rates, "rate table");
      const auto rows = experiment::parse_csv(read_file(fit_rates));
      if (fit_var != "P" && fit_var != "L" && fit_var != "S")
        throw Error(ErrorKind::invalid_argument, "variable must be P, L or S");
      std::vector<std::pair<double, double>> pts;
      for (const auto& r : rows) {
        if (!r.count(fit_var) || !r.count("R"))
          throw Error(ErrorKind::malformed, "rate table lacks required columns");
        pts.push_back({r.at(fit_var), r.at("R")});
      }
      const law::LawFit fit = law::fit_log_linear(pts, fit_var);
      json j = json::parse(law::fit_to_json(fit));
      j["provenance"] = {{"config_hash", hex64(experiment::config_hash(cfg))},
                         {"seed", cfg.seed}};
      const fs::path out = fit_out.empty() ? fs::path(cfg.out_dir) / "fit.json"
                                           : fs::path(fit_out);
      atomic_write_file(out, j.dump(2) + "\n");
      std::printf("fit %s: coef=%.6g x_c=%.6g r2=%.4f (%d points)%s -> %s\n",
                  fit.variable.c_str(), fit.coef, fit.x_c, fit.r_squared,
                  fit.n_points, fit.flagged ? " FLAGGED" : "",
                  out.string().c_str());
    } else if (*pred) {
      auto cfg = effective_config(pred_a);
      require_file(pred_fit, "fit");
      const law::LawFit fit = law::fit_from_json(read_file(pred_fit));
      std::string csv = experiment::provenance_line(cfg) + "x,predicted,raw\n";
      char buf[96];
      for (double x : pred_xs) {
        const double raw = law::predict_raw(fit, x);
        std::snprintf(buf, sizeof(buf), "%.10g,%.10g,%.10g\n", x,
                      std::max(0.0, raw), raw);
        csv += buf;
      }
      const fs::path out = pred_out.empty()
                               ? fs::path(cfg.out_dir) / "predictions.csv"
                               : fs::path(pred_out);
      atomic_write_file(out, csv);
      std::printf("wrote %zu predictions to %s\n", pred_xs.size(),
                  out.string().c_str());
    } else if (*ce) {
      auto cfg = effective_config(ce_a);
      require_file(ce_corpus, "corpus");
      const corpus::Corpus c = corpus::read_corpus(ce_corpus);
      ProviderHolder h = make_provider(ce_ckpt, ce_a.endpoint, c);
      const coda::CodaEvalResult r =
          coda::coda_eval(h.get(), c.groups, cfg.plausibility_alpha);
      const fs::path out = ce_csv.empty() ? fs::path(cfg.out_dir) / "coda.csv"
                                          : fs::path(ce_csv);
      atomic_write_file(out, experiment::provenance_line(cfg) + coda::eval_csv(r));
      std::printf(
          "suppressed: EM greedy %.1f -> CoDA %.1f; dominant: %.1f -> %.1f -> %s\n",
          r.suppressed.em_greedy, r.suppressed.em_coda, r.dominant.em_greedy,
          r.dominant.em_coda, out.string().c_str());
    } else if (*det) {
      auto cfg = effective_config(det_a);
      require_file(det_corpus, "corpus");
      const corpus::Corpus c = corpus::read_corpus(det_corpus);
      ProviderHolder h = make_provider(det_ckpt, det_a.endpoint, c);
      json reports = json::array();
      int count = 0;
      for (const auto& g : c.groups) {
        for (const auto& s : g.statements) {
          if (count >= det_limit) break;
          const auto rep =
              coda::detect(h.get(), s.prompt(), {}, cfg.plausibility_alpha);
          json item = json::parse(coda::report_to_json(rep));
          item["group_id"] = s.group_id;
          item["role"] = corpus::role_name(s.role);
          reports.push_back(std::move(item));
          ++count;
        }
        if (count >= det_limit) break;
      }
      json j;
      j["provenance"] = {{"config_hash", hex64(experiment::config_hash(cfg))},
                         {"seed", cfg.seed}};
      j["reports"] = std::move(reports);
      const fs::path out = det_json.empty()
                               ? fs::path(cfg.out_dir) / "detect.json"
                               : fs::path(det_json);
      atomic_write_file(out, j.dump(2) + "\n");
      std::printf("wrote %d detection reports to %s\n", count,
                  out.string().c_str());
    } else if (*sweep) {
      auto cfg = effective_config(sweep_a);
      if (!sweep_var.empty()) cfg.sweep.variable = sweep_var;
      const fs::path dir = cfg.out_dir;
      const auto res = experiment::run_sweep(cfg, dir, true);
      std::vector<probe::SweepRow> rows;
      for (const auto& p : res.points) rows.push_back(p.row);
      atomic_write_file(dir / "rates.csv", experiment::provenance_line(cfg) +
                                               probe::rates_csv(rows));
      json j = json::parse(law::fit_to_json(res.fit));
      j["provenance"] = {{"config_hash", hex64(experiment::config_hash(cfg))},
                         {"seed", cfg.seed}};
      atomic_write_file(dir / "fit.json", j.dump(2) + "\n");
      std::printf("sweep %s: %zu rows; fit coef=%.6g x_c=%.6g r2=%.4f%s -> %s\n",
                  cfg.sweep.variable.c_str(), res.points.size(), res.fit.coef,
                  res.fit.x_c, res.fit.r_squared,
                  res.fit.flagged ? " FLAGGED" : "", dir.string().c_str());
    } else if (*gc) {
      auto cfg = effective_config(gc_a);
      lm::ModelConfig mc;
      mc.vocab_size = gc_vocab;
      mc.d_model = gc_d;
      mc.n_layers = gc_layers;
      mc.n_heads = gc_heads;
      mc.context_len = gc_ctx;
      mc.mlp_mult = gc_mlp;
      if (gc_prec == "f32")
        mc.precision = Precision::f32;
      else if (gc_prec == "f64")
        mc.precision = Precision::f64;
      else
        throw Error(ErrorKind::invalid_argument, "precision must be f32 or f64");
      Rng rng(derive_seed(cfg.seed, 99));
      TokenSeq sample;
      for (int i = 0; i < gc_sample_len; ++i)
        sample.push_back(Token(rng.next_below(std::uint64_t(gc_vocab))));
      const double err = lm::grad_check(mc, sample, gc_eps, cfg.seed);
      const bool ok = err < gc_tol;
      std::printf("grad-check precision=%s epsilon=%g max_rel_error=%.3g tol=%g %s\n",
                  gc_prec.c_str(), gc_eps, err, gc_tol, ok ? "PASS" : "FAIL");
      if (!ok) {
        std::fprintf(stderr, "error: kind=internal msg=\"gradient check failed\"\n");
        return 1;
      }
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: kind=%s msg=\"%s\"\n",
                 error_kind_name(e.kind()), e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: kind=internal msg=\"%s\"\n", e.what());
    return 1;
  }
  return 0;
}
