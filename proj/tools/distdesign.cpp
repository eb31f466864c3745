// distdesign: simulate studies, run distributed designs, evaluate and report.
//
//   distdesign simulate --seed 7 --n 10000 --p 120 --out sim/
//   distdesign design --data sim/dataset.csv --mechanism sim/mechanism.json --out run/
//   distdesign report run/balance.json --out summary.csv
//   distdesign worker --stdio --designer-id 2
//
// Exit codes: 0 ok, 1 usage, 2 data, 3 numeric, 4 protocol.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "distdesign/config.hpp"
#include "distdesign/report.hpp"

using namespace distdesign;
namespace fs = std::filesystem;

namespace {

struct CommonArgs {
  std::string config_file;
  std::vector<std::string> overrides;
};

RunConfig resolve(const CommonArgs& common, const std::vector<std::pair<std::string, std::string>>& flags) {
  RunConfig cfg;
  if (!common.config_file.empty()) load_config_file(cfg, common.config_file);
  for (const auto& o : common.overrides) apply_override(cfg, o);
  for (const auto& [key, value] : flags) set_config_value(cfg, key, value);
  validate_run_config(cfg);
  return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& common) {
  cmd->add_option("--config", common.config_file, "key=value config file");
  cmd->add_option("--set", common.overrides, "override a config key (key=value), repeatable");
}

// Flags that map straight onto config keys; only given ones are applied.
struct KeyFlags {
  std::map<std::string, std::string> storage;

  void add(CLI::App* cmd, const std::string& key, const std::string& help) {
    auto* opt = cmd->add_option("--" + key, storage[key], help);
    options.emplace_back(key, opt);
  }
  std::vector<std::pair<std::string, std::string>> collect() const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& [key, opt] : options)
      if (opt->count() > 0) out.emplace_back(key, storage.at(key));
    return out;
  }

 private:
  std::vector<std::pair<std::string, CLI::Option*>> options;
};

void make_dirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory '" + dir.string() + "': " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

Json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw DataError("'" + path + "' is not JSON: " + e.what());
  }
}

std::string self_executable() {
  std::error_code ec;
  const auto p = fs::read_symlink("/proc/self/exe", ec);
  if (ec) throw UsageError("cannot locate own executable for worker processes");
  return p.string();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

int cmd_simulate(const RunConfig& cfg, const std::string& out_dir) {
  for (int r = 0; r < cfg.replicates; ++r) {
    const std::uint64_t seed = cfg.seed + static_cast<std::uint64_t>(r);
    const auto study = simulate_study(cfg.n, cfg.p, cfg.m, cfg.setting, seed);
    char name[32];
    std::snprintf(name, sizeof name, "rep-%03d", r + 1);
    const fs::path dir = cfg.replicates == 1 ? fs::path(out_dir) : fs::path(out_dir) / name;
    make_dirs(dir);
    std::ostringstream csv;
    write_dataset_csv(csv, study.data);
    write_text(dir / "dataset.csv", csv.str());
    write_text(dir / "mechanism.json", dump_json(study_manifest(study)) + "\n");
    const auto before = pre_design_balance(study.data, cfg.designer.balance);
    const double treated =
        static_cast<double>(count_treated(study.data.treatment())) / static_cast<double>(study.data.n_subjects());
    std::printf("%s seed=%llu treated_fraction=%.4f pre_design_d_max=%.4f d_plus=%d\n", dir.string().c_str(),
                static_cast<unsigned long long>(seed), treated, before.d_max, before.d_plus);
  }
  return 0;
}

struct DesignArgs {
  std::string data;
  std::string mechanism;
  std::string partition;
  std::string out;
  std::string treatment_column = "W";
  std::vector<std::string> categorical;
  std::vector<std::string> ignored;
  std::vector<std::string> baselines;
  std::string listen;
  std::string transcript;
};

struct StudyInputs {
  Dataset data;
  std::optional<Json> manifest;
  PartitionSpec partition;
  std::vector<BalanceTerm> terms;
};

StudyInputs load_inputs(const DesignArgs& a, const RunConfig& cfg) {
  DatasetSchema schema;
  schema.treatment_column = a.treatment_column;
  schema.categorical.insert(a.categorical.begin(), a.categorical.end());
  schema.ignored.insert(a.ignored.begin(), a.ignored.end());
  StudyInputs in{load_dataset(a.data, schema), std::nullopt, {}, {}};
  const auto p = in.data.n_covariates();
  if (!a.mechanism.empty()) {
    in.manifest = read_json(a.mechanism);
    const auto spec = mechanism_from_json(in.manifest->at("mechanism"));
    if (spec.p != p)
      throw DataError("mechanism has p=" + std::to_string(spec.p) + " but the dataset has " + std::to_string(p) +
                      " covariates");
    in.terms = mechanism_terms(spec);
  }
  if (!a.partition.empty()) {
    in.partition = partition_from_json(read_json(a.partition));
  } else if (in.manifest && in.manifest->contains("partition")) {
    in.partition = partition_from_json(in.manifest->at("partition"));
  } else {
    in.partition = contiguous_partition(p, cfg.m);
  }
  validate_partition(in.partition, p);
  return in;
}

ScoreVector manifest_true_scores(const Json& manifest, const Dataset& data) {
  return true_propensity(mechanism_from_json(manifest.at("mechanism")), data.covariates());
}

BalanceReport with_terms(BalanceReport r, const DesignVector& d, const Dataset& data,
                         const std::vector<BalanceTerm>& terms, const BalanceConfig& bc) {
  if (!terms.empty()) r.evaluated_terms = evaluate_design(d, data, terms, bc).evaluated_terms;
  return r;
}

Json ledger_json(const TransferLedger& l, const LedgerCheck& check) {
  return {{"covariate_values", l.covariate_values},
          {"score_values", l.score_values},
          {"score_values_uploaded", l.score_values_uploaded},
          {"design_entries", l.design_entries},
          {"design_entries_relayed", l.design_entries_relayed},
          {"balance_entries", l.balance_entries},
          {"check", check.pass ? "pass" : "fail"},
          {"failures", check.failures}};
}

void write_outputs(const fs::path& out, const BalanceDocument& doc, const std::vector<DesignVector>& designs,
                   const Dataset& data) {
  make_dirs(out / "designs");
  for (const auto& d : designs) {
    std::ostringstream s;
    write_design_csv(s, d);
    write_text(out / "designs" / (design_file_stem(d.ref) + ".csv"), s.str());
  }
  write_text(out / "balance.json", dump_json(balance_to_json(doc)) + "\n");
  std::ostringstream long_form, table;
  write_balance_csv(long_form, doc.designs, data.meta());
  write_text(out / "balance.csv", long_form.str());
  write_table_csv(table, doc);
  write_text(out / "table.csv", table.str());
}

int cmd_design(RunConfig cfg, const DesignArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  std::set<std::string> baselines(a.baselines.begin(), a.baselines.end());
  for (const auto& b : baselines)
    if (b != "all-data" && b != "oracle") throw UsageError("unknown baseline '" + b + "' (all-data, oracle)");
  if ((cfg.mode == RunMode::oracle || baselines.count("oracle")) && a.mechanism.empty())
    throw UsageError("oracle designs need --mechanism with the generating mechanism");
  if (cfg.mode == RunMode::distributed && !a.listen.empty()) cfg.transport = Transport::multi_process;

  const auto in = load_inputs(a, cfg);
  const auto& data = in.data;
  cfg.m = in.partition.m_designers;
  const DesignerConfig designer = resolved_designer(cfg);
  const fs::path out(a.out);
  make_dirs(out);

  std::vector<DesignVector> designs;
  std::vector<BalanceReport> reports;
  Json timing = Json::object();
  Json manifest = {{"command", "design"},
                   {"config", config_manifest(cfg)},
                   {"data", a.data},
                   {"mechanism", a.mechanism},
                   {"n", data.n_subjects()},
                   {"p", data.n_covariates()},
                   {"partition", partition_to_json(in.partition)}};

  auto add_baseline = [&](const BaselineResult& b) {
    for (std::size_t k = 0; k < b.designs.size(); ++k) {
      designs.push_back(b.designs[k]);
      reports.push_back(with_terms(b.reports[k], b.designs[k], data, in.terms, designer.balance));
    }
  };

  if (cfg.mode == RunMode::distributed) {
    // Covariates outside every block are never balanced by the designers.
    Json unassigned = Json::array();
    for (int j : unassigned_columns(in.partition, data.n_covariates()))
      unassigned.push_back(data.meta()[static_cast<std::size_t>(j)].name);
    if (!unassigned.empty())
      std::fprintf(stderr, "warning: %zu covariates are not assigned to any designer\n", unassigned.size());
    manifest["unassigned_covariates"] = unassigned;
    OrchestratorConfig oc;
    oc.designer = designer;
    oc.criterion = cfg.criterion;
    oc.transport = cfg.transport;
    oc.step_timeout = Millis(cfg.timeout_ms);
    if (cfg.transport == Transport::multi_process) {
      if (a.listen.empty())
        oc.worker_executable = self_executable();
      else
        oc.listen_address = with_default_port(a.listen);
      oc.on_listening = [](int port) {
        std::fprintf(stderr, "listening for workers on port %d\n", port);
        std::fflush(stderr);
      };
    }
    std::unique_ptr<std::ofstream> transcript;
    std::mutex transcript_mu;
    if (!a.transcript.empty()) {
      transcript = std::make_unique<std::ofstream>(a.transcript, std::ios::binary);
      if (!*transcript) throw DataError("cannot write transcript '" + a.transcript + "'");
      oc.transcript = [&](const std::string& line) {
        std::lock_guard lock(transcript_mu);
        *transcript << line;
        transcript->flush();
      };
    }
    const auto run = run_distributed(data, in.partition, oc);
    for (const auto& d : run.designs) designs.push_back(d);
    for (std::size_t k = 0; k < run.selection.table.size(); ++k)
      reports.push_back(with_terms(run.selection.table[k], run.designs[k], data, in.terms, designer.balance));
    const auto check = ledger_check(run.ledger, data.n_subjects(), in.partition.m_designers,
                                    data.n_covariates() - unassigned.size(), designer.methods.size());
    manifest["ledger"] = ledger_json(run.ledger, check);
    for (const auto& [step, s] : run.ledger.step_seconds) timing[step] = s;
    if (!check.pass) {
      for (const auto& f : check.failures) std::fprintf(stderr, "ledger: %s\n", f.c_str());
      throw ProtocolError("transfer accounting does not match the expected counts");
    }
  }
  if (cfg.mode == RunMode::all_data || baselines.count("all-data")) {
    const auto tb = std::chrono::steady_clock::now();
    add_baseline(run_all_data(data, designer, cfg.all_data_interaction_cap));
    timing["all_data"] = seconds_since(tb);
  }
  if (cfg.mode == RunMode::oracle || baselines.count("oracle")) {
    const auto tb = std::chrono::steady_clock::now();
    add_baseline(run_oracle(data, manifest_true_scores(*in.manifest, data), designer));
    timing["oracle"] = seconds_since(tb);
  }

  std::vector<std::size_t> order(designs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto i, auto k) { return designs[i].ref < designs[k].ref; });
  BalanceDocument doc;
  doc.criterion = cfg.criterion;
  for (const auto& m : data.meta()) doc.covariates.push_back(m.name);
  doc.before = pre_design_balance(data, designer.balance);
  if (!in.terms.empty())
    doc.before.evaluated_terms =
        evaluate_design(identity_design(data.n_subjects()), data, in.terms, designer.balance).evaluated_terms;
  std::vector<DesignVector> sorted_designs;
  for (auto i : order) {
    sorted_designs.push_back(designs[i]);
    doc.designs.push_back(reports[i]);
  }
  const auto selection = select_design(doc.designs, cfg.criterion);
  doc.winner = selection.winner;

  write_outputs(out, doc, sorted_designs, data);
  manifest["winner"] = selection.winner.label();
  write_text(out / "run_manifest.json", dump_json(manifest) + "\n");
  write_text(out / "config.resolved", config_file_text(cfg));
  timing["total"] = seconds_since(t0);
  write_text(out / "timing.json", dump_json(timing) + "\n");

  std::printf("pre-design d_max=%.4f d_plus=%d\n", doc.before.d_max, doc.before.d_plus);
  for (const auto& r : doc.designs)
    std::printf("%-26s d_max=%.4f d_plus=%d n_retained=%zu\n", r.design.label().c_str(), r.d_max, r.d_plus,
                r.n_retained);
  std::printf("winner (%s): %s\n", to_string(cfg.criterion).c_str(), selection.winner.label().c_str());
  return 0;
}

struct EvaluateArgs {
  DesignArgs inputs;
  std::vector<std::string> designs;
  std::string kind;
};

int cmd_evaluate(const RunConfig& cfg, const EvaluateArgs& a) {
  const auto in = load_inputs(a.inputs, cfg);
  const auto& data = in.data;
  BalanceDocument doc;
  doc.criterion = cfg.criterion;
  for (const auto& m : data.meta()) doc.covariates.push_back(m.name);
  doc.before = pre_design_balance(data, cfg.designer.balance);
  if (!in.terms.empty())
    doc.before.evaluated_terms =
        evaluate_design(identity_design(data.n_subjects()), data, in.terms, cfg.designer.balance).evaluated_terms;
  std::vector<DesignVector> designs;
  for (std::size_t i = 0; i < a.designs.size(); ++i) {
    const fs::path path(a.designs[i]);
    auto ref = design_ref_from_stem(path.stem().string());
    DesignKind kind = ref && ref->method != DesignMethod::subclass ? DesignKind::matched_pairs : DesignKind::subclasses;
    if (!a.kind.empty()) {
      try {
        kind = design_kind_from_string(a.kind);
      } catch (const Error& e) {
        throw UsageError(e.what());
      }
    }
    if (!ref)
      ref = DesignRef{ScoreSource::designer, static_cast<int>(i + 1),
                      kind == DesignKind::subclasses ? DesignMethod::subclass : DesignMethod::nn};
    std::ifstream f(path);
    if (!f) throw DataError("cannot open design '" + path.string() + "'");
    auto d = read_design_csv(f, path.string(), kind);
    d.ref = *ref;
    validate_design(d, data.treatment());
    for (const auto& other : designs)
      if (other.ref == d.ref) throw UsageError("two design files map to " + d.ref.label());
    doc.designs.push_back(evaluate_design(d, data, in.terms, cfg.designer.balance));
    designs.push_back(std::move(d));
  }
  std::sort(doc.designs.begin(), doc.designs.end(), [](const auto& x, const auto& y) { return x.design < y.design; });
  if (!doc.designs.empty()) doc.winner = select_design(doc.designs, cfg.criterion).winner;
  const fs::path out(a.inputs.out);
  make_dirs(out);
  write_text(out / "balance.json", dump_json(balance_to_json(doc)) + "\n");
  std::ostringstream long_form, table;
  write_balance_csv(long_form, doc.designs, data.meta());
  write_text(out / "balance.csv", long_form.str());
  write_table_csv(table, doc);
  write_text(out / "table.csv", table.str());
  for (const auto& r : doc.designs)
    std::printf("%-26s d_max=%.4f d_plus=%d n_retained=%zu\n", r.design.label().c_str(), r.d_max, r.d_plus,
                r.n_retained);
  return 0;
}

int cmd_report(const std::vector<std::string>& files, bool interactions, const std::string& out) {
  if (files.empty()) throw UsageError("report needs at least one balance.json");
  std::vector<BalanceDocument> docs;
  for (const auto& f : files) docs.push_back(load_balance(f));
  std::ostringstream s;
  write_summary_csv(s, summary_rows(docs, interactions));
  if (out.empty() || out == "-")
    std::cout << s.str();
  else
    write_text(out, s.str());
  return 0;
}

int cmd_worker(bool use_stdio, const std::string& connect, int designer_id, long long timeout_ms) {
  if (use_stdio == !connect.empty()) throw UsageError("worker needs exactly one of --stdio or --connect");
  if (designer_id < 1) throw UsageError("--designer-id must be positive");
  const Millis timeout(timeout_ms);
  if (use_stdio) {
    // The protocol owns stdout; keep library chatter off it.
    FdChannel ch(STDIN_FILENO, STDOUT_FILENO, false);
    serve_designer(ch, designer_id, timeout);
  } else {
    auto ch = tcp_connect(parse_host_port(with_default_port(connect)), timeout);
    serve_designer(*ch, designer_id, timeout);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  ignore_sigpipe();
  CLI::App app{"Observational study design across covariate-holding designers"};
  app.require_subcommand(1);

  CommonArgs common;
  KeyFlags sim_flags, design_flags, eval_flags;

  auto* simulate = app.add_subcommand("simulate", "simulate studies with a known treatment mechanism");
  add_common(simulate, common);
  std::string sim_out = ".";
  for (const auto& [k, h] : std::vector<std::pair<std::string, std::string>>{
           {"seed", "base seed (replicate r uses seed + r - 1)"},
           {"n", "subjects"},
           {"p", "covariates"},
           {"m", "designers"},
           {"setting", "one or two"},
           {"replicates", "number of studies"}})
    sim_flags.add(simulate, k, h);
  simulate->add_option("--out", sim_out, "output directory");

  DesignArgs design_args;
  auto add_inputs = [](CLI::App* cmd, DesignArgs& a) {
    cmd->add_option("--data", a.data, "dataset CSV")->required();
    cmd->add_option("--mechanism", a.mechanism, "mechanism.json from simulate");
    cmd->add_option("--partition", a.partition, "partition JSON {m, blocks}");
    cmd->add_option("--treatment-column", a.treatment_column, "treatment column name");
    cmd->add_option("--categorical", a.categorical, "categorical column (repeatable)");
    cmd->add_option("--ignore", a.ignored, "column to drop, e.g. an outcome (repeatable)");
    cmd->add_option("--out", a.out, "output directory")->required();
  };
  auto* design = app.add_subcommand("design", "build and select designs");
  add_common(design, common);
  add_inputs(design, design_args);
  for (const auto& [k, h] : std::vector<std::pair<std::string, std::string>>{
           {"seed", "seed for cross-validation folds"},
           {"m", "designers when no partition is given"},
           {"mode", "distributed, all-data or oracle"},
           {"transport", "in-process or multi-process"},
           {"methods", "comma list of subclass,nn,caliper,optimal-caliper"},
           {"model", "lasso-logistic or ols"},
           {"criterion", "d_max or d_plus"}})
    design_flags.add(design, k, h);
  design->add_option("--baselines", design_args.baselines, "all-data and/or oracle")->delimiter(',');
  design->add_option("--listen", design_args.listen, "wait for TCP workers on host[:port]");
  design->add_option("--transcript", design_args.transcript, "NDJSON log of every coordinator message");

  EvaluateArgs eval_args;
  auto* evaluate = app.add_subcommand("evaluate", "balance of existing design files");
  add_common(evaluate, common);
  add_inputs(evaluate, eval_args.inputs);
  evaluate->add_option("--design", eval_args.designs, "design CSV (subject_id,group_id), repeatable")->required();
  evaluate->add_option("--kind", eval_args.kind, "subclasses or matched-pairs (default from file name)");
  eval_flags.add(evaluate, "criterion", "d_max or d_plus");

  std::vector<std::string> report_files;
  bool report_interactions = false;
  std::string report_out;
  auto* report = app.add_subcommand("report", "long-format before/after balance table");
  report->add_option("balance", report_files, "balance.json files")->required();
  report->add_flag("--interactions", report_interactions, "include interaction-term rows");
  report->add_option("--out", report_out, "summary CSV (default stdout)");

  bool worker_stdio = false;
  std::string worker_connect;
  int worker_id = 0;
  long long worker_timeout = 6LL * 3600 * 1000;
  auto* worker = app.add_subcommand("worker", "designer worker speaking the wire protocol");
  worker->add_flag("--stdio", worker_stdio, "talk over stdin/stdout");
  worker->add_option("--connect", worker_connect,
                     "coordinator host[:port] (port defaults to DISTDESIGN_WORKER_PORT or " +
                         std::to_string(kDefaultWorkerPort) + ")");
  worker->add_option("--designer-id", worker_id, "designer id (1..M)")->required();
  worker->add_option("--timeout-ms", worker_timeout, "per-message timeout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ErrorKind::usage);
  }

  try {
    if (*simulate) return cmd_simulate(resolve(common, sim_flags.collect()), sim_out);
    if (*design) return cmd_design(resolve(common, design_flags.collect()), design_args);
    if (*evaluate) return cmd_evaluate(resolve(common, eval_flags.collect()), eval_args);
    if (*report) return cmd_report(report_files, report_interactions, report_out);
    if (*worker) return cmd_worker(worker_stdio, worker_connect, worker_id, worker_timeout);
  } catch (const Error& e) {
    std::fprintf(stderr, "distdesign: %s\n", e.what());
    return e.exit_code();
  } catch (const std::bad_alloc&) {
    std::fprintf(stderr, "distdesign: out of memory\n");
    return static_cast<int>(ErrorKind::numeric);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "distdesign: %s\n", e.what());
    return static_cast<int>(ErrorKind::data);
  }
  return static_cast<int>(ErrorKind::usage);
}
