/*
 * Copyright 2026 The fedcar Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// fedcar command-line driver.
//
// Exit codes: 0 ok, 2 configuration, 3 data, 4 model, 5 network,
// 6 convergence bound violated, 1 anything unexpected.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedcar/config.hpp"
#include "fedcar/error.hpp"
#include "fedcar/federation.hpp"
#include "fedcar/metrics.hpp"
#include "fedcar/retrieval.hpp"
#include "fedcar/theory.hpp"
#include "fedcar/transport.hpp"
#include "fedcar/wire.hpp"

namespace fs = std::filesystem;
using namespace fedcar;

namespace {

constexpr int kExitBoundViolated = 6;

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::string mode;
  std::string encoder;
  std::string data;
  std::string out;
  std::string trainer;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "config file of 'key = value' lines");
  sub->add_option("--set", c.sets, "override one key, e.g. --set fed.clients=3 (repeatable)");
  sub->add_option("--mode", c.mode, "shortcut for fed.mode (adapter-classifier | classifier-only)");
  sub->add_option("--encoder", c.encoder, "shortcut for encoder.kind (synthetic | precomputed)");
  sub->add_option("--data", c.data, "shortcut for data.source = file, data.path = <path>");
  sub->add_option("--out", c.out, "shortcut for out.dir");
  sub->add_option("--trainer", c.trainer, "shortcut for train.kind (simulated-fl | centralized)");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config_path.empty()) cfg = load_config(c.config_path);
  if (!c.mode.empty()) set_config_value(cfg, "fed.mode", c.mode);
  if (!c.encoder.empty()) set_config_value(cfg, "encoder.kind", c.encoder);
  if (!c.data.empty()) {
    set_config_value(cfg, "data.source", "file");
    set_config_value(cfg, "data.path", c.data);
  }
  if (!c.out.empty()) set_config_value(cfg, "out.dir", c.out);
  if (!c.trainer.empty()) set_config_value(cfg, "train.kind", c.trainer);
  for (const std::string& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

fs::path prepare_out_dir(const RunConfig& cfg) {
  const fs::path dir = cfg.out_dir;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory " + dir.string() + ": " + ec.message());
  write_text(dir / "config.txt", config_snapshot(cfg));
  return dir;
}

std::string accuracy_line(const AccuracyTable& t) {
  std::string s;
  for (std::size_t i = 0; i < t.ks.size(); ++i) {
    if (i) s += ' ';
    s += "top" + std::to_string(t.ks[i]) + "=" + format_double(t.accuracy[i]);
  }
  return s;
}

/// metrics.log, model.bin, summary.txt and (when recorded) trace.log.
void write_run(const fs::path& dir, const RunConfig& cfg, const TrainingResult& result, const Encoder& enc,
               const Dataset& val, const std::string& label) {
  {
    std::ofstream m(dir / "metrics.log", std::ios::trunc);
    write_metrics(m, result.records);
    if (!m) throw DataError("cannot write " + (dir / "metrics.log").string());
  }
  save_model(result.model, dir / "model.bin");
  if (result.trace) save_trace(*result.trace, dir / "trace.log");

  const AccuracyTable acc = evaluate(result.model, enc, val, cfg.eval_ks);
  std::ostringstream s;
  s << "run: " << label << "  mode=" << to_string(cfg.fed.mode) << " dp=" << to_string(cfg.fed.dp.mode)
    << " lr=" << format_double(cfg.resolved_fed().lr) << "\n\n";
  s << std::left << std::setw(8) << "round" << std::setw(14) << "val_loss" << std::setw(14) << "val_acc"
    << std::setw(12) << "wall_ms" << "distributed_ms\n";
  s << std::fixed;
  for (const RoundRecord& r : result.records) {
    s << std::setw(8) << r.round << std::setw(14) << std::setprecision(6) << r.val_loss << std::setw(14)
      << r.val_accuracy << std::setw(12) << std::setprecision(1) << r.wall_ms << r.distributed_ms << "\n";
  }
  s.unsetf(std::ios::floatfield);
  s << "\nvalidation " << accuracy_line(acc) << "\n";
  s << "wall_ms=" << format_double(result.wall_ms) << " distributed_ms=" << format_double(result.distributed_ms)
    << "\n";
  s << "encoder_forward_calls=" << enc.forward_calls() << "\n";
  write_text(dir / "summary.txt", s.str());
  std::cout << s.str();
}

// ---------------------------------------------------------------------------

int cmd_train(const Common& common) {
  const RunConfig cfg = resolve(common);
  RunData data = prepare_data(cfg);
  const fs::path dir = prepare_out_dir(cfg);
  const FedConfig fed = cfg.resolved_fed();
  TrainingResult result = cfg.trainer == Trainer::kCentralized
                              ? run_centralized(fed, data.encoder, data.train, data.val)
                              : run_training(fed, data.encoder, data.train, data.val);
  write_run(dir, cfg, result, data.encoder, data.val,
            cfg.trainer == Trainer::kCentralized ? "centralized" : "simulated-fl");
  return 0;
}

int cmd_serve_agg(const Common& common) {
  RunConfig cfg = resolve(common);
  if (cfg.fed.record_trace) throw ConfigError("fed.trace is only available for simulated runs");
  RunData data = prepare_data(cfg);
  const fs::path dir = prepare_out_dir(cfg);
  const FedConfig fed = cfg.resolved_fed();
  const Encoder train_enc = training_encoder(fed, data.encoder, data.train, data.val);
  Listener listener = Listener::bind(parse_endpoint(cfg.address));
  std::cout << "listening on " << parse_endpoint(cfg.address).host << ":" << listener.port() << std::endl;
  AggregatorJob job{fed, &train_enc, &data.train, &data.val, config_snapshot(cfg)};
  TrainingResult result = serve_aggregator(job, listener, cfg.net_options());
  write_run(dir, cfg, result, data.encoder, data.val, "networked aggregator");
  return 0;
}

int cmd_serve_client(const Common& common, int id, const std::string& connect) {
  const RunConfig local = resolve(common);
  const std::string where = connect.empty() ? local.address : connect;
  const Endpoint ep = parse_endpoint(where);
  SessionFactory factory = [id](const std::string& init_text) {
    const RunConfig cfg = parse_config_text(init_text);
    cfg.validate();
    RunData data = prepare_data(cfg);
    return make_session(id, cfg.resolved_fed(), data.encoder, data.train, data.val);
  };
  const int rounds = serve_client(id, ep, factory, local.net_options());
  std::cout << "client " << id << " served " << rounds << " rounds\n";
  return 0;
}

int cmd_eval(const Common& common, const std::string& run_dir, const std::string& model_path,
             const std::string& split) {
  Common c = common;
  std::string model_file = model_path;
  if (!run_dir.empty()) {
    if (c.config_path.empty()) c.config_path = (fs::path(run_dir) / "config.txt").string();
    if (model_file.empty()) model_file = (fs::path(run_dir) / "model.bin").string();
  }
  if (model_file.empty()) throw ConfigError("eval needs --run or --model");
  if (split != "val" && split != "train" && split != "all") {
    throw ConfigError("--split must be val, train or all");
  }
  const RunConfig cfg = resolve(c);
  RunData data = prepare_data(cfg);
  const Model model = load_model(model_file, cfg.fed.mode);
  Dataset set = split == "train" ? data.train : data.val;
  if (split == "all") set.samples.insert(set.samples.end(), data.train.samples.begin(), data.train.samples.end());
  const AccuracyTable acc = evaluate(model, data.encoder, set, cfg.eval_ks);
  const EvalStats stats = evaluate_loss(model, data.encoder, set);
  std::cout << "split=" << split << " samples=" << set.size() << " loss=" << format_double(stats.loss) << " "
            << accuracy_line(acc) << "\n";
  return 0;
}

int cmd_compare(const Common& common) {
  const RunConfig cfg = resolve(common);
  RunData data = prepare_data(cfg);
  if (data.encoder.is_precomputed()) {
    throw ConfigError("compare trains an adapter and needs encoder.kind = synthetic");
  }
  const fs::path dir = prepare_out_dir(cfg);
  ComparisonConfig cc;
  cc.train = cfg.resolved_fed();
  cc.lr_classifier_only = cfg.lr_classifier_only;
  cc.lr_joint = cfg.lr_joint;
  const ComparisonResult r = four_way_comparison(cc, data.encoder, data.train, data.val);
  std::ostringstream s;
  s << std::left << std::fixed << std::setprecision(2);
  s << std::setw(36) << "arm" << "top-1 (%)\n";
  s << std::setw(36) << "frozen encoder + MIPS" << 100.0 * r.frozen_mips << "\n";
  s << std::setw(36) << "trained adapter + MIPS" << 100.0 * r.adapter_mips << "\n";
  s << std::setw(36) << "frozen encoder + classifier" << 100.0 * r.classifier_only << "\n";
  s << std::setw(36) << "trained adapter + classifier" << 100.0 * r.combined << "\n";
  write_text(dir / "compare.txt", s.str());
  std::cout << s.str();
  return 0;
}

int cmd_bound(const Common& common, const std::string& run_dir) {
  Common c = common;
  if (c.config_path.empty()) c.config_path = (fs::path(run_dir) / "config.txt").string();
  const RunConfig cfg = resolve(c);
  const fs::path trace_path = fs::path(run_dir) / "trace.log";
  if (!fs::exists(trace_path)) {
    throw DataError("run has no gradient instrumentation (enable trace recording): " + trace_path.string() +
                    " is missing; rerun with --set fed.trace=true");
  }
  const Trace trace = load_trace(trace_path);
  RunData data = prepare_data(cfg);
  const FedConfig fed = cfg.resolved_fed();

  EstimateOptions opts;
  opts.gamma1 = cfg.bound_gamma1;
  opts.gamma2 = cfg.bound_gamma2;
  opts.reference_objective = overtrained_objective(fed, data.encoder, data.train, cfg.bound_reference_epochs);
  const TheoryConstants k = estimate_constants(trace, opts);
  const int T = static_cast<int>(trace.rounds.size()) - 2;

  std::ostringstream s;
  if (fed.steps_per_round != 1 || fed.weights != WeightScheme::kUniform || fed.pre_classifier) {
    s << "note: the bounds assume one local step per round, uniform weights and no dropout; this run has "
      << "steps_per_round=" << fed.steps_per_round << " weights=" << to_string(fed.weights)
      << " pre_classifier=" << (fed.pre_classifier ? "true" : "false") << "\n";
  }
  const double violation = certificate_violation(trace, k);
  s << "constants certified on the trace: " << (violation <= 0.0 ? "yes" : "no")
    << " (worst excess " << format_double(violation) << ")\n";

  Verification v;
  std::string name;
  if (fed.dp.mode == DpMode::kAdaptive) {
    name = "adaptive-dp";
    v = verify_bound(trace, bound_adaptive(k, fed.dp, fed.clients, fed.lr, T));
    const RecursionCheck rc = check_threshold_recursion(trace, fed.dp, k.B);
    s << format_verification(name, k, v);
    s << "threshold recursion: " << (rc.holds() ? "PASS" : "FAIL") << " worst_single="
      << format_double(rc.worst_single) << " square_sum=" << format_double(rc.square_sum)
      << " square_sum_bound=" << format_double(rc.square_sum_bound) << "\n";
    v.pass = v.pass && rc.holds();
  } else {
    name = "fixed-dp";
    double C = fed.dp.c0;
    double sigma0 = fed.dp.sigma0;
    if (fed.dp.mode == DpMode::kOff) {
      // No clipping and no noise: a threshold just above alpha B never binds.
      C = std::nextafter(fed.lr * k.B, std::numeric_limits<double>::infinity());
      sigma0 = 0.0;
    }
    v = verify_bound(trace, bound_fixed(k, C, sigma0, fed.lr, T));
    s << format_verification(name, k, v);
  }
  write_text(fs::path(run_dir) / "bound.txt", s.str());
  std::cout << s.str();
  return v.pass ? 0 : kExitBoundViolated;
}

int cmd_gen_data(const Common& common) {
  const RunConfig cfg = resolve(common);
  if (cfg.data.source != DataSource::kSynthetic) throw ConfigError("gen-data needs data.source = synthetic");
  const fs::path dir = prepare_out_dir(cfg);
  const Dataset all = gen_synthetic(cfg.data.n_per_class, cfg.data.classes, cfg.data.dim, cfg.data.spread,
                                    cfg.data.seed);
  const Encoder enc = Encoder::synthetic(cfg.encoder.seed, cfg.data.dim, cfg.encoder.d_hidden, cfg.encoder.depth,
                                         cfg.encoder.pooling);
  save_hidden_states(all, dir / "data.fchs");
  const Dataset hidden = compute_hidden_states(enc, AdapterParams<double>::identity(cfg.data.dim), all);
  save_hidden_states(hidden, dir / "hidden.fchs");
  std::cout << "wrote " << (dir / "data.fchs").string() << " (" << all.size() << " x " << all.dim << ") and "
            << (dir / "hidden.fchs").string() << " (" << hidden.size() << " x " << hidden.dim << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fedcar: federated classifier-as-retriever training with local differential privacy"};
  app.require_subcommand(1);
  app.footer(config_help() +
             "\nExit codes: 0 ok, 2 configuration, 3 data, 4 model, 5 network, 6 bound violated.");

  Common common;
  int client_id = 0;
  std::string connect;
  std::string run_dir;
  std::string model_path;
  std::string split = "val";

  auto* train = app.add_subcommand("train", "train a model (simulated federation or centralized)");
  auto* agg = app.add_subcommand("serve-agg", "run the aggregator of a networked federation");
  auto* client = app.add_subcommand("serve-client", "run one networked client");
  auto* eval = app.add_subcommand("eval", "top-K accuracy of a saved model");
  auto* compare = app.add_subcommand("compare", "four-way retrieval comparison");
  auto* bound = app.add_subcommand("bound", "check a traced run against its convergence bound");
  auto* gen = app.add_subcommand("gen-data", "write synthetic data and its precomputed hidden states");
  for (auto* sub : {train, agg, client, eval, compare, bound, gen}) add_common(sub, common);
  client->add_option("--id", client_id, "client index in [0, fed.clients)")->required();
  client->add_option("--connect", connect, "aggregator host:port (default net.address)");
  eval->add_option("--run", run_dir, "run directory holding config.txt and model.bin");
  eval->add_option("--model", model_path, "model file (overrides the one in --run)");
  eval->add_option("--split", split, "val, train or all");
  bound->add_option("--run", run_dir, "run directory trained with fed.trace = true")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ErrorClass::kConfig);
  }

  try {
    if (*train) return cmd_train(common);
    if (*agg) return cmd_serve_agg(common);
    if (*client) return cmd_serve_client(common, client_id, connect);
    if (*eval) return cmd_eval(common, run_dir, model_path, split);
    if (*compare) return cmd_compare(common);
    if (*bound) return cmd_bound(common, run_dir);
    if (*gen) return cmd_gen_data(common);
  } catch (const Error& e) {
    std::cerr << "fedcar: error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "fedcar: unexpected failure: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
