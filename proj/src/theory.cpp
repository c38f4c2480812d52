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

#include "fedcar/theory.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "fedcar/error.hpp"
#include "fedcar/metrics.hpp"

namespace fedcar {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kInf = std::numeric_limits<double>::infinity();

double variance_factor(const TheoryConstants& c) { return c.rho1_sq + c.zeta1_sq + 1.0; }

}  // namespace

void TheoryConstants::validate() const {
  for (double v : {L_bar, rho0_sq, rho1_sq, zeta0_sq, zeta1_sq, B, p}) {
    if (!(v >= 0.0)) throw ModelError("theory constants must be nonnegative");
  }
  if (!(gamma1 > 1.0) || !(gamma2 > 1.0)) throw ModelError("Gamma1 and Gamma2 must exceed 1");
  if (!(p <= 1.0)) throw ModelError("clipping probability above 1");
}

Eigen::VectorXd objective_gradient(const RoundTrace& round) {
  if (round.clients.empty()) throw DataError("round " + std::to_string(round.round) + " has no client gradients");
  Eigen::VectorXd g = Eigen::VectorXd::Zero(round.clients.front().local_grad.size());
  for (const ClientTrace& c : round.clients) g += c.local_grad;
  return g / static_cast<double>(round.clients.size());
}

double objective_value(const RoundTrace& round) {
  if (round.clients.empty()) throw DataError("round " + std::to_string(round.round) + " has no client losses");
  double f = 0.0;
  for (const ClientTrace& c : round.clients) f += c.local_loss;
  return f / static_cast<double>(round.clients.size());
}

EnvelopeFit envelope_fit(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.empty()) throw DataError("envelope fit needs matching, nonempty samples");
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  auto sse = [&](double a, double b) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (y[i] - a - b * x[i]) * (y[i] - a - b * x[i]);
    return s;
  };
  // Candidates: interior solution, slope-only, intercept-only.
  std::vector<EnvelopeFit> cand;
  const double det = n * sxx - sx * sx;
  if (det > 1e-12 * std::max(1.0, n * sxx)) {
    const double b = (n * sxy - sx * sy) / det;
    const double a = (sy - b * sx) / n;
    if (a >= 0.0 && b >= 0.0) cand.push_back({a, b});
  }
  if (sxx > 0.0) cand.push_back({0.0, std::max(0.0, sxy / sxx)});
  cand.push_back({std::max(0.0, sy / n), 0.0});
  EnvelopeFit best = cand.front();
  for (const auto& c : cand)
    if (sse(c.intercept, c.slope) < sse(best.intercept, best.slope)) best = c;

  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, y[i] - best.intercept - best.slope * x[i]);
  best.intercept += worst;
  // Rounding can leave a point a few ulps above the line.
  for (std::size_t i = 0; i < x.size(); ++i) {
    while (y[i] > best.intercept + best.slope * x[i]) best.intercept = std::nextafter(best.intercept, kInf);
  }
  return best;
}

TheoryConstants estimate_constants(const Trace& trace, const EstimateOptions& opts) {
  const auto& rounds = trace.rounds;
  if (rounds.size() < 2) throw DataError("constant estimation needs at least 2 recorded parameter points");
  TheoryConstants c;
  c.gamma1 = opts.gamma1;
  c.gamma2 = opts.gamma2;

  std::vector<Eigen::VectorXd> grads;
  std::vector<double> gnorm_sq;
  for (const RoundTrace& r : rounds) {
    grads.push_back(objective_gradient(r));
    gnorm_sq.push_back(grads.back().squaredNorm());
  }
  for (std::size_t a = 0; a < rounds.size(); ++a) {
    for (std::size_t b = a + 1; b < rounds.size(); ++b) {
      const double dtheta = (rounds[a].theta - rounds[b].theta).norm();
      if (dtheta > 0.0) c.L_bar = std::max(c.L_bar, (grads[a] - grads[b]).norm() / dtheta);
    }
  }

  std::vector<double> var, div;
  double max_g = 0.0;
  for (std::size_t k = 0; k < rounds.size(); ++k) {
    double v = 0.0, d = 0.0;
    for (const ClientTrace& ct : rounds[k].clients) {
      v += ct.stochastic_variance;
      d += (ct.local_grad - grads[k]).squaredNorm();
      max_g = std::max(max_g, ct.max_grad_norm);
    }
    const double m = static_cast<double>(rounds[k].clients.size());
    var.push_back(v / m);
    div.push_back(d / m);
  }
  const EnvelopeFit fv = envelope_fit(gnorm_sq, var);
  const EnvelopeFit fd = envelope_fit(gnorm_sq, div);
  c.rho0_sq = fv.intercept;
  c.rho1_sq = fv.slope;
  c.zeta0_sq = fd.intercept;
  c.zeta1_sq = fd.slope;
  c.B = max_g * opts.b_inflation;

  const std::size_t m = rounds.front().clients.size();
  for (std::size_t i = 0; i < m; ++i) {
    int trained = 0, clipped = 0;
    for (const RoundTrace& r : rounds) {
      if (i >= r.clients.size() || r.clients[i].steps == 0) continue;
      ++trained;
      clipped += r.clients[i].clipped ? 1 : 0;
    }
    if (trained > 0) c.p = std::max(c.p, static_cast<double>(clipped) / trained);
  }

  c.F0 = objective_value(rounds.front());
  c.F_star = c.F0;
  for (const RoundTrace& r : rounds) c.F_star = std::min(c.F_star, objective_value(r));
  if (opts.reference_objective) c.F_star = std::min(c.F_star, *opts.reference_objective);
  return c;
}

double certificate_violation(const Trace& trace, const TheoryConstants& c) {
  double worst = -kInf;
  for (const RoundTrace& r : trace.rounds) {
    const Eigen::VectorXd g = objective_gradient(r);
    const double x = g.squaredNorm();
    double v = 0.0, d = 0.0;
    for (const ClientTrace& ct : r.clients) {
      v += ct.stochastic_variance;
      d += (ct.local_grad - g).squaredNorm();
      worst = std::max(worst, ct.max_grad_norm - c.B);
    }
    const double m = static_cast<double>(r.clients.size());
    worst = std::max(worst, v / m - (c.rho0_sq + c.rho1_sq * x));
    worst = std::max(worst, d / m - (c.zeta0_sq + c.zeta1_sq * x));
  }
  return worst;
}

// ---------------------------------------------------------------------------

double omega_fixed(double C, double B, double alpha, double gamma1, double gamma2) {
  if (!(C > 0.0) || !(B > 0.0) || !(alpha > 0.0)) throw ModelError("omega needs positive C, B and alpha");
  if (!(gamma1 > 1.0) || !(gamma2 > 1.0)) throw ModelError("omega needs Gamma1, Gamma2 > 1");
  return std::min(C / B * (1.0 - 1.0 / gamma1), alpha * (1.0 - 1.0 / gamma2));
}

double fixed_rate_limit(const TheoryConstants& c, double C, double sigma1_sq) {
  const double denom = 3.0 * c.L_bar * variance_factor(c) * (1.0 + sigma1_sq);
  if (denom == 0.0) return kInf;
  return std::min(std::sqrt(2.0 * C / (denom * c.B * c.gamma1)), 2.0 / (denom * c.gamma2));
}

double fixed_descent_slack(const TheoryConstants& c, double C, double alpha, double sigma1_sq) {
  const double q = 1.5 * c.L_bar * variance_factor(c) * alpha * alpha * (1.0 + sigma1_sq);
  return std::min(C / (c.B * c.gamma1) - q, alpha / c.gamma2 - q);
}

BoundValue bound_fixed(const TheoryConstants& c, double C, double sigma0, double alpha, int T) {
  c.validate();
  BoundValue b;
  if (!(C > 0.0) || !(c.B > 0.0) || !(alpha > 0.0) || T < 0) {
    b.value = b.omega = kNaN;
    return b;
  }
  b.omega = omega_fixed(C, c.B, alpha, c.gamma1, c.gamma2);
  const double w = b.omega;
  b.optimization_term = (c.F0 - c.F_star) / (w * (T + 1.0));
  b.dp_term = c.L_bar * C * C * (1.0 + sigma0 * sigma0) / (2.0 * w);
  b.variance_term = 3.0 * c.L_bar * (c.rho0_sq + c.zeta0_sq) * alpha * alpha / (2.0 * w);
  b.value = b.optimization_term + b.dp_term + b.variance_term;
  b.admissible = w > 0.0 && alpha < fixed_rate_limit(c, C);
  b.no_clipping_regime = C > alpha * c.B;
  return b;
}

double omega_adaptive(double p, int clients, double gamma) {
  if (!(p >= 0.0 && p <= 1.0) || clients < 1) throw ModelError("omega needs p in [0, 1] and m >= 1");
  if (!(gamma > 1.0)) throw ModelError("omega needs Gamma > 1");
  return std::pow(1.0 - p, clients) * (1.0 - 1.0 / gamma);
}

namespace {

double adaptive_sigma1_sq(const DpConfig& dp, int clients) {
  const double zd = delta_noise_multiplier(dp.z, clients);
  return 2.0 * zd * zd * dp.beta * dp.beta * dp.gamma * dp.gamma;
}

}  // namespace

double adaptive_rate_limit(const TheoryConstants& c, const DpConfig& dp, int clients) {
  const double s1 = adaptive_sigma1_sq(dp, clients);
  const double denom = 3.0 * c.L_bar * variance_factor(c) * c.gamma2 * (1.0 + s1);
  if (denom == 0.0) return kInf;
  return 2.0 * std::pow(1.0 - c.p, clients) / denom;
}

double adaptive_descent_slack(const TheoryConstants& c, const DpConfig& dp, int clients, double alpha) {
  const double s1 = adaptive_sigma1_sq(dp, clients);
  const double q = 1.5 * c.L_bar * variance_factor(c) * alpha * alpha * (1.0 + s1);
  return alpha * std::pow(1.0 - c.p, clients) / c.gamma2 - q;
}

BoundValue bound_adaptive(const TheoryConstants& c, const DpConfig& dp, int clients, double alpha, int T) {
  c.validate();
  if (!(dp.beta > 0.0 && dp.beta <= 1.0)) throw ConfigError("adaptive bound needs beta in (0, 1]");
  const double zd = delta_noise_multiplier(dp.z, clients);
  BoundValue b;
  b.omega = omega_adaptive(c.p, clients, c.gamma2);
  if (!(b.omega > 0.0) || !(alpha > 0.0) || T < 0) {
    b.value = kNaN;
    return b;
  }
  const double w = b.omega;
  const double n = T + 1.0;
  const double beta = dp.beta, gamma = dp.gamma, C0 = dp.c0;
  b.optimization_term = (c.F0 - c.F_star) / (w * alpha * n);
  const double bracket = C0 * C0 / ((1.0 - (1.0 - beta) * (1.0 - beta)) * alpha * n) +
                         2.0 * gamma * c.B * C0 / (beta * n) + gamma * gamma * c.B * c.B * alpha;
  b.dp_term = c.L_bar / (2.0 * w) * (1.0 + zd * zd * (1.0 - beta) * (1.0 - beta)) * bracket;
  b.variance_term = 3.0 * c.L_bar / (2.0 * w) * (c.rho0_sq + c.zeta0_sq) * alpha *
                    (1.0 + 2.0 * zd * zd * beta * beta * gamma * gamma);
  b.value = b.optimization_term + b.dp_term + b.variance_term;
  b.admissible = alpha < adaptive_rate_limit(c, dp, clients);
  return b;
}

// ---------------------------------------------------------------------------

double threshold_trajectory_bound(double C0, double beta, double gamma, double U, int t) {
  return std::pow(1.0 - beta, t) * C0 + gamma * U;
}

double threshold_square_sum_bound(double C0, double beta, double gamma, double U, int T) {
  return C0 * C0 / (1.0 - (1.0 - beta) * (1.0 - beta)) + 2.0 * gamma * U * C0 / beta +
         gamma * gamma * U * U * (T + 1.0);
}

namespace {

struct ThresholdObs {
  double clip_threshold;
  int steps;
};

RecursionCheck check_recursion(const std::vector<std::vector<ThresholdObs>>& rounds, const DpConfig& dp,
                               double alpha, double B) {
  if (dp.mode != DpMode::kAdaptive) throw ConfigError("threshold recursion applies to adaptive DP only");
  RecursionCheck out;
  out.worst_single = -kInf;
  int t = 0;
  int max_steps = 0;
  for (std::size_t r = static_cast<std::size_t>(dp.warmup_rounds); r < rounds.size(); ++r, ++t) {
    double mean_sq = 0.0;
    for (const ThresholdObs& o : rounds[r]) {
      max_steps = std::max(max_steps, o.steps);
      const double U = alpha * B * o.steps;
      out.worst_single =
          std::max(out.worst_single, o.clip_threshold - threshold_trajectory_bound(dp.c0, dp.beta, dp.gamma, U, t));
      mean_sq += o.clip_threshold * o.clip_threshold;
    }
    out.square_sum += mean_sq / static_cast<double>(rounds[r].size());
  }
  if (t == 0) throw DataError("no adaptive rounds after warmup");
  out.square_sum_bound = threshold_square_sum_bound(dp.c0, dp.beta, dp.gamma, alpha * B * max_steps, t - 1);
  return out;
}

}  // namespace

RecursionCheck check_threshold_recursion(const Trace& trace, const DpConfig& dp, double B) {
  if (trace.rounds.size() < 2) throw DataError("trace has no training rounds");
  std::vector<std::vector<ThresholdObs>> rounds;
  for (std::size_t r = 0; r + 1 < trace.rounds.size(); ++r) {
    auto& obs = rounds.emplace_back();
    for (const ClientTrace& ct : trace.rounds[r].clients) obs.push_back({ct.clip_threshold, ct.steps});
  }
  return check_recursion(rounds, dp, trace.lr, B);
}

RecursionCheck check_threshold_recursion(const std::vector<RoundRecord>& records, const DpConfig& dp, double lr) {
  if (records.empty()) throw DataError("run has no rounds");
  double B = 0.0;
  std::vector<std::vector<ThresholdObs>> rounds;
  for (const RoundRecord& r : records) {
    auto& obs = rounds.emplace_back();
    for (const ClientRecord& c : r.clients) {
      obs.push_back({c.clip_threshold, c.steps});
      B = std::max(B, c.max_grad_norm);
    }
  }
  return check_recursion(rounds, dp, lr, B);
}

// ---------------------------------------------------------------------------

double measured_stationarity(const Trace& trace) {
  if (trace.rounds.size() < 2) throw DataError("run has no gradient instrumentation (enable trace recording)");
  double sum = 0.0;
  const std::size_t n = trace.rounds.size() - 1;
  for (std::size_t t = 0; t < n; ++t) sum += objective_gradient(trace.rounds[t]).squaredNorm();
  return sum / static_cast<double>(n);
}

Verification verify_bound(const Trace& trace, const BoundValue& bound) {
  Verification v;
  v.measured = measured_stationarity(trace);
  v.T = static_cast<int>(trace.rounds.size()) - 2;
  v.bound = bound;
  v.pass = bound.admissible && std::isfinite(bound.value) && v.measured <= bound.value;
  return v;
}

double objective_on_shards(const Model& model, const Encoder& enc, const std::vector<Dataset>& shards) {
  if (shards.empty()) throw DataError("no shards");
  double f = 0.0;
  for (const Dataset& s : shards) f += evaluate_loss(model, enc, s).loss;
  return f / static_cast<double>(shards.size());
}

double overtrained_objective(const FedConfig& cfg, const Encoder& enc, const Dataset& train, int epochs) {
  FedConfig c = cfg;
  c.rounds = epochs;
  c.local_epochs = 1;
  c.steps_per_round = 0;
  const TrainingResult r = run_centralized(c, enc, train, train);
  const Encoder te = training_encoder(cfg, enc, train, train);
  return objective_on_shards(r.model, te, partition(train, cfg.clients, cfg.proportions, cfg.seed));
}

std::string format_verification(const std::string& name, const TheoryConstants& c, const Verification& v) {
  std::ostringstream o;
  o << (v.pass ? "PASS " : "FAIL ") << name << ": measured=" << v.measured << " bound=" << v.bound.value
    << " T=" << v.T << " admissible=" << (v.bound.admissible ? "yes" : "no") << '\n';
  o << "  terms: optimization=" << v.bound.optimization_term << " dp=" << v.bound.dp_term
    << " variance=" << v.bound.variance_term << " omega=" << v.bound.omega
    << (v.bound.no_clipping_regime ? " (no-clipping regime)" : "") << '\n';
  o << "  constants: L=" << c.L_bar << " rho0^2=" << c.rho0_sq << " rho1^2=" << c.rho1_sq
    << " zeta0^2=" << c.zeta0_sq << " zeta1^2=" << c.zeta1_sq << " B=" << c.B << " p=" << c.p
    << " Gamma1=" << c.gamma1 << " Gamma2=" << c.gamma2 << " F0=" << c.F0 << " F*=" << c.F_star << '\n';
  return o.str();
}

// ---------------------------------------------------------------------------

namespace {

std::string join(const Eigen::VectorXd& v) {
  std::string s;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += format_double(v(i));
  }
  return s;
}

std::string join(const std::vector<double>& v) {
  return join(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
}

std::vector<double> split_doubles(const std::map<std::string, std::string>& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw DataError("trace line lacks '" + key + "'");
  std::vector<double> out;
  if (it->second.empty()) return out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = it->second.find(',', start);
    std::map<std::string, std::string> one{{key, it->second.substr(start, comma - start)}};
    out.push_back(kv_double(one, key));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

Eigen::VectorXd to_vector(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

void write_trace(std::ostream& out, const Trace& trace) {
  out << "kind=trace clients=" << trace.clients << " lr=" << format_double(trace.lr)
      << " weights=" << join(trace.weights) << '\n';
  for (const RoundTrace& r : trace.rounds) {
    out << "kind=point round=" << r.round << " global_loss=" << format_double(r.global_loss)
        << " theta=" << join(r.theta) << " global_grad=" << join(r.global_grad) << '\n';
    for (std::size_t i = 0; i < r.clients.size(); ++i) {
      const ClientTrace& c = r.clients[i];
      out << "kind=client round=" << r.round << " client=" << i << " local_loss=" << format_double(c.local_loss)
          << " stochastic_variance=" << format_double(c.stochastic_variance)
          << " max_grad_norm=" << format_double(c.max_grad_norm) << " delta_norm=" << format_double(c.delta_norm)
          << " clip_threshold=" << format_double(c.clip_threshold) << " clipped=" << (c.clipped ? 1 : 0)
          << " steps=" << c.steps << " local_grad=" << join(c.local_grad) << '\n';
    }
  }
}

Trace read_trace(std::istream& in) {
  Trace t;
  std::string line;
  int lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto kv = parse_kv_line(line);
      const auto kind = kv.find("kind");
      if (kind == kv.end()) throw DataError("missing kind");
      if (kind->second == "trace") {
        t.clients = static_cast<int>(kv_int(kv, "clients"));
        t.lr = kv_double(kv, "lr");
        t.weights = split_doubles(kv, "weights");
        header = true;
      } else if (kind->second == "point") {
        if (!header) throw DataError("point before trace header");
        RoundTrace r;
        r.round = static_cast<int>(kv_int(kv, "round"));
        r.global_loss = kv_double(kv, "global_loss");
        r.theta = to_vector(split_doubles(kv, "theta"));
        r.global_grad = to_vector(split_doubles(kv, "global_grad"));
        t.rounds.push_back(std::move(r));
      } else if (kind->second == "client") {
        if (t.rounds.empty()) throw DataError("client line before any point");
        RoundTrace& r = t.rounds.back();
        if (kv_int(kv, "round") != r.round || kv_int(kv, "client") != static_cast<long long>(r.clients.size())) {
          throw DataError("client line out of order");
        }
        ClientTrace c;
        c.local_loss = kv_double(kv, "local_loss");
        c.stochastic_variance = kv_double(kv, "stochastic_variance");
        c.max_grad_norm = kv_double(kv, "max_grad_norm");
        c.delta_norm = kv_double(kv, "delta_norm");
        c.clip_threshold = kv_double(kv, "clip_threshold");
        c.clipped = kv_int(kv, "clipped") != 0;
        c.steps = static_cast<int>(kv_int(kv, "steps"));
        c.local_grad = to_vector(split_doubles(kv, "local_grad"));
        if (c.local_grad.size() != r.theta.size()) throw DataError("local gradient size differs from theta");
        r.clients.push_back(std::move(c));
      } else {
        throw DataError("unknown kind '" + kind->second + "'");
      }
    } catch (const DataError& e) {
      throw DataError("trace line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!header) throw DataError("trace has no header line");
  return t;
}

void save_trace(const Trace& trace, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  write_trace(out, trace);
  if (!out) throw DataError("failed writing " + path.string());
}

Trace load_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return read_trace(in);
}

}  // namespace fedcar
