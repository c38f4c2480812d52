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

#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "fedcar/dp.hpp"
#include "fedcar/federation.hpp"

namespace fedcar {

// Convergence bounds for constant-rate federated SGD with local DP, and the
// machinery to check them against an instrumented run. The objective is
// F = (1/m) sum_i F_i throughout, matching uniform aggregation weights.

struct TheoryConstants {
  double L_bar = 0.0;     // smoothness
  double rho0_sq = 0.0;   // stochastic variance: (1/m) sum E||g_i - grad F_i||^2 <= rho0^2 + rho1^2 ||grad F||^2
  double rho1_sq = 0.0;
  double zeta0_sq = 0.0;  // diversity: (1/m) sum ||grad F_i - grad F||^2 <= zeta0^2 + zeta1^2 ||grad F||^2
  double zeta1_sq = 0.0;
  double B = 0.0;         // stochastic gradient norm bound
  double p = 0.0;         // max per-client clipping frequency
  double gamma1 = 2.0;
  double gamma2 = 2.0;
  double F0 = 0.0;
  double F_star = 0.0;

  void validate() const;
};

/// Gradient of F at the round's parameters: plain mean of the local gradients.
Eigen::VectorXd objective_gradient(const RoundTrace& round);
double objective_value(const RoundTrace& round);

struct EstimateOptions {
  double b_inflation = 1.05;
  double gamma1 = 2.0;
  double gamma2 = 2.0;
  /// Extra candidate for F*, e.g. the objective at an overtrained model.
  std::optional<double> reference_objective;
};

/// Nonnegative least squares of y on (1, x), then the intercept is raised by
/// the largest remaining residual so that every point lies on or below the
/// fitted line.
struct EnvelopeFit {
  double intercept = 0.0;
  double slope = 0.0;
};
EnvelopeFit envelope_fit(const std::vector<double>& x, const std::vector<double>& y);

/// L_bar from secant ratios over all pairs of recorded points, the two
/// variance pairs by envelope fit, B from observed gradient norms, p from
/// clip frequencies, F0 from the first point, F* as the smallest objective
/// seen (or the reference). Throws DataError with fewer than 2 points.
TheoryConstants estimate_constants(const Trace& trace, const EstimateOptions& opts = {});

/// Largest violation (left side minus right side) of the variance, diversity
/// and gradient-bound assumptions over the trace; <= 0 means all hold.
double certificate_violation(const Trace& trace, const TheoryConstants& c);

// ---------------------------------------------------------------------------
// Fixed DP

/// min(C/B (1 - 1/G1), alpha (1 - 1/G2)). Throws ModelError on nonpositive
/// input or G <= 1.
double omega_fixed(double C, double B, double alpha, double gamma1, double gamma2);

/// alpha < min(sqrt(2C / (3 L K B (1 + s1) G1)), 2 / (3 L K (1 + s1) G2))
/// with K = rho1^2 + zeta1^2 + 1 and s1 = sigma1^2 (0 under fixed DP).
double fixed_rate_limit(const TheoryConstants& c, double C, double sigma1_sq = 0.0);

/// Slack of the two inequalities behind omega: the per-round descent
/// coefficient minus each argument of omega. Positive exactly when alpha is
/// below fixed_rate_limit.
double fixed_descent_slack(const TheoryConstants& c, double C, double alpha, double sigma1_sq = 0.0);

struct BoundValue {
  double value = 0.0;
  double omega = 0.0;
  double optimization_term = 0.0;  // (F0 - F*) / ...
  double dp_term = 0.0;            // clipping and noise
  double variance_term = 0.0;      // gradient variance
  bool admissible = false;
  bool no_clipping_regime = false;  // C > alpha B: clipping never fires
};

/// (F0 - F*) / (w (T+1)) + L C^2 (1 + s0^2) / (2 w) + 3 L (rho0^2 + zeta0^2) alpha^2 / (2 w).
BoundValue bound_fixed(const TheoryConstants& c, double C, double sigma0, double alpha, int T);

// ---------------------------------------------------------------------------
// Adaptive DP

/// (1 - p)^m (1 - 1/G2).
double omega_adaptive(double p, int clients, double gamma);

/// 2 (1 - p)^m / (3 L K G2) / (1 + 2 zD^2 beta^2 gamma^2).
double adaptive_rate_limit(const TheoryConstants& c, const DpConfig& dp, int clients);

/// alpha (1 - p)^m / G2 - 1.5 L K alpha^2 (1 + sigma1^2); positive exactly
/// when alpha is below adaptive_rate_limit.
double adaptive_descent_slack(const TheoryConstants& c, const DpConfig& dp, int clients, double alpha);

/// (F0 - F*) / (w alpha (T+1))
///   + L / (2w) (1 + zD^2 (1-beta)^2) [C0^2 / ((1 - (1-beta)^2) alpha (T+1))
///                                      + 2 gamma B C0 / (beta (T+1)) + gamma^2 B^2 alpha]
///   + 3 L / (2w) (rho0^2 + zeta0^2) alpha (1 + 2 zD^2 beta^2 gamma^2).
/// Throws ConfigError when zD is undefined.
BoundValue bound_adaptive(const TheoryConstants& c, const DpConfig& dp, int clients, double alpha, int T);

// ---------------------------------------------------------------------------
// Threshold recursion

/// C^(t) <= (1-beta)^t C0 + gamma U, with U the largest possible update norm
/// (alpha B per local step).
double threshold_trajectory_bound(double C0, double beta, double gamma, double U, int t);

/// sum_{t=0}^{T} C_t^2 <= C0^2 / (1 - (1-beta)^2) + 2 gamma U C0 / beta + gamma^2 U^2 (T+1).
double threshold_square_sum_bound(double C0, double beta, double gamma, double U, int T);

struct RecursionCheck {
  double worst_single = 0.0;  // max over clients and rounds of C_i^(t) - bound
  double square_sum = 0.0;    // sum_t mean_i (C_i^(t))^2
  double square_sum_bound = 0.0;
  bool holds(double slack = 1e-9) const {
    return worst_single <= slack && square_sum <= square_sum_bound + slack;
  }
};

/// Checks an adaptive run's recorded thresholds against both recursions,
/// using U = alpha B steps.
RecursionCheck check_threshold_recursion(const Trace& trace, const DpConfig& dp, double B);

/// Same check from the per-round records of any adaptive run, with B the
/// largest minibatch gradient norm the clients observed.
RecursionCheck check_threshold_recursion(const std::vector<RoundRecord>& records, const DpConfig& dp, double lr);

// ---------------------------------------------------------------------------
// Verification

struct Verification {
  int T = 0;                 // iterations counted, rounds - 1
  double measured = 0.0;     // (1/(T+1)) sum_{t=0}^{T} ||grad F(theta_t)||^2
  BoundValue bound;
  bool pass = false;         // admissible and measured <= bound
};

/// Measured side from the trace's first `rounds` points (the final model is
/// excluded). Throws DataError when the trace is missing.
double measured_stationarity(const Trace& trace);
Verification verify_bound(const Trace& trace, const BoundValue& bound);

/// F = (1/m) sum_i loss(model, shard_i) in eval mode.
double objective_on_shards(const Model& model, const Encoder& enc, const std::vector<Dataset>& shards);

/// Objective after `epochs` of centralized full-data SGD from the same
/// initialization: a stand-in for F* that no run can observe directly.
double overtrained_objective(const FedConfig& cfg, const Encoder& enc, const Dataset& train, int epochs = 200);

/// Text report with one PASS/FAIL line per bound checked.
std::string format_verification(const std::string& name, const TheoryConstants& c, const Verification& v);

// ---------------------------------------------------------------------------
// Trace files: line-oriented key=value text.

void write_trace(std::ostream& out, const Trace& trace);
Trace read_trace(std::istream& in);
void save_trace(const Trace& trace, const std::filesystem::path& path);
Trace load_trace(const std::filesystem::path& path);

}  // namespace fedcar
