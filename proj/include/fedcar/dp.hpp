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

#include <Eigen/Dense>

#include <string_view>

#include "fedcar/model.hpp"
#include "fedcar/rng.hpp"

namespace fedcar {

enum class DpMode { kOff, kFixed, kAdaptive };

std::string_view to_string(DpMode mode);
DpMode parse_dp_mode(std::string_view text);

/// Client-side local DP settings.
///
/// Fixed: clip threshold `c0`, noise multiplier `sigma0` (per-coordinate
/// noise variance sigma0^2 c0^2).
/// Adaptive: initial threshold `c0`, EMA rate `beta` in (0, 1], target
/// multiplier `gamma`, noise multiplier `z`.
struct DpConfig {
  DpMode mode = DpMode::kOff;
  double c0 = 1.0;
  double sigma0 = 0.1;
  double beta = 0.1;
  double gamma = 0.9;
  double z = 0.1;
  int warmup_rounds = 0;
  bool per_iteration = false;

  /// Throws ConfigError naming the violated constraint.
  void validate(int clients) const;
  bool active_in_round(int round) const { return mode != DpMode::kOff && round >= warmup_rounds; }
};

struct DpState {
  double clip_threshold = 0.0;
  double sigma0_sq = 0.0;
  double sigma1_sq = 0.0;
  double z_delta = 0.0;
  double sigma_b = 0.0;
};

/// Noise std on the number of clipping clients, m / 20.
double clip_count_noise_std(int clients);

/// z_delta = (z^-2 - (2 sigma_b)^-2)^-1/2; requires z < 2 sigma_b.
double delta_noise_multiplier(double z, int clients);

DpState init_dp(const DpConfig& cfg, int clients);

struct ClipResult {
  Eigen::VectorXd update;
  double norm = 0.0;      // norm of the unclipped input
  bool clipped = false;   // norm > C
};

/// min(1, C/||delta||) * delta over the flat vector; scale 1 when delta = 0.
ClipResult clip_update(const Eigen::VectorXd& delta, double clip_threshold);

/// i.i.d. N(0, sigma0_sq + sigma1_sq * delta_norm_sq) entries.
Eigen::VectorXd sample_noise(Eigen::Index size, const DpState& state, double delta_norm_sq, SplitMix64& rng);

struct DpOutcome {
  Model model;
  double delta_norm = 0.0;
  bool clipped = false;
};

/// theta_prev + clip(delta) + noise over the trainable parameters; for mode
/// Off, theta_prev + delta.
DpOutcome dp_transform(const Model& theta_prev, const Eigen::VectorXd& delta, const DpState& state,
                       DpMode mode, SplitMix64& rng);

/// C' = (1 - beta) C + beta gamma ||delta||, then sigma0_sq refreshed from C'.
DpState adapt_threshold(const DpState& state, const DpConfig& cfg, double delta_norm);

}  // namespace fedcar
