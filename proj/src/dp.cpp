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

#include "fedcar/dp.hpp"

#include <cmath>
#include <string>

#include "fedcar/error.hpp"

namespace fedcar {

std::string_view to_string(DpMode mode) {
  switch (mode) {
    case DpMode::kOff: return "off";
    case DpMode::kFixed: return "fixed";
    case DpMode::kAdaptive: return "adaptive";
  }
  return "off";
}

DpMode parse_dp_mode(std::string_view text) {
  if (text == "off") return DpMode::kOff;
  if (text == "fixed") return DpMode::kFixed;
  if (text == "adaptive") return DpMode::kAdaptive;
  throw ConfigError("dp.mode must be off, fixed or adaptive, got '" + std::string(text) + "'");
}

double clip_count_noise_std(int clients) { return clients / 20.0; }

double delta_noise_multiplier(double z, int clients) {
  const double sigma_b = clip_count_noise_std(clients);
  if (!(z > 0.0) || !(z < 2.0 * sigma_b)) {
    throw ConfigError("adaptive DP needs 0 < dp.z < m/10 = " + std::to_string(2.0 * sigma_b) +
                      " (got dp.z = " + std::to_string(z) + ")");
  }
  return 1.0 / std::sqrt(1.0 / (z * z) - 1.0 / (4.0 * sigma_b * sigma_b));
}

void DpConfig::validate(int clients) const {
  if (warmup_rounds < 0) throw ConfigError("dp.warmup_rounds must be >= 0");
  switch (mode) {
    case DpMode::kOff:
      return;
    case DpMode::kFixed:
      if (!(c0 > 0.0)) throw ConfigError("dp.c0 must be > 0");
      if (!(sigma0 >= 0.0)) throw ConfigError("dp.sigma0 must be >= 0");
      return;
    case DpMode::kAdaptive:
      if (!(c0 > 0.0)) throw ConfigError("dp.c0 must be > 0");
      if (!(beta > 0.0 && beta <= 1.0)) {
        throw ConfigError("dp.beta must lie in (0, 1] for adaptive DP (beta = 0 is fixed DP)");
      }
      if (!(gamma > 0.0)) throw ConfigError("dp.gamma must be > 0");
      delta_noise_multiplier(z, clients);
      return;
  }
}

DpState init_dp(const DpConfig& cfg, int clients) {
  cfg.validate(clients);
  DpState s;
  s.sigma_b = clip_count_noise_std(clients);
  s.clip_threshold = cfg.c0;
  switch (cfg.mode) {
    case DpMode::kOff:
      break;
    case DpMode::kFixed:
      s.sigma0_sq = cfg.sigma0 * cfg.sigma0 * cfg.c0 * cfg.c0;
      s.sigma1_sq = 0.0;
      break;
    case DpMode::kAdaptive: {
      s.z_delta = delta_noise_multiplier(cfg.z, clients);
      const double zd2 = s.z_delta * s.z_delta;
      s.sigma1_sq = 2.0 * zd2 * cfg.beta * cfg.beta * cfg.gamma * cfg.gamma;
      s.sigma0_sq = 2.0 * zd2 * (1.0 - cfg.beta) * (1.0 - cfg.beta) * cfg.c0 * cfg.c0;
      break;
    }
  }
  return s;
}

ClipResult clip_update(const Eigen::VectorXd& delta, double clip_threshold) {
  if (!(clip_threshold >= 0.0)) throw ModelError("clip threshold must be >= 0");
  ClipResult r;
  r.norm = delta.norm();
  if (r.norm > clip_threshold) {
    r.clipped = true;
    r.update = (clip_threshold / r.norm) * delta;
  } else {
    r.update = delta;
  }
  return r;
}

Eigen::VectorXd sample_noise(Eigen::Index size, const DpState& state, double delta_norm_sq, SplitMix64& rng) {
  const double variance = state.sigma0_sq + state.sigma1_sq * delta_norm_sq;
  if (variance < 0.0) throw ModelError("negative noise variance");
  Eigen::VectorXd noise = Eigen::VectorXd::Zero(size);
  if (variance == 0.0) return noise;
  const double stddev = std::sqrt(variance);
  for (Eigen::Index i = 0; i < size; ++i) noise(i) = stddev * rng.gaussian();
  return noise;
}

DpOutcome dp_transform(const Model& theta_prev, const Eigen::VectorXd& delta, const DpState& state,
                       DpMode mode, SplitMix64& rng) {
  const Eigen::VectorXd prev = flatten(theta_prev, ParamScope::kTrainable);
  if (prev.size() != delta.size()) {
    throw ModelError("update has " + std::to_string(delta.size()) + " entries, trainable parameters " +
                     std::to_string(prev.size()));
  }
  DpOutcome out;
  out.model = theta_prev;
  if (mode == DpMode::kOff) {
    out.delta_norm = delta.norm();
    assign_flat<double>(out.model, prev + delta, ParamScope::kTrainable);
    return out;
  }
  ClipResult clip = clip_update(delta, state.clip_threshold);
  out.delta_norm = clip.norm;
  out.clipped = clip.clipped;
  const Eigen::VectorXd noise = sample_noise(delta.size(), state, clip.norm * clip.norm, rng);
  assign_flat<double>(out.model, prev + clip.update + noise, ParamScope::kTrainable);
  return out;
}

DpState adapt_threshold(const DpState& state, const DpConfig& cfg, double delta_norm) {
  if (cfg.mode != DpMode::kAdaptive) {
    throw ModelError("adapt_threshold called with dp.mode = " + std::string(to_string(cfg.mode)));
  }
  DpState next = state;
  next.clip_threshold = (1.0 - cfg.beta) * state.clip_threshold + cfg.beta * cfg.gamma * delta_norm;
  const double zd2 = state.z_delta * state.z_delta;
  next.sigma0_sq = 2.0 * zd2 * (1.0 - cfg.beta) * (1.0 - cfg.beta) * next.clip_threshold * next.clip_threshold;
  return next;
}

}  // namespace fedcar
