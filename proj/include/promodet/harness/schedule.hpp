#pragma once

#include <cmath>
#include <string>

#include "promodet/errors.hpp"

namespace promodet::harness {

// Epoch-based warm-up and step decay, evaluated per iteration.
struct LrSchedule {
  double floor_lr = 1e-6;
  double peak_lr = 2e-3;
  double warmup_epochs = 5;
  double decay1_epoch = 100;
  double decay2_epoch = 140;
  double total_epochs = 160;
  double decay_factor = 0.1;
  int steps_per_epoch = 1;

  void validate() const {
    if (!(floor_lr > 0 && peak_lr >= floor_lr)) {
      throw ConfigError("train.lr_peak: must be >= train.lr_floor > 0");
    }
    if (!(warmup_epochs >= 0 && warmup_epochs < decay1_epoch && decay1_epoch < decay2_epoch &&
          decay2_epoch <= total_epochs)) {
      throw ConfigError(
          "train.warmup_epochs: need warmup < decay1 < decay2 <= epochs");
    }
    if (steps_per_epoch < 1) throw ConfigError("train.steps_per_epoch: must be >= 1");
    if (!(decay_factor > 0 && decay_factor <= 1)) {
      throw ConfigError("train.decay_factor: must lie in (0, 1]");
    }
  }

  long warmup_steps() const { return std::lround(warmup_epochs * steps_per_epoch); }
  long decay1_step() const { return std::lround(decay1_epoch * steps_per_epoch); }
  long decay2_step() const { return std::lround(decay2_epoch * steps_per_epoch); }
  long total_steps() const { return std::lround(total_epochs * steps_per_epoch); }
};

inline double lr_at(long step, const LrSchedule& s) {
  if (step < 0) throw ConfigError("lr_at: negative step");
  const long warm = s.warmup_steps();
  if (step < warm) {
    return s.floor_lr + (s.peak_lr - s.floor_lr) * static_cast<double>(step) / warm;
  }
  if (step >= s.decay2_step()) return s.peak_lr * s.decay_factor * s.decay_factor;
  if (step >= s.decay1_step()) return s.peak_lr * s.decay_factor;
  return s.peak_lr;
}

}  // namespace promodet::harness
