#pragma once

#include <functional>
#include <string>
#include <vector>

#include "viskin/serialization.hpp"

namespace viskin {

/// Desk-scale reproduction of one of the evaluation studies. Every
/// experiment is deterministic given (config, seed); trials carry
/// pre-assigned seeds so running them in parallel never changes results.
struct ExperimentConfig {
  std::string name;
  uint64_t seed = 42;
  int trials = 0;  // 0 = experiment-specific default
  int samples = 100;      // training-set size where applicable
  int k = 0;              // k-fold parameter (0 = sweep the default values)
  double noise = -1.0;    // noise sigma override (< 0 = experiment default)
  std::string out_dir;    // artifacts directory; empty = no files written
  int jobs = 1;           // worker threads for independent trials
};

struct MetricsReport {
  std::string experiment;
  Json config;
  std::vector<Json> trials;
  Json aggregate;  // per-column mean/std, recomputable from the trial rows
  std::vector<std::string> artifacts;  // files written (CSV/SVG), relative to out_dir
  double wall_time_s = 0.0;

  Json to_json() const;
};

/// Recomputes mean/std aggregates from numeric trial columns.
Json aggregate_trials(const std::vector<Json>& trials);

using ExperimentFn = std::function<MetricsReport(const ExperimentConfig&)>;

struct ExperimentEntry {
  std::string name;
  std::string description;
  ExperimentFn run;
};

const std::vector<ExperimentEntry>& experiment_registry();

/// Runs a registered experiment; throws UsageError for unknown names.
MetricsReport run_experiment(const ExperimentConfig& cfg);

}  // namespace viskin
