#pragma once

#include <cstdint>
#include <vector>

#include "dvt/errors.hpp"

namespace dvt {

// Recorded per-exit softmax outputs for a labeled evaluation set, together
// with the cumulative per-image FLOPs of each exit. Threshold policies are
// simulated against this record without re-running the models.
struct ExitTrace {
  int num_exits = 0;
  int num_classes = 0;
  std::vector<double> exit_flops;  // cumulative, strictly increasing
  std::vector<int> labels;
  std::vector<double> probs;  // [samples][num_exits][num_classes], row-major

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  double prob(std::int64_t sample, int exit, int cls) const {
    return probs[(sample * num_exits + exit) * num_classes + cls];
  }
  void validate() const;
};

// Confidence thresholds for exits 0..K-2 (the final exit threshold is zero).
struct ThresholdVector {
  std::vector<double> values;
};

struct PolicyResult {
  double accuracy = 0.0;
  double mean_flops = 0.0;
};

// Simulates adaptive inference on the trace: a sample leaves at the first
// exit whose top-probability confidence meets the threshold (ties in the
// argmax go to the lowest class index), and always leaves at the last exit.
PolicyResult evaluate_policy(const ExitTrace& trace, const ThresholdVector& t);

struct SolveResult {
  ThresholdVector thresholds;
  double accuracy = 0.0;
  double mean_flops = 0.0;
  // False when even the all-zero policy exceeds the budget; the returned
  // thresholds are then the cheapest policy instead of a budget-satisfying one.
  bool feasible = false;
};

// Exhaustive search over the lattice {0, r, 2r, ..., 1}^(K-1). Preference
// order: higher accuracy, then lower mean FLOPs, then lexicographically
// smaller thresholds.
SolveResult solve_grid(const ExitTrace& trace, double budget,
                       double resolution = 0.01);

struct GaOptions {
  int population = 50;
  int generations = 100;
  int tournament = 4;
  double mutation_std = 0.05;
  double crossover_prob = 0.9;
  int elitism = 2;
  std::uint64_t seed = 0;
};

// Genetic search over threshold vectors in [0,1]^(K-1). Fitness is accuracy,
// with an over-budget penalty proportional to the excess. Deterministic for a
// fixed seed. Tracks and returns the best feasible individual ever seen.
SolveResult solve_ga(const ExitTrace& trace, double budget, const GaOptions& opt);

enum class SolveMethod { kGrid, kGa };

struct SweepPoint {
  double budget = 0.0;
  SolveResult result;
};

std::vector<SweepPoint> budget_sweep(const ExitTrace& trace,
                                     const std::vector<double>& budgets,
                                     SolveMethod method,
                                     double grid_resolution = 0.01,
                                     const GaOptions& ga = {});

// Baseline policy thresholded on prediction entropy (nats): a sample exits at
// the first non-final exit whose entropy is <= the exit's threshold.
PolicyResult entropy_policy_evaluate(const ExitTrace& trace,
                                     const std::vector<double>& entropy_thresholds);

}  // namespace dvt
