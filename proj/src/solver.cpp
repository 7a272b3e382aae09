#include "dvt/solver.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace dvt {

void ExitTrace::validate() const {
  if (num_exits < 1) throw DataError("trace: num_exits < 1");
  if (num_classes < 2) throw DataError("trace: num_classes < 2");
  if (labels.empty()) throw DataError("trace: no samples");
  if (static_cast<int>(exit_flops.size()) != num_exits) {
    throw DataError("trace: exit_flops size != num_exits");
  }
  for (int i = 0; i < num_exits; ++i) {
    if (!(exit_flops[i] > 0.0)) throw DataError("trace: non-positive exit cost");
    if (i > 0 && !(exit_flops[i] > exit_flops[i - 1])) {
      throw DataError("trace: exit costs must strictly increase");
    }
  }
  if (probs.size() != static_cast<std::size_t>(size()) * num_exits * num_classes) {
    throw DataError("trace: probs size mismatch");
  }
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw DataError("trace: label out of range");
  }
  for (double p : probs) {
    if (!(p >= 0.0 && p <= 1.0)) throw DataError("trace: probability outside [0,1]");
  }
}

namespace {

// Per-sample, per-exit top-probability and correctness, precomputed once so a
// policy evaluation is a scan.
struct TraceCache {
  std::int64_t n = 0;
  int k = 0;
  std::vector<double> conf;      // [n][k]
  std::vector<std::uint8_t> hit; // [n][k]
  std::vector<double> exit_flops;

  explicit TraceCache(const ExitTrace& t) {
    t.validate();
    n = t.size();
    k = t.num_exits;
    exit_flops = t.exit_flops;
    conf.resize(n * k);
    hit.resize(n * k);
    for (std::int64_t s = 0; s < n; ++s) {
      for (int e = 0; e < k; ++e) {
        int arg = 0;
        for (int c = 1; c < t.num_classes; ++c) {
          if (t.prob(s, e, c) > t.prob(s, e, arg)) arg = c;
        }
        conf[s * k + e] = t.prob(s, e, arg);
        hit[s * k + e] = (arg == t.labels[s]) ? 1 : 0;
      }
    }
  }

  PolicyResult evaluate(const std::vector<double>& thr) const {
    std::int64_t correct = 0;
    double flops = 0.0;
    for (std::int64_t s = 0; s < n; ++s) {
      const std::int64_t base = s * k;
      int e = k - 1;
      for (int i = 0; i < k - 1; ++i) {
        if (conf[base + i] >= thr[i]) {
          e = i;
          break;
        }
      }
      correct += hit[base + e];
      flops += exit_flops[e];
    }
    return PolicyResult{static_cast<double>(correct) / n, flops / n};
  }
};

void check_thresholds(const ExitTrace& trace, const std::vector<double>& v) {
  if (static_cast<int>(v.size()) != trace.num_exits - 1) {
    throw UsageError("expected " + std::to_string(trace.num_exits - 1) +
                     " thresholds, got " + std::to_string(v.size()));
  }
  for (double t : v) {
    if (!(t >= 0.0 && t <= 1.0)) {
      throw UsageError("thresholds must lie in [0,1]");
    }
  }
}

// Preference order shared by both solvers.
bool better(const PolicyResult& a, const PolicyResult& b) {
  if (a.accuracy != b.accuracy) return a.accuracy > b.accuracy;
  return a.mean_flops < b.mean_flops;
}

SolveResult cheapest_policy(const TraceCache& cache) {
  SolveResult r;
  r.thresholds.values.assign(cache.k - 1, 0.0);
  PolicyResult p = cache.evaluate(r.thresholds.values);
  r.accuracy = p.accuracy;
  r.mean_flops = p.mean_flops;
  r.feasible = false;
  return r;
}

}  // namespace

PolicyResult evaluate_policy(const ExitTrace& trace, const ThresholdVector& t) {
  check_thresholds(trace, t.values);
  return TraceCache(trace).evaluate(t.values);
}

SolveResult solve_grid(const ExitTrace& trace, double budget, double resolution) {
  if (!(resolution > 0.0 && resolution <= 1.0)) {
    throw UsageError("solve_grid: resolution must lie in (0,1]");
  }
  if (!(budget > 0.0)) throw UsageError("solve_grid: budget must be positive");
  TraceCache cache(trace);
  const int k = cache.k;
  std::vector<double> lattice;
  for (int j = 0;; ++j) {
    const double v = j * resolution;
    if (v >= 1.0 - 1e-12) break;
    lattice.push_back(v);
  }
  lattice.push_back(1.0);

  if (k == 1) {
    SolveResult r;
    PolicyResult p = cache.evaluate({});
    r.accuracy = p.accuracy;
    r.mean_flops = p.mean_flops;
    r.feasible = p.mean_flops <= budget;
    return r;
  }

  SolveResult best;
  bool found = false;
  std::vector<int> idx(k - 1, 0);
  std::vector<double> thr(k - 1, 0.0);
  // Odometer enumeration in ascending lexicographic order; strict-improvement
  // replacement makes ties resolve to the lexicographically smallest vector.
  while (true) {
    for (int i = 0; i < k - 1; ++i) thr[i] = lattice[idx[i]];
    PolicyResult p = cache.evaluate(thr);
    if (p.mean_flops <= budget) {
      if (!found || better(p, PolicyResult{best.accuracy, best.mean_flops})) {
        best.thresholds.values = thr;
        best.accuracy = p.accuracy;
        best.mean_flops = p.mean_flops;
        best.feasible = true;
        found = true;
      }
    }
    int ax = k - 2;
    while (ax >= 0 && ++idx[ax] == static_cast<int>(lattice.size())) {
      idx[ax] = 0;
      --ax;
    }
    if (ax < 0) break;
  }
  if (!found) return cheapest_policy(cache);
  return best;
}

SolveResult solve_ga(const ExitTrace& trace, double budget, const GaOptions& opt) {
  if (!(budget > 0.0)) throw UsageError("solve_ga: budget must be positive");
  if (opt.population < 2 || opt.generations < 1 || opt.tournament < 1 ||
      opt.elitism < 0 || opt.elitism >= opt.population) {
    throw UsageError("solve_ga: invalid options");
  }
  TraceCache cache(trace);
  const int k = cache.k;
  const int genes = k - 1;
  if (genes == 0) {
    SolveResult r;
    PolicyResult p = cache.evaluate({});
    r.accuracy = p.accuracy;
    r.mean_flops = p.mean_flops;
    r.feasible = p.mean_flops <= budget;
    return r;
  }
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, opt.mutation_std);
  std::uniform_int_distribution<int> pick(0, opt.population - 1);

  const double final_cost = cache.exit_flops.back();
  auto fitness_of = [&](const PolicyResult& p) {
    if (p.mean_flops <= budget) return p.accuracy;
    return p.accuracy - 10.0 * (p.mean_flops - budget) / final_cost;
  };

  std::vector<std::vector<double>> pop(opt.population,
                                       std::vector<double>(genes, 0.0));
  // Two deterministic corners help the search bracket the budget; the rest is
  // uniform random.
  for (int g = 0; g < genes; ++g) pop[0][g] = 1.0;
  for (int i = 2; i < opt.population; ++i) {
    for (int g = 0; g < genes; ++g) pop[i][g] = unit(rng);
  }

  std::vector<double> fitness(opt.population);
  std::vector<PolicyResult> evals(opt.population);
  SolveResult best;
  bool found = false;
  auto evaluate_population = [&] {
    for (int i = 0; i < opt.population; ++i) {
      evals[i] = cache.evaluate(pop[i]);
      fitness[i] = fitness_of(evals[i]);
      if (evals[i].mean_flops <= budget &&
          (!found ||
           better(evals[i], PolicyResult{best.accuracy, best.mean_flops}))) {
        best.thresholds.values = pop[i];
        best.accuracy = evals[i].accuracy;
        best.mean_flops = evals[i].mean_flops;
        best.feasible = true;
        found = true;
      }
    }
  };
  evaluate_population();

  std::vector<int> rank(opt.population);
  for (int gen = 0; gen < opt.generations; ++gen) {
    std::iota(rank.begin(), rank.end(), 0);
    std::stable_sort(rank.begin(), rank.end(),
                     [&](int a, int b) { return fitness[a] > fitness[b]; });
    std::vector<std::vector<double>> next;
    next.reserve(opt.population);
    for (int e = 0; e < opt.elitism; ++e) next.push_back(pop[rank[e]]);
    auto tournament = [&] {
      int winner = pick(rng);
      for (int t = 1; t < opt.tournament; ++t) {
        const int cand = pick(rng);
        if (fitness[cand] > fitness[winner]) winner = cand;
      }
      return winner;
    };
    while (static_cast<int>(next.size()) < opt.population) {
      const int pa = tournament();
      const int pb = tournament();
      std::vector<double> child = pop[pa];
      if (unit(rng) < opt.crossover_prob) {
        for (int g = 0; g < genes; ++g) {
          if (unit(rng) < 0.5) child[g] = pop[pb][g];
        }
      }
      for (int g = 0; g < genes; ++g) {
        child[g] = std::clamp(child[g] + noise(rng), 0.0, 1.0);
      }
      next.push_back(std::move(child));
    }
    pop = std::move(next);
    evaluate_population();
  }
  if (!found) return cheapest_policy(cache);
  return best;
}

std::vector<SweepPoint> budget_sweep(const ExitTrace& trace,
                                     const std::vector<double>& budgets,
                                     SolveMethod method, double grid_resolution,
                                     const GaOptions& ga) {
  if (budgets.empty()) throw UsageError("budget_sweep: no budgets");
  std::vector<SweepPoint> out;
  out.reserve(budgets.size());
  for (double b : budgets) {
    SweepPoint p;
    p.budget = b;
    p.result = method == SolveMethod::kGrid ? solve_grid(trace, b, grid_resolution)
                                            : solve_ga(trace, b, ga);
    out.push_back(std::move(p));
  }
  return out;
}

PolicyResult entropy_policy_evaluate(
    const ExitTrace& trace, const std::vector<double>& entropy_thresholds) {
  trace.validate();
  if (static_cast<int>(entropy_thresholds.size()) != trace.num_exits - 1) {
    throw UsageError("entropy policy: expected " +
                     std::to_string(trace.num_exits - 1) + " thresholds");
  }
  const std::int64_t n = trace.size();
  const int k = trace.num_exits;
  std::int64_t correct = 0;
  double flops = 0.0;
  for (std::int64_t s = 0; s < n; ++s) {
    int e = k - 1;
    for (int i = 0; i < k - 1; ++i) {
      double h = 0.0;
      for (int c = 0; c < trace.num_classes; ++c) {
        const double p = trace.prob(s, i, c);
        if (p > 0.0) h -= p * std::log(p);
      }
      if (h <= entropy_thresholds[i]) {
        e = i;
        break;
      }
    }
    int arg = 0;
    for (int c = 1; c < trace.num_classes; ++c) {
      if (trace.prob(s, e, c) > trace.prob(s, e, arg)) arg = c;
    }
    correct += (arg == trace.labels[s]) ? 1 : 0;
    flops += trace.exit_flops[e];
  }
  return PolicyResult{static_cast<double>(correct) / n, flops / n};
}

}  // namespace dvt
