#pragma once

#include <cstdint>
#include <vector>

#include "hyla/rng.hpp"
#include "hyla/tensor.hpp"

namespace hyla::fuzzy {

// Zadeh operators; coincide with the Boolean ones on {0,1}. Inputs must lie in
// the unit interval.
double zadeh_and(double a, double b);
double zadeh_or(double a, double b);
double zadeh_not(double a);

// A task is a disjunction of K conjunctive terms over all L variables; term
// index bits mark which variables are negated.
struct TaskSpec {
  int L = 4;
  std::vector<int> terms;  // sorted, distinct, each in [0, 2^L)
};

bool operator==(const TaskSpec& a, const TaskSpec& b);

// max over terms of (min over variables, with per-term negations)
double eval_task(const std::vector<double>& x, const TaskSpec& spec);

// Boolean reference evaluation for x in {0,1}^L (used by tests and the
// acceptance suite as an oracle; kept here so callers share one definition of
// the DNF semantics over bits).
bool eval_boolean(const std::vector<int>& bits, const TaskSpec& spec);

struct Splits {
  std::vector<TaskSpec> train;
  std::vector<TaskSpec> ood;          // unseen combinations of seen terms
  std::vector<TaskSpec> unseen_term;  // combinations touching reserved terms
  std::vector<int> reserved_terms;
};

// Enumerate all K-distinct-term combinations, reserve a few term indices for
// the unseen-term control split, and partition the rest train/ood so that
// every OOD combination's terms are covered by the train set.
// reserved_count < 0 selects the default ceil(2^L / 8).
Splits enumerate_splits(int L, int K, double holdout_fraction, uint64_t seed,
                        int reserved_count = -1);

struct Episode {
  Tensor tokens;  // [(N+1) x (L+1)]: N context rows [x, f(x)], one query row [x, 0]
  double target = 0.0;
  TaskSpec spec;
};

Episode sample_episode(const TaskSpec& spec, int n_context, Rng& rng);

// Same context tokens, fresh query row (latent-analysis capture mode).
Episode resample_query(const Episode& base, Rng& rng);

// 1 - SS_res / SS_tot; needs >= 2 samples and nonconstant targets
double r2_score(const std::vector<double>& predictions, const std::vector<double>& targets);

}  // namespace hyla::fuzzy
