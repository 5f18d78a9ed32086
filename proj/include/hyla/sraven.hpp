#pragma once

#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "hyla/rng.hpp"
#include "hyla/tensor.hpp"

namespace hyla::sraven {

// The eight row rules. Arithmetic is modulo F.
enum class Rule {
  constant,
  progression_p1,
  progression_p2,
  progression_m1,
  progression_m2,
  addition,
  subtraction,
  distribute_three,
};
constexpr int kNumRules = 8;

std::string rule_name(Rule r);

// sorted multiset of K rules; canonical form for split bookkeeping
using Combo = std::vector<Rule>;

// A 3x3 grid of K-feature panels. perms[g][i] gives the grid position of
// pre-permutation feature slot i in column g, i.e.
// grid(r, g, perms[g][i]) == pre_perm(r, g, i).
struct Instance {
  int K = 4;
  int F = 8;
  Combo combo;
  std::vector<std::vector<int>> perms;  // 3 x K, slot -> position
  std::vector<int> grid;                // [3 * 3 * K], (row, col, feature)
  std::vector<int> pre_perm;            // same layout, before permutation

  int at(int row, int col, int feature) const {
    return grid[static_cast<size_t>((row * 3 + col) * K + feature)];
  }
  // the final panel, i.e. the answer the solver must produce
  std::vector<int> answer() const;
  // the 8 context panels, row-major
  std::vector<std::vector<int>> context() const;
};

// One row triple under a rule. distribute_three draws three fresh values here;
// generate_instance instead fixes the three values per feature slot and only
// re-permutes them per row.
std::array<int, 3> generate_row(Rule rule, Rng& rng, int F);

Instance generate_instance(const Combo& combo, Rng& rng, int F);

// True iff un-permuting each column by perms makes feature slot i satisfy
// combo[i] in every row.
bool check_consistency(const Instance& inst, const Combo& combo,
                       const std::vector<std::vector<int>>& perms);

// Every answer panel consistent with the 8 context panels under at least one
// (column permutations, per-slot rules) hypothesis. Column-0 permutation is
// fixed to the identity; slot relabeling makes other choices redundant.
std::set<std::vector<int>> solve_brute_force(const std::vector<std::vector<int>>& context, int K,
                                             int F);

struct AmbiguityEstimate {
  double fraction = 0.0;
  double standard_error = 0.0;
  int ambiguous = 0;
  int samples = 0;
};

// Monte-Carlo fraction of instances with more than one valid answer; combos
// drawn uniformly from the canonical multiset enumeration.
AmbiguityEstimate estimate_ambiguity(int K, int F, int n_samples, Rng& rng);

std::vector<Combo> enumerate_rule_combos(int R, int K);

// C(R+K-1, K) * ((K!)^(G-1) - K)
long long count_tasks(int R, int K, int G);
long long count_rule_combos(int R, int K);

struct ComboSplit {
  std::vector<Combo> train;
  std::vector<Combo> ood;
};

// Seeded partition; floor(count * holdout_fraction) combos go to OOD.
ComboSplit split_combos(const std::vector<Combo>& combos, double holdout_fraction, uint64_t seed);

struct TokenizedInstance {
  Tensor tokens;             // [8K + K, F]: one-hot context features then K zero query rows
  std::vector<int> targets;  // K class indices, the answer panel
};

TokenizedInstance tokenize(const Instance& inst);

bool exact_match(const std::vector<int>& predictions, const std::vector<int>& targets);

}  // namespace hyla::sraven
