#include "hyla/sraven.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>

namespace hyla::sraven {

namespace {

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

int imod(int v, int F) { return ((v % F) + F) % F; }

int rule_step(Rule r) {
  switch (r) {
    case Rule::progression_p1: return 1;
    case Rule::progression_p2: return 2;
    case Rule::progression_m1: return -1;
    case Rule::progression_m2: return -2;
    default: return 0;
  }
}

bool is_progression(Rule r) { return rule_step(r) != 0; }

std::array<int, 3> sample_three(Rng& rng, int F) {
  return {rng.uniform_int(F), rng.uniform_int(F), rng.uniform_int(F)};
}

std::array<int, 3> permuted_triple(const std::array<int, 3>& values, Rng& rng) {
  std::vector<int> order = {0, 1, 2};
  rng.shuffle(order);
  return {values[static_cast<size_t>(order[0])], values[static_cast<size_t>(order[1])],
          values[static_cast<size_t>(order[2])]};
}

// predicate for a single row triple (distribute_three is cross-row, handled
// separately via multiset comparison)
bool row_satisfies(Rule r, const std::array<int, 3>& t, int F) {
  switch (r) {
    case Rule::constant: return t[0] == t[1] && t[1] == t[2];
    case Rule::addition: return t[2] == imod(t[0] + t[1], F);
    case Rule::subtraction: return t[2] == imod(t[0] - t[1], F);
    case Rule::distribute_three: return true;  // no per-row constraint beyond the multiset
    default: {
      int d = rule_step(r);
      return t[1] == imod(t[0] + d, F) && t[2] == imod(t[0] + 2 * d, F);
    }
  }
}

std::array<int, 3> sorted_triple(const std::array<int, 3>& t) {
  std::array<int, 3> s = t;
  std::sort(s.begin(), s.end());
  return s;
}

std::vector<int> identity_perm(int K) {
  std::vector<int> p(static_cast<size_t>(K));
  for (int i = 0; i < K; ++i) p[static_cast<size_t>(i)] = i;
  return p;
}

}  // namespace

std::string rule_name(Rule r) {
  switch (r) {
    case Rule::constant: return "constant";
    case Rule::progression_p1: return "progression_p1";
    case Rule::progression_p2: return "progression_p2";
    case Rule::progression_m1: return "progression_m1";
    case Rule::progression_m2: return "progression_m2";
    case Rule::addition: return "addition";
    case Rule::subtraction: return "subtraction";
    case Rule::distribute_three: return "distribute_three";
  }
  return "?";
}

std::vector<int> Instance::answer() const {
  std::vector<int> a(static_cast<size_t>(K));
  for (int j = 0; j < K; ++j) a[static_cast<size_t>(j)] = at(2, 2, j);
  return a;
}

std::vector<std::vector<int>> Instance::context() const {
  std::vector<std::vector<int>> panels;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      if (r == 2 && c == 2) break;
      std::vector<int> p(static_cast<size_t>(K));
      for (int j = 0; j < K; ++j) p[static_cast<size_t>(j)] = at(r, c, j);
      panels.push_back(std::move(p));
    }
  return panels;
}

std::array<int, 3> generate_row(Rule rule, Rng& rng, int F) {
  check(F >= 2, "generate_row: need F >= 2");
  switch (rule) {
    case Rule::constant: {
      int c = rng.uniform_int(F);
      return {c, c, c};
    }
    case Rule::addition: {
      int a = rng.uniform_int(F), b = rng.uniform_int(F);
      return {a, b, imod(a + b, F)};
    }
    case Rule::subtraction: {
      int a = rng.uniform_int(F), b = rng.uniform_int(F);
      return {a, b, imod(a - b, F)};
    }
    case Rule::distribute_three:
      return permuted_triple(sample_three(rng, F), rng);
    default: {
      int d = rule_step(rule);
      int s = rng.uniform_int(F);
      return {s, imod(s + d, F), imod(s + 2 * d, F)};
    }
  }
}

Instance generate_instance(const Combo& combo, Rng& rng, int F) {
  check(!combo.empty(), "generate_instance: empty rule combination");
  check(F >= 2, "generate_instance: need F >= 2");
  int K = static_cast<int>(combo.size());
  Instance inst;
  inst.K = K;
  inst.F = F;
  inst.combo = combo;
  inst.grid.assign(static_cast<size_t>(9 * K), 0);
  inst.pre_perm.assign(static_cast<size_t>(9 * K), 0);

  for (int i = 0; i < K; ++i) {
    Rule rule = combo[static_cast<size_t>(i)];
    // distribute_three's three values are fixed per (instance, slot) and only
    // re-permuted per row
    std::array<int, 3> d3_values{};
    if (rule == Rule::distribute_three) d3_values = sample_three(rng, F);
    for (int r = 0; r < 3; ++r) {
      std::array<int, 3> triple = rule == Rule::distribute_three
                                      ? permuted_triple(d3_values, rng)
                                      : generate_row(rule, rng, F);
      for (int g = 0; g < 3; ++g)
        inst.pre_perm[static_cast<size_t>((r * 3 + g) * K + i)] = triple[static_cast<size_t>(g)];
    }
  }

  inst.perms.assign(3, identity_perm(K));
  for (int g = 0; g < 3; ++g) rng.shuffle(inst.perms[static_cast<size_t>(g)]);

  for (int r = 0; r < 3; ++r)
    for (int g = 0; g < 3; ++g)
      for (int i = 0; i < K; ++i)
        inst.grid[static_cast<size_t>((r * 3 + g) * K + inst.perms[static_cast<size_t>(g)][static_cast<size_t>(i)])] =
            inst.pre_perm[static_cast<size_t>((r * 3 + g) * K + i)];
  return inst;
}

bool check_consistency(const Instance& inst, const Combo& combo,
                       const std::vector<std::vector<int>>& perms) {
  int K = inst.K, F = inst.F;
  if (static_cast<int>(combo.size()) != K || perms.size() != 3) return false;
  for (int i = 0; i < K; ++i) {
    Rule rule = combo[static_cast<size_t>(i)];
    std::array<std::array<int, 3>, 3> rows{};
    for (int r = 0; r < 3; ++r)
      for (int g = 0; g < 3; ++g)
        rows[static_cast<size_t>(r)][static_cast<size_t>(g)] =
            inst.at(r, g, perms[static_cast<size_t>(g)][static_cast<size_t>(i)]);
    if (rule == Rule::distribute_three) {
      auto m0 = sorted_triple(rows[0]);
      if (sorted_triple(rows[1]) != m0 || sorted_triple(rows[2]) != m0) return false;
    } else {
      for (int r = 0; r < 3; ++r)
        if (!row_satisfies(rule, rows[static_cast<size_t>(r)], F)) return false;
    }
  }
  return true;
}

std::set<std::vector<int>> solve_brute_force(const std::vector<std::vector<int>>& context, int K,
                                             int F) {
  check(context.size() == 8, "solve_brute_force: need exactly 8 context panels");
  for (const auto& p : context)
    check(static_cast<int>(p.size()) == K, "solve_brute_force: panel size != K");

  // panels by (row, col): rows 0,1 full; row 2 has columns 0,1
  auto panel = [&](int r, int g) -> const std::vector<int>& {
    return context[static_cast<size_t>(r * 3 + g)];
  };

  std::vector<std::vector<int>> perms;
  {
    std::vector<int> p = identity_perm(K);
    do {
      perms.push_back(p);
    } while (std::next_permutation(p.begin(), p.end()));
  }

  std::set<std::vector<int>> answers;
  // column 0 fixed to the identity; slot relabeling absorbs it
  for (const auto& q1 : perms) {
    for (const auto& q2 : perms) {
      // per-slot candidate rules from the two complete rows, then the implied
      // third value of row 2 per candidate
      std::vector<std::vector<int>> slot_values(static_cast<size_t>(K));
      bool feasible = true;
      for (int i = 0; i < K && feasible; ++i) {
        std::array<std::array<int, 3>, 2> rows{};
        for (int r = 0; r < 2; ++r) {
          rows[static_cast<size_t>(r)] = {panel(r, 0)[static_cast<size_t>(i)],
                                          panel(r, 1)[q1[static_cast<size_t>(i)]],
                                          panel(r, 2)[q2[static_cast<size_t>(i)]]};
        }
        int a = panel(2, 0)[static_cast<size_t>(i)];
        int b = panel(2, 1)[q1[static_cast<size_t>(i)]];
        std::set<int> values;
        for (int ri = 0; ri < kNumRules; ++ri) {
          Rule rule = static_cast<Rule>(ri);
          if (rule == Rule::distribute_three) {
            auto m0 = sorted_triple(rows[0]);
            if (sorted_triple(rows[1]) != m0) continue;
            // remaining element of the multiset after removing {a, b}
            std::vector<int> m(m0.begin(), m0.end());
            auto ita = std::find(m.begin(), m.end(), a);
            if (ita == m.end()) continue;
            m.erase(ita);
            auto itb = std::find(m.begin(), m.end(), b);
            if (itb == m.end()) continue;
            m.erase(itb);
            values.insert(m[0]);
          } else {
            if (!row_satisfies(rule, rows[0], F) || !row_satisfies(rule, rows[1], F)) continue;
            switch (rule) {
              case Rule::constant:
                if (a == b) values.insert(a);
                break;
              case Rule::addition: values.insert(imod(a + b, F)); break;
              case Rule::subtraction: values.insert(imod(a - b, F)); break;
              default: {
                int d = rule_step(rule);
                if (b == imod(a + d, F)) values.insert(imod(b + d, F));
                break;
              }
            }
          }
        }
        if (values.empty()) {
          feasible = false;
        } else {
          slot_values[static_cast<size_t>(i)].assign(values.begin(), values.end());
        }
      }
      if (!feasible) continue;

      // cartesian product of per-slot values, mapped to observed positions by q2
      std::vector<int> choice(static_cast<size_t>(K), 0);
      while (true) {
        std::vector<int> ans(static_cast<size_t>(K));
        for (int i = 0; i < K; ++i)
          ans[q2[static_cast<size_t>(i)]] =
              slot_values[static_cast<size_t>(i)][static_cast<size_t>(choice[static_cast<size_t>(i)])];
        answers.insert(std::move(ans));
        int i = K - 1;
        while (i >= 0 &&
               choice[static_cast<size_t>(i)] + 1 ==
                   static_cast<int>(slot_values[static_cast<size_t>(i)].size()))
          --i;
        if (i < 0) break;
        ++choice[static_cast<size_t>(i)];
        for (int j = i + 1; j < K; ++j) choice[static_cast<size_t>(j)] = 0;
      }
    }
  }
  return answers;
}

AmbiguityEstimate estimate_ambiguity(int K, int F, int n_samples, Rng& rng) {
  check(n_samples >= 1, "estimate_ambiguity: need n_samples >= 1");
  auto combos = enumerate_rule_combos(kNumRules, K);
  AmbiguityEstimate est;
  est.samples = n_samples;
  for (int s = 0; s < n_samples; ++s) {
    const Combo& combo = combos[static_cast<size_t>(rng.uniform_int(static_cast<int>(combos.size())))];
    Instance inst = generate_instance(combo, rng, F);
    auto answers = solve_brute_force(inst.context(), K, F);
    if (answers.size() > 1) est.ambiguous++;
  }
  double p = static_cast<double>(est.ambiguous) / n_samples;
  est.fraction = p;
  est.standard_error = std::sqrt(p * (1.0 - p) / n_samples);
  return est;
}

std::vector<Combo> enumerate_rule_combos(int R, int K) {
  check(R >= 1 && R <= kNumRules, "enumerate_rule_combos: need 1 <= R <= 8");
  check(K >= 1, "enumerate_rule_combos: need K >= 1");
  std::vector<Combo> out;
  Combo cur;
  // multisets in non-decreasing rule order
  std::function<void(int)> rec = [&](int min_rule) {
    if (static_cast<int>(cur.size()) == K) {
      out.push_back(cur);
      return;
    }
    for (int r = min_rule; r < R; ++r) {
      cur.push_back(static_cast<Rule>(r));
      rec(r);
      cur.pop_back();
    }
  };
  rec(0);
  return out;
}

namespace {
long long binomial(int n, int k) {
  if (k < 0 || k > n) return 0;
  long long r = 1;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}
}  // namespace

long long count_rule_combos(int R, int K) {
  check(R >= 1 && K >= 1, "count_rule_combos: need R, K >= 1");
  return binomial(R + K - 1, K);
}

long long count_tasks(int R, int K, int G) {
  check(G >= 2, "count_tasks: need G >= 2");
  long long fact = 1;
  for (int i = 2; i <= K; ++i) fact *= i;
  long long perm_count = 1;
  for (int g = 1; g < G; ++g) perm_count *= fact;
  perm_count -= K;
  return count_rule_combos(R, K) * perm_count;
}

ComboSplit split_combos(const std::vector<Combo>& combos, double holdout_fraction, uint64_t seed) {
  check(holdout_fraction > 0.0 && holdout_fraction < 1.0,
        "split_combos: holdout_fraction must be in (0,1)");
  std::vector<Combo> pool = combos;
  Rng rng(seed);
  rng.shuffle(pool);
  size_t n_ood = static_cast<size_t>(std::floor(static_cast<double>(pool.size()) * holdout_fraction));
  ComboSplit split;
  split.ood.assign(pool.begin(), pool.begin() + static_cast<long>(n_ood));
  split.train.assign(pool.begin() + static_cast<long>(n_ood), pool.end());
  return split;
}

TokenizedInstance tokenize(const Instance& inst) {
  int K = inst.K, F = inst.F;
  TokenizedInstance tok;
  tok.tokens = Tensor::zeros({8 * K + K, F});
  int row = 0;
  for (const auto& panel : inst.context()) {
    for (int j = 0; j < K; ++j, ++row)
      tok.tokens[static_cast<size_t>(row * F + panel[static_cast<size_t>(j)])] = 1.0;
  }
  // K all-zero query rows remain
  tok.targets = inst.answer();
  return tok;
}

bool exact_match(const std::vector<int>& predictions, const std::vector<int>& targets) {
  if (predictions.size() != targets.size()) return false;
  return std::equal(predictions.begin(), predictions.end(), targets.begin());
}

}  // namespace hyla::sraven
