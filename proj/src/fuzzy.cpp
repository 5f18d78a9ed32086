#include "hyla/fuzzy.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>

namespace hyla::fuzzy {

namespace {

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void check_unit(double v) {
  check(v >= 0.0 && v <= 1.0, "zadeh operator input " + std::to_string(v) + " outside [0,1]");
}

void check_spec(const TaskSpec& spec) {
  check(spec.L >= 1 && spec.L < 31, "task spec: bad L");
  check(!spec.terms.empty(), "task spec: no terms");
  int limit = 1 << spec.L;
  for (size_t i = 0; i < spec.terms.size(); ++i) {
    check(spec.terms[i] >= 0 && spec.terms[i] < limit, "task spec: term index out of range");
    if (i > 0) check(spec.terms[i] > spec.terms[i - 1], "task spec: terms must be sorted distinct");
  }
}

// all K-subsets of `terms`, each sorted ascending
std::vector<std::vector<int>> k_subsets(const std::vector<int>& terms, int K) {
  std::vector<std::vector<int>> out;
  std::vector<int> idx(static_cast<size_t>(K));
  for (int i = 0; i < K; ++i) idx[static_cast<size_t>(i)] = i;
  int n = static_cast<int>(terms.size());
  if (K > n) return out;
  while (true) {
    std::vector<int> combo;
    for (int i : idx) combo.push_back(terms[static_cast<size_t>(i)]);
    out.push_back(std::move(combo));
    int i = K - 1;
    while (i >= 0 && idx[static_cast<size_t>(i)] == n - K + i) --i;
    if (i < 0) break;
    ++idx[static_cast<size_t>(i)];
    for (int j = i + 1; j < K; ++j) idx[static_cast<size_t>(j)] = idx[static_cast<size_t>(j - 1)] + 1;
  }
  return out;
}

}  // namespace

double zadeh_and(double a, double b) {
  check_unit(a);
  check_unit(b);
  return std::min(a, b);
}

double zadeh_or(double a, double b) {
  check_unit(a);
  check_unit(b);
  return std::max(a, b);
}

double zadeh_not(double a) {
  check_unit(a);
  return 1.0 - a;
}

bool operator==(const TaskSpec& a, const TaskSpec& b) {
  return a.L == b.L && a.terms == b.terms;
}

double eval_task(const std::vector<double>& x, const TaskSpec& spec) {
  check_spec(spec);
  check(static_cast<int>(x.size()) == spec.L, "eval_task: input length != L");
  for (double v : x) check_unit(v);
  double best = 0.0;
  bool first = true;
  for (int term : spec.terms) {
    double t = 1.0;
    for (int i = 0; i < spec.L; ++i) {
      double lit = (term >> i) & 1 ? 1.0 - x[static_cast<size_t>(i)] : x[static_cast<size_t>(i)];
      t = std::min(t, lit);
    }
    best = first ? t : std::max(best, t);
    first = false;
  }
  return best;
}

bool eval_boolean(const std::vector<int>& bits, const TaskSpec& spec) {
  check(static_cast<int>(bits.size()) == spec.L, "eval_boolean: input length != L");
  for (int term : spec.terms) {
    bool t = true;
    for (int i = 0; i < spec.L; ++i) {
      bool lit = (term >> i) & 1 ? bits[static_cast<size_t>(i)] == 0 : bits[static_cast<size_t>(i)] == 1;
      t = t && lit;
    }
    if (t) return true;
  }
  return false;
}

Splits enumerate_splits(int L, int K, double holdout_fraction, uint64_t seed, int reserved_count) {
  check(L >= 1 && L < 20, "enumerate_splits: bad L");
  check(K >= 1 && K <= (1 << L), "enumerate_splits: need 1 <= K <= 2^L");
  check(holdout_fraction > 0.0 && holdout_fraction < 1.0,
        "enumerate_splits: holdout_fraction must be in (0,1)");
  int n_terms = 1 << L;
  if (reserved_count < 0) reserved_count = (n_terms + 7) / 8;
  check(n_terms - reserved_count >= K,
        "enumerate_splits: too many reserved terms for K=" + std::to_string(K));

  Rng rng(seed);
  std::vector<int> all_terms(static_cast<size_t>(n_terms));
  for (int i = 0; i < n_terms; ++i) all_terms[static_cast<size_t>(i)] = i;
  std::vector<int> pool = all_terms;
  rng.shuffle(pool);
  std::vector<int> reserved(pool.begin(), pool.begin() + reserved_count);
  std::sort(reserved.begin(), reserved.end());
  std::set<int> reserved_set(reserved.begin(), reserved.end());

  std::vector<int> eligible;
  for (int t : all_terms)
    if (!reserved_set.count(t)) eligible.push_back(t);

  Splits out;
  out.reserved_terms = reserved;
  auto to_spec = [L](std::vector<int> terms) {
    TaskSpec s;
    s.L = L;
    s.terms = std::move(terms);
    return s;
  };

  for (auto& combo : k_subsets(all_terms, K)) {
    bool touches_reserved = false;
    for (int t : combo) touches_reserved = touches_reserved || reserved_set.count(t) > 0;
    if (touches_reserved) out.unseen_term.push_back(to_spec(combo));
  }

  std::vector<std::vector<int>> combos = k_subsets(eligible, K);
  rng.shuffle(combos);
  size_t n_ood = static_cast<size_t>(std::floor(static_cast<double>(combos.size()) * holdout_fraction));
  check(n_ood >= 1 && n_ood < combos.size(),
        "enumerate_splits: holdout fraction leaves an empty split");
  std::vector<std::vector<int>> ood(combos.begin(), combos.begin() + static_cast<long>(n_ood));
  std::vector<std::vector<int>> train(combos.begin() + static_cast<long>(n_ood), combos.end());

  // repair: every OOD combination's terms must be covered by the train set
  std::unordered_map<int, int> coverage;
  for (auto& c : train)
    for (int t : c) coverage[t]++;
  for (size_t rounds = 0; rounds < ood.size() + train.size(); ++rounds) {
    size_t violating = ood.size();
    for (size_t i = 0; i < ood.size(); ++i) {
      for (int t : ood[i])
        if (coverage[t] == 0) {
          violating = i;
          break;
        }
      if (violating == i) break;
    }
    if (violating == ood.size()) break;
    // donor: a train combo whose every term stays covered after removal
    size_t donor = train.size();
    for (size_t i = 0; i < train.size(); ++i) {
      bool safe = true;
      for (int t : train[i]) safe = safe && coverage[t] >= 2;
      if (safe) {
        donor = i;
        break;
      }
    }
    check(donor != train.size(),
          "enumerate_splits: cannot satisfy term coverage at holdout_fraction=" +
              std::to_string(holdout_fraction) + " (no swappable train combination left)");
    for (int t : ood[violating]) coverage[t]++;
    for (int t : train[donor]) coverage[t]--;
    std::swap(ood[violating], train[donor]);
  }
  for (auto& c : ood)
    for (int t : c)
      check(coverage[t] > 0, "enumerate_splits: internal repair failure");

  for (auto& c : train) out.train.push_back(to_spec(std::move(c)));
  for (auto& c : ood) out.ood.push_back(to_spec(std::move(c)));
  return out;
}

Episode sample_episode(const TaskSpec& spec, int n_context, Rng& rng) {
  check_spec(spec);
  check(n_context >= 1, "sample_episode: need at least one context example");
  int L = spec.L;
  Tensor tokens = Tensor::zeros({n_context + 1, L + 1});
  std::vector<double> x(static_cast<size_t>(L));
  Episode ep;
  for (int row = 0; row <= n_context; ++row) {
    for (int i = 0; i < L; ++i) x[static_cast<size_t>(i)] = rng.uniform();
    double y = eval_task(x, spec);
    for (int i = 0; i < L; ++i)
      tokens[static_cast<size_t>(row * (L + 1) + i)] = x[static_cast<size_t>(i)];
    if (row < n_context) {
      tokens[static_cast<size_t>(row * (L + 1) + L)] = y;
    } else {
      // query row: target slot masked with 0
      ep.target = y;
    }
  }
  ep.tokens = tokens;
  ep.spec = spec;
  return ep;
}

Episode resample_query(const Episode& base, Rng& rng) {
  int L = base.spec.L;
  int rows = base.tokens.dim(0);
  Episode ep;
  ep.spec = base.spec;
  ep.tokens = Tensor::from_data(base.tokens.shape(), base.tokens.values());
  std::vector<double> x(static_cast<size_t>(L));
  for (int i = 0; i < L; ++i) {
    x[static_cast<size_t>(i)] = rng.uniform();
    ep.tokens[static_cast<size_t>((rows - 1) * (L + 1) + i)] = x[static_cast<size_t>(i)];
  }
  ep.tokens[static_cast<size_t>((rows - 1) * (L + 1) + L)] = 0.0;
  ep.target = eval_task(x, base.spec);
  return ep;
}

double r2_score(const std::vector<double>& predictions, const std::vector<double>& targets) {
  check(predictions.size() == targets.size(), "r2_score: length mismatch");
  check(targets.size() >= 2, "r2_score: need at least two samples");
  double mean = 0.0;
  for (double t : targets) mean += t;
  mean /= static_cast<double>(targets.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (size_t i = 0; i < targets.size(); ++i) {
    ss_res += (targets[i] - predictions[i]) * (targets[i] - predictions[i]);
    ss_tot += (targets[i] - mean) * (targets[i] - mean);
  }
  check(ss_tot > 0.0, "r2_score: targets have zero variance");
  return 1.0 - ss_res / ss_tot;
}

}  // namespace hyla::fuzzy
