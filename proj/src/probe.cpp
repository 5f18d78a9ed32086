#include "hyla/probe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "hyla/io.hpp"
#include "hyla/train.hpp"

namespace hyla::probe {

namespace {

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

std::vector<double> self_fiber(const AttentionScores& scores, int t) {
  return extract_latent(scores, t, t, 0);
}

}  // namespace

std::vector<LatentRecord> collect_fuzzy_latents(Model& model,
                                                const std::vector<fuzzy::TaskSpec>& specs,
                                                int episodes_per_spec, int n_context,
                                                FuzzyCaptureMode mode, uint64_t seed,
                                                const std::string& split_tag) {
  check(!specs.empty() && episodes_per_spec >= 1, "collect_fuzzy_latents: nothing to collect");
  std::vector<LatentRecord> records;
  Rng root(seed);
  int id = 0;
  for (size_t si = 0; si < specs.size(); ++si) {
    Rng rng = root.split(si);
    fuzzy::Episode base;
    for (int e = 0; e < episodes_per_spec; ++e) {
      fuzzy::Episode ep;
      if (mode == FuzzyCaptureMode::fixed_context) {
        if (e == 0) {
          base = fuzzy::sample_episode(specs[si], n_context, rng);
          ep = base;
        } else {
          ep = fuzzy::resample_query(base, rng);
        }
      } else {
        ep = fuzzy::sample_episode(specs[si], n_context, rng);
      }
      Tape tp;
      tp.set_recording(false);
      std::vector<AttentionScores> captured;
      model_forward(tp, ep.tokens, model, &captured);
      int t = ep.tokens.dim(0) - 1;
      for (size_t layer = 0; layer < captured.size(); ++layer) {
        LatentRecord rec;
        rec.layer = static_cast<int>(layer);
        rec.latent = self_fiber(captured[layer], t);
        rec.terms = specs[si].terms;
        rec.target_value = ep.target;
        rec.split_tag = split_tag;
        rec.instance_id = id;
        records.push_back(std::move(rec));
      }
      ++id;
    }
  }
  return records;
}

std::vector<LatentRecord> collect_sraven_latents(Model& model,
                                                 const std::vector<sraven::Combo>& combos,
                                                 int n_instances, int feature_values,
                                                 uint64_t seed, const std::string& split_tag) {
  check(!combos.empty() && n_instances >= 1, "collect_sraven_latents: nothing to collect");
  std::vector<LatentRecord> records;
  Rng root(seed);
  for (int id = 0; id < n_instances; ++id) {
    Rng rng = root.split(static_cast<uint64_t>(id));
    const sraven::Combo& combo =
        combos[static_cast<size_t>(rng.uniform_int(static_cast<int>(combos.size())))];
    sraven::Instance inst = sraven::generate_instance(combo, rng, feature_values);
    sraven::TokenizedInstance tok = sraven::tokenize(inst);
    int K = inst.K;
    // final response token = last query token = answer-panel position K-1;
    // its ground-truth rule is the one on the un-permuted feature slot
    int slot = -1;
    for (int i = 0; i < K; ++i)
      if (inst.perms[2][static_cast<size_t>(i)] == K - 1) slot = i;
    Tape tp;
    tp.set_recording(false);
    std::vector<AttentionScores> captured;
    model_forward(tp, tok.tokens, model, &captured);
    int t = tok.tokens.dim(0) - 1;
    for (size_t layer = 0; layer < captured.size(); ++layer) {
      LatentRecord rec;
      rec.layer = static_cast<int>(layer);
      rec.latent = self_fiber(captured[layer], t);
      rec.rule = static_cast<int>(combo[static_cast<size_t>(slot)]);
      rec.target_value = static_cast<double>(tok.targets[static_cast<size_t>(K - 1)]);
      rec.split_tag = split_tag;
      rec.instance_id = id;
      records.push_back(std::move(rec));
    }
  }
  return records;
}

namespace {

constexpr double kProbeL2 = 1e-3;
constexpr int kProbeSteps = 2000;
constexpr double kProbeLr = 0.05;

// full-batch multinomial logistic regression with L2, Adam-stepped
Tensor fit_multinomial(const std::vector<std::vector<double>>& xs, const std::vector<int>& ys,
                       int n_classes) {
  int n = static_cast<int>(xs.size());
  int d = static_cast<int>(xs[0].size());
  std::vector<double> flat;
  flat.reserve(static_cast<size_t>(n) * static_cast<size_t>(d + 1));
  for (const auto& x : xs) {
    flat.insert(flat.end(), x.begin(), x.end());
    flat.push_back(1.0);  // intercept
  }
  Tensor X = Tensor::from_data({n, d + 1}, std::move(flat));
  Tensor W = Tensor::zeros({n_classes, d + 1}, /*requires_grad=*/true);
  std::vector<NamedParam> params = {{"w", W, false}};
  OptState opt = OptState::init(params);
  for (int step = 0; step < kProbeSteps; ++step) {
    Tape tp;
    Tensor logits = contract(tp, X, W, "nd,cd->nc");
    Tensor loss = cross_entropy_rows(tp, logits, ys);
    Tensor reg = scale(tp, reduce_sum_all(tp, mul(tp, W, W)), kProbeL2);
    tp.backward(add(tp, loss, reg));
    adamw_step(params, opt, kProbeLr, 0.0);
  }
  return W;
}

std::vector<const LatentRecord*> layer_records(const std::vector<LatentRecord>& records,
                                               int layer) {
  std::vector<const LatentRecord*> out;
  for (const auto& r : records)
    if (r.layer == layer) out.push_back(&r);
  return out;
}

}  // namespace

ProbeModel fit_probe_rules(const std::vector<LatentRecord>& train, int layer) {
  auto recs = layer_records(train, layer);
  check(!recs.empty(), "fit_probe_rules: no records at layer " + std::to_string(layer));
  std::set<int> class_set;
  for (auto* r : recs) class_set.insert(r->rule);
  check(class_set.size() >= 2, "fit_probe_rules: need at least two classes in the training data");
  std::vector<int> classes(class_set.begin(), class_set.end());
  std::map<int, int> index;
  for (size_t i = 0; i < classes.size(); ++i) index[classes[i]] = static_cast<int>(i);

  std::vector<std::vector<double>> xs;
  std::vector<int> ys;
  for (auto* r : recs) {
    xs.push_back(r->latent);
    ys.push_back(index[r->rule]);
  }
  ProbeModel probe;
  probe.kind = ProbeModel::Kind::multinomial;
  probe.layer = layer;
  probe.classes = classes;
  probe.weights = fit_multinomial(xs, ys, static_cast<int>(classes.size()));
  return probe;
}

ProbeModel fit_probe_terms(const std::vector<LatentRecord>& train, int layer) {
  auto recs = layer_records(train, layer);
  check(!recs.empty(), "fit_probe_terms: no records at layer " + std::to_string(layer));
  std::set<int> term_set;
  for (auto* r : recs) term_set.insert(r->terms.begin(), r->terms.end());
  check(term_set.size() >= 2, "fit_probe_terms: need at least two distinct terms");
  std::vector<int> classes(term_set.begin(), term_set.end());

  int d = static_cast<int>(recs[0]->latent.size());
  Tensor W = Tensor::zeros({static_cast<int>(classes.size()), d + 1});
  std::vector<std::vector<double>> xs;
  for (auto* r : recs) xs.push_back(r->latent);
  for (size_t c = 0; c < classes.size(); ++c) {
    std::vector<int> ys;
    for (auto* r : recs)
      ys.push_back(std::count(r->terms.begin(), r->terms.end(), classes[c]) > 0 ? 1 : 0);
    // two-logit softmax; the stored row is the positive-minus-negative logit
    Tensor W2 = fit_multinomial(xs, ys, 2);
    for (int j = 0; j <= d; ++j)
      W[c * static_cast<size_t>(d + 1) + static_cast<size_t>(j)] =
          W2[static_cast<size_t>(d + 1 + j)] - W2[static_cast<size_t>(j)];
  }
  ProbeModel probe;
  probe.kind = ProbeModel::Kind::independent_binary;
  probe.layer = layer;
  probe.classes = classes;
  probe.weights = W;
  return probe;
}

namespace {

double f1_from_counts(long tp, long fp, long fn) {
  if (tp == 0) return 0.0;
  double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  return 2.0 * precision * recall / (precision + recall);
}

}  // namespace

ProbeMetrics eval_probe(const ProbeModel& probe, const std::vector<LatentRecord>& records) {
  auto recs = layer_records(records, probe.layer);
  check(!recs.empty(), "eval_probe: no records at layer " + std::to_string(probe.layer));
  int c_count = static_cast<int>(probe.classes.size());
  int d = static_cast<int>(recs[0]->latent.size());
  check(probe.weights.dim(1) == d + 1, "eval_probe: latent width mismatch");

  auto logit = [&](const LatentRecord* r, int c) {
    double z = probe.weights[static_cast<size_t>(c * (d + 1) + d)];
    for (int j = 0; j < d; ++j)
      z += probe.weights[static_cast<size_t>(c * (d + 1) + j)] * r->latent[static_cast<size_t>(j)];
    return z;
  };

  ProbeMetrics metrics;
  std::vector<long> tp(static_cast<size_t>(c_count), 0), fp(static_cast<size_t>(c_count), 0),
      fn(static_cast<size_t>(c_count), 0);
  long correct = 0;
  for (auto* r : recs) {
    if (probe.kind == ProbeModel::Kind::multinomial) {
      int best = 0;
      double best_z = logit(r, 0);
      for (int c = 1; c < c_count; ++c) {
        double z = logit(r, c);
        if (z > best_z) {
          best_z = z;
          best = c;
        }
      }
      int truth = static_cast<int>(
          std::find(probe.classes.begin(), probe.classes.end(), r->rule) - probe.classes.begin());
      check(truth < c_count, "eval_probe: record label outside the fitted class set");
      if (best == truth) {
        ++correct;
        ++tp[static_cast<size_t>(best)];
      } else {
        ++fp[static_cast<size_t>(best)];
        ++fn[static_cast<size_t>(truth)];
      }
    } else {
      for (int c = 0; c < c_count; ++c) {
        bool pred = logit(r, c) > 0.0;
        bool truth = std::count(r->terms.begin(), r->terms.end(), probe.classes[static_cast<size_t>(c)]) > 0;
        if (pred && truth) ++tp[static_cast<size_t>(c)];
        if (pred && !truth) ++fp[static_cast<size_t>(c)];
        if (!pred && truth) ++fn[static_cast<size_t>(c)];
        if (pred == truth) ++correct;
      }
    }
  }
  for (int c = 0; c < c_count; ++c)
    metrics.f1_per_class.push_back(
        f1_from_counts(tp[static_cast<size_t>(c)], fp[static_cast<size_t>(c)], fn[static_cast<size_t>(c)]));
  metrics.macro_f1 = 0.0;
  for (double f : metrics.f1_per_class) metrics.macro_f1 += f;
  metrics.macro_f1 /= static_cast<double>(c_count);
  long denom = probe.kind == ProbeModel::Kind::multinomial
                   ? static_cast<long>(recs.size())
                   : static_cast<long>(recs.size()) * c_count;
  metrics.accuracy = static_cast<double>(correct) / static_cast<double>(denom);
  return metrics;
}

std::vector<std::vector<double>> rule_similarity_matrix(const std::vector<LatentRecord>& records) {
  check(!records.empty(), "rule_similarity_matrix: no records");
  size_t h = records[0].latent.size();
  std::vector<std::vector<double>> means(sraven::kNumRules, std::vector<double>(h, 0.0));
  std::vector<long> counts(sraven::kNumRules, 0);
  for (const auto& r : records) {
    check(r.rule >= 0 && r.rule < sraven::kNumRules, "rule_similarity_matrix: record lacks a rule label");
    for (size_t j = 0; j < h; ++j) means[static_cast<size_t>(r.rule)][j] += r.latent[j];
    counts[static_cast<size_t>(r.rule)]++;
  }
  for (int c = 0; c < sraven::kNumRules; ++c) {
    check(counts[static_cast<size_t>(c)] > 0, "rule_similarity_matrix: rule " +
                                                  sraven::rule_name(static_cast<sraven::Rule>(c)) +
                                                  " has no records");
    for (size_t j = 0; j < h; ++j) means[static_cast<size_t>(c)][j] /= static_cast<double>(counts[static_cast<size_t>(c)]);
  }
  auto norm = [&](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  std::vector<std::vector<double>> sim(sraven::kNumRules,
                                       std::vector<double>(sraven::kNumRules, 0.0));
  for (int a = 0; a < sraven::kNumRules; ++a) {
    double na = norm(means[static_cast<size_t>(a)]);
    check(na > 0.0, "rule_similarity_matrix: zero mean latent");
    for (int b = 0; b < sraven::kNumRules; ++b) {
      double nb = norm(means[static_cast<size_t>(b)]);
      double dot = 0;
      for (size_t j = 0; j < h; ++j) dot += means[static_cast<size_t>(a)][j] * means[static_cast<size_t>(b)][j];
      sim[static_cast<size_t>(a)][static_cast<size_t>(b)] = dot / (na * nb);
    }
  }
  return sim;
}

void export_latents(const std::vector<LatentRecord>& records, const std::string& path) {
  check(!records.empty(), "export_latents: no records");
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("export_latents: cannot open '" + path + "'");
  size_t h = records[0].latent.size();
  os << "layer";
  for (size_t j = 0; j < h; ++j) os << ",h" << j;
  os << ",rule,target,split,terms,instance_id\n";
  for (const auto& r : records) {
    check(r.latent.size() == h, "export_latents: inconsistent latent widths");
    os << r.layer;
    for (size_t j = 0; j < h; ++j) os << ',' << format_double(r.latent[j]);
    os << ',' << r.rule << ',' << format_double(r.target_value) << ',' << r.split_tag << ',';
    for (size_t t = 0; t < r.terms.size(); ++t) os << (t ? ";" : "") << r.terms[t];
    os << ',' << r.instance_id << '\n';
  }
  if (!os) throw std::runtime_error("export_latents: write to '" + path + "' failed");
}

std::vector<LatentRecord> import_latents(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("import_latents: cannot open '" + path + "'");
  std::string header;
  std::getline(is, header);
  size_t h = 0;
  {
    std::stringstream ss(header);
    std::string col;
    while (std::getline(ss, col, ','))
      if (!col.empty() && col[0] == 'h' && col != "layer") ++h;
  }
  std::vector<LatentRecord> records;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    LatentRecord r;
    std::getline(ss, field, ',');
    r.layer = std::stoi(field);
    r.latent.resize(h);
    for (size_t j = 0; j < h; ++j) {
      std::getline(ss, field, ',');
      r.latent[j] = std::stod(field);
    }
    std::getline(ss, field, ',');
    r.rule = std::stoi(field);
    std::getline(ss, field, ',');
    r.target_value = std::stod(field);
    std::getline(ss, r.split_tag, ',');
    std::getline(ss, field, ',');
    if (!field.empty()) {
      std::stringstream ts(field);
      std::string tok;
      while (std::getline(ts, tok, ';')) r.terms.push_back(std::stoi(tok));
    }
    std::getline(ss, field, ',');
    r.instance_id = std::stoi(field);
    records.push_back(std::move(r));
  }
  return records;
}

namespace {

// Jacobi eigen decomposition of a small symmetric matrix
void jacobi_eigen(std::vector<std::vector<double>> a, std::vector<double>& eigvals,
                  std::vector<std::vector<double>>& eigvecs) {
  size_t n = a.size();
  eigvecs.assign(n, std::vector<double>(n, 0.0));
  for (size_t i = 0; i < n; ++i) eigvecs[i][i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (size_t p = 0; p < n; ++p)
      for (size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-24) break;
    for (size_t p = 0; p < n; ++p)
      for (size_t q = p + 1; q < n; ++q) {
        if (std::fabs(a[p][q]) < 1e-18) continue;
        double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        double t = (theta >= 0 ? 1.0 : -1.0) / (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double s = t * c;
        for (size_t k = 0; k < n; ++k) {
          double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (size_t k = 0; k < n; ++k) {
          double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (size_t k = 0; k < n; ++k) {
          double vkp = eigvecs[k][p], vkq = eigvecs[k][q];
          eigvecs[k][p] = c * vkp - s * vkq;
          eigvecs[k][q] = s * vkp + c * vkq;
        }
      }
  }
  eigvals.resize(n);
  for (size_t i = 0; i < n; ++i) eigvals[i] = a[i][i];
}

}  // namespace

std::vector<std::array<double, 2>> pca_2d(const std::vector<LatentRecord>& records) {
  check(records.size() >= 2, "pca_2d: need at least two records");
  size_t h = records[0].latent.size();
  check(h >= 2, "pca_2d: latent dimension must be at least 2");
  std::vector<double> mean(h, 0.0);
  for (const auto& r : records)
    for (size_t j = 0; j < h; ++j) mean[j] += r.latent[j];
  for (double& m : mean) m /= static_cast<double>(records.size());
  std::vector<std::vector<double>> cov(h, std::vector<double>(h, 0.0));
  for (const auto& r : records)
    for (size_t i = 0; i < h; ++i)
      for (size_t j = 0; j < h; ++j)
        cov[i][j] += (r.latent[i] - mean[i]) * (r.latent[j] - mean[j]);
  for (auto& row : cov)
    for (double& v : row) v /= static_cast<double>(records.size());

  std::vector<double> eigvals;
  std::vector<std::vector<double>> eigvecs;
  jacobi_eigen(cov, eigvals, eigvecs);
  // top-2 eigenvectors by eigenvalue
  std::vector<size_t> order(h);
  for (size_t i = 0; i < h; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return eigvals[a] > eigvals[b]; });
  std::array<std::vector<double>, 2> pcs;
  for (int k = 0; k < 2; ++k) {
    pcs[static_cast<size_t>(k)].resize(h);
    for (size_t j = 0; j < h; ++j) pcs[static_cast<size_t>(k)][j] = eigvecs[j][order[static_cast<size_t>(k)]];
    // deterministic sign: largest-magnitude coordinate positive
    size_t arg = 0;
    for (size_t j = 1; j < h; ++j)
      if (std::fabs(pcs[static_cast<size_t>(k)][j]) > std::fabs(pcs[static_cast<size_t>(k)][arg])) arg = j;
    if (pcs[static_cast<size_t>(k)][arg] < 0)
      for (double& v : pcs[static_cast<size_t>(k)]) v = -v;
  }
  std::vector<std::array<double, 2>> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    std::array<double, 2> p{0.0, 0.0};
    for (int k = 0; k < 2; ++k)
      for (size_t j = 0; j < h; ++j)
        p[static_cast<size_t>(k)] += (r.latent[j] - mean[j]) * pcs[static_cast<size_t>(k)][j];
    out.push_back(p);
  }
  return out;
}

}  // namespace hyla::probe
