// Command-line front end: verification suites, dataset export, the ambiguity
// report, training, evaluation and latent probing, all seed-addressed.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "hyla/gradcheck.hpp"
#include "hyla/io.hpp"
#include "hyla/probe.hpp"
#include "hyla/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hyla;

namespace {

constexpr const char* kVersion = "hyla 0.1.0";

std::string timestamp_utc() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

// Written before any long computation starts; re-running with the recorded
// config reproduces the run in 64-bit mode.
void write_manifest(const std::string& run_dir, const std::string& command, uint64_t seed,
                    const json& resolved_config, const json& outputs) {
  fs::create_directories(run_dir);
  json manifest{{"command", command},
                {"version", kVersion},
                {"seed", seed},
                {"created_utc", timestamp_utc()},
                {"config", resolved_config},
                {"outputs", outputs}};
  std::ofstream os(run_dir + "/manifest.json");
  os << manifest.dump(2) << "\n";
}

TrainConfig load_train_config(const std::string& path, const std::vector<std::string>& overrides) {
  json j;
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config file '" + path + "'");
    j = json::parse(is);
  } else {
    j = train_config_to_json(TrainConfig{});
  }
  for (const std::string& ov : overrides) {
    size_t eq = ov.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("override '" + ov + "' is not of the form key=value");
    apply_override(j, ov.substr(0, eq), ov.substr(eq + 1));
  }
  // fill unset fields with defaults, then re-parse strictly
  json base = train_config_to_json(TrainConfig{});
  base.merge_patch(j);
  return train_config_from_json(base);
}

struct VerifyReport {
  int failures = 0;
  void row(const std::string& name, bool pass, const std::string& detail) {
    std::printf("[%s] %-34s %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
    if (!pass) ++failures;
  }
};

int cmd_verify(bool corrupt_scale) {
  set_matmul_precision(MatmulPrecision::f64);  // verification always runs in 64-bit
  VerifyReport report;

  // hypernetwork equivalence across 100 random configurations
  {
    Rng meta(20240901);
    double worst = 0.0;
    std::string worst_case;
    for (int n = 0; n < 100; ++n) {
      int H = std::vector<int>{1, 2, 4, 8}[static_cast<size_t>(meta.uniform_int(4))];
      int dh = 1 + meta.uniform_int(4);
      int D = 1 + meta.uniform_int(32);
      int T = 1 + meta.uniform_int(8);
      NormMode mode = meta.uniform_int(2) == 0 ? NormMode::identity : NormMode::softmax_over_keys;
      bool causal = meta.uniform_int(2) == 0;
      Rng rng(900 + static_cast<uint64_t>(n));
      AttentionParams params = AttentionParams::init(D, H * dh, H, rng);
      Tensor X = Tensor::normal({T, D}, rng);
      AttentionParams hn_params = params;
      if (corrupt_scale) {
        // test hook: break the score scaling on the hypernetwork side
        hn_params.w_query = Tensor::from_data(params.w_query.shape(), params.w_query.values());
        for (size_t i = 0; i < hn_params.w_query.size(); ++i) hn_params.w_query[i] *= 1.001;
      }
      Tape tp;
      Tensor a = mha_forward(tp, X, params, mode, causal);
      Tensor b = hypernet_forward(tp, X, hn_params, mode, causal);
      for (size_t i = 0; i < a.size(); ++i) {
        double d = std::fabs(a[i] - b[i]);
        if (d > worst) {
          worst = d;
          std::ostringstream os;
          os << "H=" << H << " Dh=" << dh << " D=" << D << " T=" << T << " mode="
             << norm_mode_name(mode) << " causal=" << causal;
          worst_case = os.str();
        }
      }
    }
    std::ostringstream detail;
    detail << "max |mha - hypernet| = " << std::scientific << std::setprecision(2) << worst;
    if (worst > 1e-10) detail << "  (" << worst_case << ")";
    report.row("equivalence (100 configs)", worst <= 1e-10, detail.str());
  }

  // gradient checks for every variant on a tiny end-to-end model
  {
    Rng rng(41);
    Tensor tokens = Tensor::normal({4, 3}, rng);
    Tensor W = Tensor::normal({4, 2}, rng);
    double worst = 0.0;
    std::string worst_name;
    for (AttentionVariant v : {AttentionVariant::softmax, AttentionVariant::linear,
                               AttentionVariant::hyla, AttentionVariant::hyla_deep}) {
      for (FeedForwardKind ff : {FeedForwardKind::mlp, FeedForwardKind::moe}) {
        ModelConfig mc;
        mc.num_layers = 2;
        mc.emb_dim = 8;
        mc.kqv_dim = 4;
        mc.mlp_dim = 12;
        mc.num_heads = 2;
        mc.input_dim = 3;
        mc.output_dim = 2;
        mc.attention = v;
        mc.feedforward = ff;
        mc.moe_experts = 3;
        mc.moe_top_k = 2;
        Model model = init_params(mc, 7 + static_cast<uint64_t>(v));
        std::vector<Tensor> leaves = {tokens};
        for (auto& p : model.parameters()) leaves.push_back(p.tensor);
        double err = grad_check(
            [&](Tape& tp) {
              Tensor logits = model_forward(tp, tokens, model);
              return reduce_sum_all(tp, mul(tp, logits, W));
            },
            leaves, 1e-5, 4);
        if (err > worst) {
          worst = err;
          worst_name = variant_name(v) + std::string(ff == FeedForwardKind::moe ? "+moe" : "+mlp");
        }
      }
    }
    std::ostringstream detail;
    detail << "max rel err = " << std::scientific << std::setprecision(2) << worst << " ("
           << worst_name << ")";
    report.row("gradients (all variants)", worst <= 1e-4, detail.str());
  }

  // RMSHead invariant on random score arrays
  {
    Rng rng(43);
    double worst = 0.0;
    Tape tp;
    for (int n = 0; n < 1000; ++n) {
      int H = 2 + rng.uniform_int(15);
      int T = 1 + rng.uniform_int(8);
      Tensor scores = Tensor::normal({1, H, T, T}, rng, 1.0 + rng.uniform() * 4.0);
      AttentionScores normed =
          normalize(tp, {scores, NormMode::identity}, NormMode::rmshead_over_heads, false);
      for (int q = 0; q < T; ++q)
        for (int k = 0; k < T; ++k) {
          double ms = 0.0;
          for (int h = 0; h < H; ++h) {
            double v = normed.values[static_cast<size_t>(((h * T) + q) * T + k)];
            ms += v * v;
          }
          worst = std::max(worst, std::fabs(std::sqrt(ms / H) - 1.0));
        }
    }
    std::ostringstream detail;
    detail << "max |rms - 1| = " << std::scientific << std::setprecision(2) << worst
           << " over 1000 arrays";
    report.row("rmshead invariant", worst <= 1e-10, detail.str());
  }

  std::printf("%s\n", report.failures == 0 ? "verify: all checks passed"
                                           : "verify: FAILURES detected");
  return report.failures == 0 ? 0 : 1;
}

int cmd_gen(const std::string& task_name, int n, uint64_t seed, const std::string& out,
            const std::string& split, const json& task_overrides) {
  TaskConfig tc;
  tc.kind = task_name == "fuzzy" ? TaskConfig::Kind::fuzzy : TaskConfig::Kind::sraven;
  if (task_overrides.contains("task")) {
    json merged = train_config_to_json(TrainConfig{});
    merged.merge_patch(task_overrides);
    tc = train_config_from_json(merged).task;
    tc.kind = task_name == "fuzzy" ? TaskConfig::Kind::fuzzy : TaskConfig::Kind::sraven;
  }
  TaskData task = TaskData::resolve(tc);

  fs::path out_path(out);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  std::ofstream os(out, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open output file '" + out + "'");

  Rng root(seed);
  for (int i = 0; i < n; ++i) {
    Rng rng = root.split(static_cast<uint64_t>(i));
    Batch b = make_batch(task, split, 1, rng);
    json rec;
    if (tc.kind == TaskConfig::Kind::fuzzy) {
      const auto& spec = b.fuzzy_specs[0];
      std::vector<std::vector<double>> tokens;
      int T = b.tokens.dim(1), in = b.tokens.dim(2);
      for (int t = 0; t < T; ++t)
        tokens.emplace_back(b.tokens.data() + static_cast<size_t>(t * in),
                            b.tokens.data() + static_cast<size_t>((t + 1) * in));
      rec = json{{"spec_terms", spec.terms},
                 {"tokens", tokens},
                 {"target", b.fuzzy_targets[0]},
                 {"split_tag", split}};
    } else {
      const auto& inst = b.sraven_instances[0];
      std::vector<std::vector<std::vector<int>>> grid(3);
      for (int r = 0; r < 3; ++r)
        for (int g = 0; g < 3; ++g) {
          std::vector<int> panel;
          for (int j = 0; j < inst.K; ++j) panel.push_back(inst.at(r, g, j));
          grid[static_cast<size_t>(r)].push_back(panel);
        }
      std::vector<std::string> combo;
      for (auto r : inst.combo) combo.push_back(sraven::rule_name(r));
      rec = json{{"grid", grid}, {"combo", combo}, {"perms", inst.perms}, {"split_tag", split}};
    }
    os << rec.dump() << "\n";
  }
  std::printf("wrote %d %s records (%s split) to %s\n", n, task_name.c_str(), split.c_str(),
              out.c_str());
  return 0;
}

int cmd_ambiguity(int K, int F, int n, uint64_t seed, const std::string& run_dir) {
  if (!run_dir.empty())
    write_manifest(run_dir, "ambiguity", seed,
                   json{{"K", K}, {"F", F}, {"n", n}}, json{{"report", "ambiguity.txt"}});
  Rng rng(seed);
  sraven::AmbiguityEstimate est = sraven::estimate_ambiguity(K, F, n, rng);
  std::ostringstream table;
  table << "Number of features (K)  Number of feature values (F)  Estimated fraction of ambiguous examples\n";
  table << std::left << std::setw(24) << K << std::setw(30) << F << std::fixed
        << std::setprecision(4) << est.fraction << " +/- " << est.standard_error << "  ("
        << est.ambiguous << "/" << est.samples << ")\n";
  std::printf("%s", table.str().c_str());
  if (!run_dir.empty()) {
    std::ofstream os(run_dir + "/ambiguity.txt");
    os << table.str();
  }
  return 0;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& run_dir, bool verbose) {
  TrainConfig cfg = load_train_config(config_path, overrides);
  write_manifest(run_dir, "train", cfg.seed, train_config_to_json(cfg),
                 json{{"metrics", "metrics.csv"}, {"checkpoint", "checkpoints/final.ckpt"}});
  TrainResult res = train(cfg, run_dir, verbose);
  std::printf("train: done; final %s id=%.4f ood=%.4f; checkpoint %s\n",
              cfg.task.kind == TaskConfig::Kind::fuzzy ? "r2" : "exact_match",
              res.final_id_metric, res.final_ood_metric, res.checkpoint_path.c_str());
  return 0;
}

int cmd_eval(const std::string& config_path, const std::vector<std::string>& overrides,
             const std::string& checkpoint, const std::string& split, int batches,
             uint64_t seed) {
  TrainConfig cfg = load_train_config(config_path, overrides);
  if (!fs::exists(checkpoint))
    throw std::runtime_error("checkpoint '" + checkpoint + "' does not exist");
  set_matmul_precision(cfg.precision);
  Model model = load_checkpoint(checkpoint);
  TaskData task = TaskData::resolve(cfg.task);
  double metric = evaluate(model, task, split, batches, cfg.batch_size, seed);
  std::printf("eval: %s %s = %s\n", split.c_str(),
              cfg.task.kind == TaskConfig::Kind::fuzzy ? "r2" : "exact_match",
              format_double(metric).c_str());
  return 0;
}

int cmd_probe(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& checkpoint, const std::string& split, int n_instances,
              uint64_t seed, const std::string& run_dir, bool fixed_context) {
  TrainConfig cfg = load_train_config(config_path, overrides);
  if (!fs::exists(checkpoint))
    throw std::runtime_error("checkpoint '" + checkpoint + "' does not exist");
  write_manifest(run_dir, "probe", seed, train_config_to_json(cfg),
                 json{{"latents", "latents/latents.csv"},
                      {"pca", "latents/pca.csv"},
                      {"metrics", "metrics.csv"}});
  set_matmul_precision(MatmulPrecision::f64);
  Model model = load_checkpoint(checkpoint);
  TaskData task = TaskData::resolve(cfg.task);
  fs::create_directories(run_dir + "/latents");
  MetricsCsv metrics(run_dir + "/metrics.csv", /*truncate=*/true);

  std::vector<probe::LatentRecord> train_recs, eval_recs;
  if (cfg.task.kind == TaskConfig::Kind::fuzzy) {
    auto mode = fixed_context ? probe::FuzzyCaptureMode::fixed_context
                              : probe::FuzzyCaptureMode::resample_all;
    int per_spec = std::max(1, n_instances / static_cast<int>(task.fuzzy_splits.train.size()));
    train_recs = probe::collect_fuzzy_latents(model, task.fuzzy_splits.train, per_spec,
                                              cfg.task.fuzzy_context, mode, seed, "train");
    const auto& pool = split == "unseen" ? task.fuzzy_splits.unseen_term : task.fuzzy_splits.ood;
    int per_eval = std::max(1, n_instances / static_cast<int>(pool.size()));
    eval_recs = probe::collect_fuzzy_latents(model, pool, per_eval, cfg.task.fuzzy_context, mode,
                                             seed + 1, split);
  } else {
    train_recs = probe::collect_sraven_latents(model, task.sraven_train, n_instances,
                                               cfg.task.sraven_values, seed, "train");
    const auto& pool = split == "train" ? task.sraven_train : task.sraven_ood;
    eval_recs = probe::collect_sraven_latents(model, pool, n_instances, cfg.task.sraven_values,
                                              seed + 1, split);
  }

  std::vector<probe::LatentRecord> all = train_recs;
  all.insert(all.end(), eval_recs.begin(), eval_recs.end());
  probe::export_latents(all, run_dir + "/latents/latents.csv");
  auto proj = probe::pca_2d(all);
  {
    std::ofstream os(run_dir + "/latents/pca.csv");
    os << "pc1,pc2\n";
    for (auto& p : proj) os << format_double(p[0]) << ',' << format_double(p[1]) << "\n";
  }

  for (int layer = 0; layer < cfg.model.num_layers; ++layer) {
    probe::ProbeModel pm = cfg.task.kind == TaskConfig::Kind::fuzzy
                               ? probe::fit_probe_terms(train_recs, layer)
                               : probe::fit_probe_rules(train_recs, layer);
    probe::ProbeMetrics m = probe::eval_probe(pm, eval_recs);
    for (size_t c = 0; c < pm.classes.size(); ++c)
      metrics.append(layer, split,
                     "probe_f1_layer" + std::to_string(layer) + "_class" +
                         std::to_string(pm.classes[c]),
                     m.f1_per_class[c], seed);
    std::printf("probe: layer %d macro-F1 (%s) = %.4f\n", layer, split.c_str(), m.macro_f1);
  }

  if (cfg.task.kind == TaskConfig::Kind::sraven) {
    auto sim = probe::rule_similarity_matrix(eval_recs);
    std::ofstream os(run_dir + "/latents/rule_similarity.csv");
    for (int a = 0; a < sraven::kNumRules; ++a) {
      for (int b = 0; b < sraven::kNumRules; ++b)
        os << (b ? "," : "") << format_double(sim[static_cast<size_t>(a)][static_cast<size_t>(b)]);
      os << "\n";
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attention-as-hypernetwork layers, reasoning benchmarks and training"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  auto* verify = app.add_subcommand("verify", "run the equivalence, gradient and rmshead suites");
  bool corrupt_scale = false;
  verify->add_flag("--corrupt-scale", corrupt_scale,
                   "test hook: corrupt the hypernetwork side to prove the suite can fail");

  auto* gen = app.add_subcommand("gen", "export a dataset as line-delimited json");
  std::string gen_task = "fuzzy", gen_out = "dataset.jsonl", gen_split = "train";
  int gen_n = 100;
  uint64_t gen_seed = 0;
  std::vector<std::string> gen_overrides;
  gen->add_option("--task", gen_task, "fuzzy or sraven")->check(CLI::IsMember({"fuzzy", "sraven"}));
  gen->add_option("--n", gen_n, "number of records");
  gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_option("--out", gen_out, "output path");
  gen->add_option("--split", gen_split, "train, ood or (fuzzy) unseen");
  gen->add_option("--set", gen_overrides, "task config overrides, e.g. task.fuzzy_vars=5");

  auto* amb = app.add_subcommand("ambiguity", "monte-carlo ambiguity report for sraven");
  int amb_k = 4, amb_f = 8, amb_n = 4096;
  uint64_t amb_seed = 0;
  std::string amb_dir;
  amb->add_option("--k", amb_k, "features per panel");
  amb->add_option("--f", amb_f, "feature values");
  amb->add_option("--n", amb_n, "sample count");
  amb->add_option("--seed", amb_seed, "sampling seed");
  amb->add_option("--run-dir", amb_dir, "optional run directory for the report");

  auto* tr = app.add_subcommand("train", "train a model from a config file");
  std::string tr_config, tr_dir = "runs/run";
  std::vector<std::string> tr_overrides;
  bool tr_verbose = false;
  tr->add_option("--config", tr_config, "json config path (defaults used when omitted)");
  tr->add_option("--set", tr_overrides, "overrides like model.num_heads=16 or seed=3");
  tr->add_option("--run-dir", tr_dir, "output directory");
  tr->add_flag("--verbose", tr_verbose, "print progress lines");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  std::string ev_config, ev_ckpt, ev_split = "ood";
  std::vector<std::string> ev_overrides;
  int ev_batches = 8;
  uint64_t ev_seed = 0;
  ev->add_option("--config", ev_config, "train config json (task definition)");
  ev->add_option("--set", ev_overrides, "config overrides");
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--split", ev_split, "train, ood or (fuzzy) unseen");
  ev->add_option("--batches", ev_batches, "evaluation batches");
  ev->add_option("--seed", ev_seed, "evaluation seed");

  auto* pr = app.add_subcommand("probe", "latent capture, probes and similarity analysis");
  std::string pr_config, pr_ckpt, pr_split = "ood", pr_dir = "runs/probe";
  std::vector<std::string> pr_overrides;
  int pr_n = 256;
  uint64_t pr_seed = 0;
  bool pr_fixed = false;
  pr->add_option("--config", pr_config, "train config json (task definition)");
  pr->add_option("--set", pr_overrides, "config overrides");
  pr->add_option("--checkpoint", pr_ckpt, "checkpoint path")->required();
  pr->add_option("--split", pr_split, "evaluation split");
  pr->add_option("--n", pr_n, "instances to capture per split");
  pr->add_option("--seed", pr_seed, "capture seed");
  pr->add_option("--run-dir", pr_dir, "output directory");
  pr->add_flag("--fixed-context", pr_fixed,
               "fuzzy capture: keep in-context examples fixed, resample the query");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*verify) return cmd_verify(corrupt_scale);
    if (*gen) {
      json ov;
      for (auto& s : gen_overrides) {
        size_t eq = s.find('=');
        if (eq == std::string::npos)
          throw std::invalid_argument("override '" + s + "' is not key=value");
        apply_override(ov, s.substr(0, eq), s.substr(eq + 1));
      }
      return cmd_gen(gen_task, gen_n, gen_seed, gen_out, gen_split, ov);
    }
    if (*amb) return cmd_ambiguity(amb_k, amb_f, amb_n, amb_seed, amb_dir);
    if (*tr) return cmd_train(tr_config, tr_overrides, tr_dir, tr_verbose);
    if (*ev) return cmd_eval(ev_config, ev_overrides, ev_ckpt, ev_split, ev_batches, ev_seed);
    if (*pr)
      return cmd_probe(pr_config, pr_overrides, pr_ckpt, pr_split, pr_n, pr_seed, pr_dir,
                       pr_fixed);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
