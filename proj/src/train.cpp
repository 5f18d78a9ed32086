#include "hyla/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>

#include "hyla/io.hpp"

namespace hyla {

namespace {

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

int TaskConfig::input_dim() const {
  return kind == Kind::fuzzy ? fuzzy_vars + 1 : sraven_values;
}

int TaskConfig::output_dim() const {
  return kind == Kind::fuzzy ? 1 : sraven_values;
}

int TaskConfig::seq_len() const {
  return kind == Kind::fuzzy ? fuzzy_context + 1 : 9 * sraven_features;
}

void TrainConfig::validate() const {
  check(warmup_steps >= 0 && warmup_steps < total_steps,
        "train config: need 0 <= warmup_steps < total_steps");
  check(batch_size >= 1, "train config: batch_size must be >= 1");
  check(base_lr > 0.0, "train config: base_lr must be positive");
  check(eval_every >= 1 && eval_batches >= 1, "train config: eval cadence must be positive");
  model.validate();
}

double lr_at(long step, const TrainConfig& config) {
  check(step >= 0 && step <= config.total_steps, "lr_at: step out of range");
  double base = config.base_lr;
  if (step < config.warmup_steps)
    return base * static_cast<double>(step) / static_cast<double>(config.warmup_steps);
  double t = static_cast<double>(step - config.warmup_steps) /
             static_cast<double>(config.total_steps - config.warmup_steps);
  // cosine from base down to 0.1 * base
  return 0.1 * base + 0.9 * base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

OptState OptState::init(const std::vector<NamedParam>& params) {
  OptState st;
  st.m.reserve(params.size());
  st.v.reserve(params.size());
  for (const auto& p : params) {
    st.m.emplace_back(p.tensor.size(), 0.0);
    st.v.emplace_back(p.tensor.size(), 0.0);
  }
  return st;
}

void adamw_step(std::vector<NamedParam>& params, OptState& state, double lr,
                double weight_decay) {
  check(state.m.size() == params.size(), "adamw_step: optimizer state size mismatch");
  state.step += 1;
  double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].tensor;
    const std::vector<double>& g = p.grad_values();
    std::vector<double>& m = state.m[i];
    std::vector<double>& v = state.v[i];
    check(m.size() == p.size(), "adamw_step: parameter shape changed");
    bool has_grad = g.size() == p.size();
    for (size_t j = 0; j < p.size(); ++j) {
      double gj = has_grad ? g[j] : 0.0;
      m[j] = kAdamBeta1 * m[j] + (1.0 - kAdamBeta1) * gj;
      v[j] = kAdamBeta2 * v[j] + (1.0 - kAdamBeta2) * gj * gj;
      double mhat = m[j] / bc1;
      double vhat = v[j] / bc2;
      if (params[i].weight_decay && weight_decay > 0.0) p[j] -= lr * weight_decay * p[j];
      p[j] -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
    }
  }
}

TaskData TaskData::resolve(const TaskConfig& config) {
  TaskData task;
  task.config = config;
  if (config.kind == TaskConfig::Kind::fuzzy) {
    task.fuzzy_splits = fuzzy::enumerate_splits(config.fuzzy_vars, config.fuzzy_terms,
                                                config.fuzzy_holdout, config.split_seed,
                                                config.fuzzy_reserved);
  } else {
    auto combos = sraven::enumerate_rule_combos(sraven::kNumRules, config.sraven_features);
    auto split = sraven::split_combos(combos, config.sraven_holdout, config.split_seed);
    task.sraven_train = std::move(split.train);
    task.sraven_ood = std::move(split.ood);
  }
  return task;
}

namespace {

const std::vector<fuzzy::TaskSpec>& fuzzy_pool(const TaskData& task, const std::string& split) {
  if (split == "train") return task.fuzzy_splits.train;
  if (split == "ood") return task.fuzzy_splits.ood;
  if (split == "unseen") return task.fuzzy_splits.unseen_term;
  throw std::invalid_argument("unknown split '" + split + "'");
}

const std::vector<sraven::Combo>& sraven_pool(const TaskData& task, const std::string& split) {
  if (split == "train") return task.sraven_train;
  if (split == "ood") return task.sraven_ood;
  throw std::invalid_argument("unknown split '" + split + "' for sraven");
}

}  // namespace

Batch make_batch(const TaskData& task, const std::string& split, int batch_size, Rng& rng) {
  check(batch_size >= 1, "make_batch: batch_size must be >= 1");
  const TaskConfig& cfg = task.config;
  Batch batch;
  int T = cfg.seq_len();
  int in = cfg.input_dim();
  batch.tokens = Tensor::zeros({batch_size, T, in});
  if (cfg.kind == TaskConfig::Kind::fuzzy) {
    const auto& pool = fuzzy_pool(task, split);
    check(!pool.empty(), "make_batch: empty split '" + split + "'");
    for (int b = 0; b < batch_size; ++b) {
      const fuzzy::TaskSpec& spec =
          pool[static_cast<size_t>(rng.uniform_int(static_cast<int>(pool.size())))];
      fuzzy::Episode ep = fuzzy::sample_episode(spec, cfg.fuzzy_context, rng);
      std::copy(ep.tokens.values().begin(), ep.tokens.values().end(),
                batch.tokens.data() + static_cast<size_t>(b) * static_cast<size_t>(T * in));
      batch.fuzzy_targets.push_back(ep.target);
      batch.fuzzy_specs.push_back(spec);
    }
  } else {
    const auto& pool = sraven_pool(task, split);
    check(!pool.empty(), "make_batch: empty split '" + split + "'");
    for (int b = 0; b < batch_size; ++b) {
      const sraven::Combo& combo =
          pool[static_cast<size_t>(rng.uniform_int(static_cast<int>(pool.size())))];
      sraven::Instance inst = sraven::generate_instance(combo, rng, cfg.sraven_values);
      sraven::TokenizedInstance tok = sraven::tokenize(inst);
      std::copy(tok.tokens.values().begin(), tok.tokens.values().end(),
                batch.tokens.data() + static_cast<size_t>(b) * static_cast<size_t>(T * in));
      batch.sraven_targets.push_back(tok.targets);
      batch.sraven_instances.push_back(std::move(inst));
    }
  }
  return batch;
}

namespace {

// Loss per task: fuzzy = MSE on the final token's scalar logit; sraven =
// cross-entropy summed over the K query tokens, averaged over the batch.
Tensor task_loss(Tape& tp, const Tensor& logits, const Batch& batch, const TaskConfig& cfg) {
  int B = logits.dim(0), T = logits.dim(1);
  if (cfg.kind == TaskConfig::Kind::fuzzy) {
    Tensor last = slice(tp, logits, 1, T - 1, 1);  // [B,1,1]
    Tensor pred = reshape(tp, last, {B});
    Tensor target = Tensor::from_data({B}, batch.fuzzy_targets);
    return mse(tp, pred, target);
  }
  int K = cfg.sraven_features;
  int F = cfg.sraven_values;
  Tensor queries = slice(tp, logits, 1, T - K, K);  // [B,K,F]
  Tensor rows = reshape(tp, queries, {B * K, F});
  std::vector<int> classes;
  classes.reserve(static_cast<size_t>(B * K));
  for (const auto& t : batch.sraven_targets) classes.insert(classes.end(), t.begin(), t.end());
  Tensor mean_ce = cross_entropy_rows(tp, rows, classes);
  return scale(tp, mean_ce, static_cast<double>(K));  // sum over query tokens
}

}  // namespace

double evaluate(Model& model, const TaskData& task, const std::string& split, int n_batches,
                int batch_size, uint64_t seed) {
  const TaskConfig& cfg = task.config;
  Rng root(seed);
  if (cfg.kind == TaskConfig::Kind::fuzzy) {
    std::vector<double> preds, targets;
    for (int nb = 0; nb < n_batches; ++nb) {
      Rng rng = root.split(static_cast<uint64_t>(nb));
      Batch batch = make_batch(task, split, batch_size, rng);
      Tape tp;
      tp.set_recording(false);
      Tensor logits = model_forward(tp, batch.tokens, model);
      int T = logits.dim(1);
      for (int b = 0; b < batch_size; ++b) {
        preds.push_back(logits[static_cast<size_t>((b * T + T - 1) * 1)]);
        targets.push_back(batch.fuzzy_targets[static_cast<size_t>(b)]);
      }
    }
    return fuzzy::r2_score(preds, targets);
  }
  int K = cfg.sraven_features;
  int F = cfg.sraven_values;
  long correct = 0, total = 0;
  for (int nb = 0; nb < n_batches; ++nb) {
    Rng rng = root.split(static_cast<uint64_t>(nb));
    Batch batch = make_batch(task, split, batch_size, rng);
    Tape tp;
    tp.set_recording(false);
    Tensor logits = model_forward(tp, batch.tokens, model);
    int T = logits.dim(1);
    for (int b = 0; b < batch_size; ++b) {
      std::vector<int> pred(static_cast<size_t>(K));
      for (int k = 0; k < K; ++k) {
        int row = T - K + k;
        const double* ptr = logits.data() + static_cast<size_t>((b * T + row) * F);
        pred[static_cast<size_t>(k)] =
            static_cast<int>(std::max_element(ptr, ptr + F) - ptr);
      }
      if (sraven::exact_match(pred, batch.sraven_targets[static_cast<size_t>(b)])) ++correct;
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

TrainResult train(const TrainConfig& config, const std::string& run_dir, bool verbose) {
  config.validate();
  set_matmul_precision(config.precision);

  namespace fs = std::filesystem;
  fs::create_directories(run_dir);
  fs::create_directories(run_dir + "/checkpoints");

  TaskData task = TaskData::resolve(config.task);
  ModelConfig model_cfg = config.model;
  model_cfg.input_dim = config.task.input_dim();
  model_cfg.output_dim = config.task.output_dim();
  Model model = init_params(model_cfg, config.seed);
  auto params = model.parameters();
  OptState opt = OptState::init(params);

  MetricsCsv metrics(run_dir + "/metrics.csv", /*truncate=*/true);
  const char* metric_name = config.task.kind == TaskConfig::Kind::fuzzy ? "r2" : "exact_match";
  Rng root(config.seed);

  double last_loss = 0.0;
  for (int step = 0; step < config.total_steps; ++step) {
    Rng rng = root.split(static_cast<uint64_t>(step));
    Batch batch = make_batch(task, "train", config.batch_size, rng);
    Tape tp;
    Tensor logits = model_forward(tp, batch.tokens, model);
    Tensor loss = task_loss(tp, logits, batch, config.task);
    last_loss = loss.item();
    if (!std::isfinite(last_loss)) {
      std::string diag = run_dir + "/checkpoints/diagnostic_nan.ckpt";
      save_checkpoint(model, diag);
      throw std::runtime_error("train: non-finite loss at step " + std::to_string(step) +
                               "; diagnostic checkpoint written to " + diag);
    }
    tp.backward(loss);

    if (config.grad_clip > 0.0) {
      double sq = 0.0;
      for (auto& p : params)
        for (double g : p.tensor.grad_values()) sq += g * g;
      double norm = std::sqrt(sq);
      if (norm > config.grad_clip) {
        double s = config.grad_clip / norm;
        for (auto& p : params) {
          auto& g = p.tensor.impl()->grad;
          for (double& gv : g) gv *= s;
        }
      }
    }

    double lr = lr_at(step, config);
    adamw_step(params, opt, lr, config.weight_decay);
    metrics.append(step, "train", "loss", last_loss, config.seed);

    if ((step + 1) % config.eval_every == 0 && step + 1 < config.total_steps) {
      metrics.append(step, "train", "lr", lr, config.seed);
      uint64_t eval_seed = root.split(1000000 + static_cast<uint64_t>(step)).next_u64();
      double id = evaluate(model, task, "train", config.eval_batches, config.batch_size, eval_seed);
      double ood = evaluate(model, task, "ood", config.eval_batches, config.batch_size, eval_seed);
      metrics.append(step, "train", metric_name, id, config.seed);
      metrics.append(step, "ood", metric_name, ood, config.seed);
      if (verbose)
        std::printf("step %6d  loss %.5f  id %.4f  ood %.4f  lr %.2e\n", step + 1, last_loss, id,
                    ood, lr);
    }
  }

  TrainResult result;
  result.checkpoint_path = run_dir + "/checkpoints/final.ckpt";
  result.metrics_path = run_dir + "/metrics.csv";
  save_checkpoint(model, result.checkpoint_path);
  // final metrics come from the reloaded (float32) checkpoint so a later
  // `eval` on the file reproduces them exactly
  result.model = load_checkpoint(result.checkpoint_path);
  uint64_t final_seed = root.split(2000000).next_u64();
  result.final_train_loss = last_loss;
  result.final_id_metric = evaluate(result.model, task, "train", config.eval_batches,
                                    config.batch_size, final_seed);
  result.final_ood_metric =
      evaluate(result.model, task, "ood", config.eval_batches, config.batch_size, final_seed);
  metrics.append(config.total_steps, "train", std::string("final_") + metric_name,
                 result.final_id_metric, config.seed);
  metrics.append(config.total_steps, "ood", std::string("final_") + metric_name,
                 result.final_ood_metric, config.seed);
  if (verbose)
    std::printf("final  loss %.5f  id %.4f  ood %.4f\n", last_loss, result.final_id_metric,
                result.final_ood_metric);
  return result;
}

}  // namespace hyla
