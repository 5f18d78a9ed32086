#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hyla/fuzzy.hpp"
#include "hyla/model.hpp"
#include "hyla/sraven.hpp"
#include "hyla/tensor.hpp"

namespace hyla {

struct TaskConfig {
  enum class Kind { fuzzy, sraven };
  Kind kind = Kind::fuzzy;
  uint64_t split_seed = 0;

  // fuzzy logic regression
  int fuzzy_vars = 4;          // L
  int fuzzy_terms = 2;         // K
  int fuzzy_context = 64;      // N in-context examples
  double fuzzy_holdout = 0.3;  // fraction of eligible combinations held out
  int fuzzy_reserved = -1;     // reserved term count, -1 = default

  // symbolic raven
  int sraven_features = 4;  // K
  int sraven_values = 8;    // F
  double sraven_holdout = 0.25;

  int input_dim() const;
  int output_dim() const;
  int seq_len() const;
};

struct TrainConfig {
  double base_lr = 1e-3;
  double weight_decay = 0.1;
  int warmup_steps = 100;
  int total_steps = 2000;
  int batch_size = 32;
  int eval_every = 500;
  int eval_batches = 8;
  double grad_clip = 0.0;  // global-norm clip, 0 disables
  uint64_t seed = 0;
  MatmulPrecision precision = MatmulPrecision::f64;
  TaskConfig task;
  ModelConfig model;

  void validate() const;
};

// linear warmup from 0, then cosine decay to 0.1 * base_lr at total_steps
double lr_at(long step, const TrainConfig& config);

struct OptState {
  std::vector<std::vector<double>> m, v;  // first/second moments per parameter
  long step = 0;

  static OptState init(const std::vector<NamedParam>& params);
};

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

// Decoupled weight decay applied only to parameters marked weight_decay.
// Reads gradients left on the tensors by Tape::backward.
void adamw_step(std::vector<NamedParam>& params, OptState& state, double lr,
                double weight_decay);

// Resolved task: deterministic splits plus streaming batch construction.
struct TaskData {
  TaskConfig config;
  fuzzy::Splits fuzzy_splits;
  std::vector<sraven::Combo> sraven_train;
  std::vector<sraven::Combo> sraven_ood;

  static TaskData resolve(const TaskConfig& config);
};

struct Batch {
  Tensor tokens;                                  // [B, T, input_dim]
  std::vector<double> fuzzy_targets;              // fuzzy: B query targets
  std::vector<std::vector<int>> sraven_targets;   // sraven: B x K classes
  // provenance for split audits and latent labeling
  std::vector<fuzzy::TaskSpec> fuzzy_specs;
  std::vector<sraven::Instance> sraven_instances;
};

// split is "train", "ood" or (fuzzy only) "unseen"
Batch make_batch(const TaskData& task, const std::string& split, int batch_size, Rng& rng);

// fuzzy -> R^2 over pooled query predictions; sraven -> exact-match fraction
double evaluate(Model& model, const TaskData& task, const std::string& split, int n_batches,
                int batch_size, uint64_t seed);

struct TrainResult {
  Model model;  // reloaded from the written checkpoint (float32 storage)
  std::string checkpoint_path;
  std::string metrics_path;
  double final_train_loss = 0.0;
  double final_id_metric = 0.0;
  double final_ood_metric = 0.0;
};

// Streaming training loop; writes metrics.csv and checkpoints/final.ckpt under
// run_dir. Deterministic in (config, seed). Aborts with a diagnostic
// checkpoint on non-finite loss.
TrainResult train(const TrainConfig& config, const std::string& run_dir, bool verbose = false);

}  // namespace hyla
