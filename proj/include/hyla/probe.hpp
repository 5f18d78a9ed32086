#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "hyla/fuzzy.hpp"
#include "hyla/model.hpp"
#include "hyla/sraven.hpp"

namespace hyla::probe {

// Post-normalization attention fiber of the response token attending to
// itself, one record per (instance, layer), with task labels.
struct LatentRecord {
  int layer = 0;
  std::vector<double> latent;  // length H
  std::vector<int> terms;      // fuzzy: the task's term indices
  int rule = -1;               // sraven: rule governing the queried feature slot
  double target_value = 0.0;   // query target (fuzzy) or target class (sraven)
  std::string split_tag;
  int instance_id = 0;
};

enum class FuzzyCaptureMode {
  resample_all,   // fresh context and query per episode
  fixed_context,  // one context per spec, query resampled per episode
};

std::vector<LatentRecord> collect_fuzzy_latents(Model& model,
                                                const std::vector<fuzzy::TaskSpec>& specs,
                                                int episodes_per_spec, int n_context,
                                                FuzzyCaptureMode mode, uint64_t seed,
                                                const std::string& split_tag);

std::vector<LatentRecord> collect_sraven_latents(Model& model,
                                                 const std::vector<sraven::Combo>& combos,
                                                 int n_instances, int feature_values,
                                                 uint64_t seed, const std::string& split_tag);

struct ProbeModel {
  enum class Kind { multinomial, independent_binary };
  Kind kind = Kind::multinomial;
  int layer = 0;
  std::vector<int> classes;  // rule ids (multinomial) or term indices (binary)
  Tensor weights;            // [C, H+1], intercept last
};

// Multinomial logistic regression on sraven rule labels, fit full-batch with
// L2 1e-3 on one layer's records.
ProbeModel fit_probe_rules(const std::vector<LatentRecord>& train, int layer);
// One binary classifier per term index (fuzzy).
ProbeModel fit_probe_terms(const std::vector<LatentRecord>& train, int layer);

struct ProbeMetrics {
  std::vector<double> f1_per_class;
  double macro_f1 = 0.0;
  double accuracy = 0.0;  // multinomial only
};

ProbeMetrics eval_probe(const ProbeModel& probe, const std::vector<LatentRecord>& records);

// Pairwise cosine similarity between per-rule mean latents; indexed by rule id.
std::vector<std::vector<double>> rule_similarity_matrix(const std::vector<LatentRecord>& records);

void export_latents(const std::vector<LatentRecord>& records, const std::string& path);
std::vector<LatentRecord> import_latents(const std::string& path);

// Top-2 principal component projection; sign fixed so each component's
// largest-magnitude coordinate is positive.
std::vector<std::array<double, 2>> pca_2d(const std::vector<LatentRecord>& records);

}  // namespace hyla::probe
