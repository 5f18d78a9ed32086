#include "hyla/io.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>
#include <stdexcept>

namespace hyla {

static_assert(std::endian::native == std::endian::little,
              "checkpoint code assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'H', 'Y', 'L', 'A', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

void fail(const std::string& msg) { throw std::runtime_error(msg); }

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) fail("checkpoint: truncated file");
  return v;
}

}  // namespace

nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"num_layers", c.num_layers},
                        {"emb_dim", c.emb_dim},
                        {"kqv_dim", c.kqv_dim},
                        {"mlp_dim", c.mlp_dim},
                        {"num_heads", c.num_heads},
                        {"width_factor", c.width_factor},
                        {"attention", variant_name(c.attention)},
                        {"hyla_use_rmshead", c.hyla_flags.use_rmshead},
                        {"hyla_use_nonlinearity", c.hyla_flags.use_nonlinearity},
                        {"hyla_softmax_override", c.hyla_flags.softmax_override},
                        {"feedforward", c.feedforward == FeedForwardKind::moe ? "moe" : "mlp"},
                        {"moe_experts", c.moe_experts},
                        {"moe_top_k", c.moe_top_k},
                        {"input_dim", c.input_dim},
                        {"output_dim", c.output_dim},
                        {"causal", c.causal},
                        {"final_layer_norm", c.final_layer_norm},
                        {"rel_pos_bias", c.rel_pos_bias}};
}

namespace {

void check_known_keys(const nlohmann::json& j, const std::vector<std::string>& known,
                      const std::string& scope) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      fail("config: unknown field '" + (scope.empty() ? it.key() : scope + "." + it.key()) + "'");
  }
}

}  // namespace

ModelConfig config_from_json(const nlohmann::json& j) {
  check_known_keys(j,
                   {"num_layers", "emb_dim", "kqv_dim", "mlp_dim", "num_heads", "width_factor",
                    "attention", "hyla_use_rmshead", "hyla_use_nonlinearity",
                    "hyla_softmax_override", "feedforward", "moe_experts", "moe_top_k",
                    "input_dim", "output_dim", "causal", "final_layer_norm", "rel_pos_bias"},
                   "model");
  ModelConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("num_layers", c.num_layers);
  get("emb_dim", c.emb_dim);
  get("kqv_dim", c.kqv_dim);
  get("mlp_dim", c.mlp_dim);
  get("num_heads", c.num_heads);
  get("width_factor", c.width_factor);
  if (j.contains("attention")) c.attention = variant_from_name(j.at("attention").get<std::string>());
  get("hyla_use_rmshead", c.hyla_flags.use_rmshead);
  get("hyla_use_nonlinearity", c.hyla_flags.use_nonlinearity);
  get("hyla_softmax_override", c.hyla_flags.softmax_override);
  if (j.contains("feedforward")) {
    std::string ff = j.at("feedforward").get<std::string>();
    if (ff != "mlp" && ff != "moe") fail("config: feedforward must be 'mlp' or 'moe', got '" + ff + "'");
    c.feedforward = ff == "moe" ? FeedForwardKind::moe : FeedForwardKind::mlp;
  }
  get("moe_experts", c.moe_experts);
  get("moe_top_k", c.moe_top_k);
  get("input_dim", c.input_dim);
  get("output_dim", c.output_dim);
  get("causal", c.causal);
  get("final_layer_norm", c.final_layer_norm);
  get("rel_pos_bias", c.rel_pos_bias);
  c.validate();
  return c;
}

namespace {

nlohmann::json task_config_to_json(const TaskConfig& t) {
  return nlohmann::json{{"kind", t.kind == TaskConfig::Kind::fuzzy ? "fuzzy" : "sraven"},
                        {"split_seed", t.split_seed},
                        {"fuzzy_vars", t.fuzzy_vars},
                        {"fuzzy_terms", t.fuzzy_terms},
                        {"fuzzy_context", t.fuzzy_context},
                        {"fuzzy_holdout", t.fuzzy_holdout},
                        {"fuzzy_reserved", t.fuzzy_reserved},
                        {"sraven_features", t.sraven_features},
                        {"sraven_values", t.sraven_values},
                        {"sraven_holdout", t.sraven_holdout}};
}

TaskConfig task_config_from_json(const nlohmann::json& j) {
  check_known_keys(j,
                   {"kind", "split_seed", "fuzzy_vars", "fuzzy_terms", "fuzzy_context",
                    "fuzzy_holdout", "fuzzy_reserved", "sraven_features", "sraven_values",
                    "sraven_holdout"},
                   "task");
  TaskConfig t;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  if (j.contains("kind")) {
    std::string kind = j.at("kind").get<std::string>();
    if (kind != "fuzzy" && kind != "sraven")
      fail("config: task.kind must be 'fuzzy' or 'sraven', got '" + kind + "'");
    t.kind = kind == "fuzzy" ? TaskConfig::Kind::fuzzy : TaskConfig::Kind::sraven;
  }
  get("split_seed", t.split_seed);
  get("fuzzy_vars", t.fuzzy_vars);
  get("fuzzy_terms", t.fuzzy_terms);
  get("fuzzy_context", t.fuzzy_context);
  get("fuzzy_holdout", t.fuzzy_holdout);
  get("fuzzy_reserved", t.fuzzy_reserved);
  get("sraven_features", t.sraven_features);
  get("sraven_values", t.sraven_values);
  get("sraven_holdout", t.sraven_holdout);
  return t;
}

}  // namespace

nlohmann::json train_config_to_json(const TrainConfig& c) {
  return nlohmann::json{{"base_lr", c.base_lr},
                        {"weight_decay", c.weight_decay},
                        {"warmup_steps", c.warmup_steps},
                        {"total_steps", c.total_steps},
                        {"batch_size", c.batch_size},
                        {"eval_every", c.eval_every},
                        {"eval_batches", c.eval_batches},
                        {"grad_clip", c.grad_clip},
                        {"seed", c.seed},
                        {"precision", c.precision == MatmulPrecision::f32 ? "f32" : "f64"},
                        {"task", task_config_to_json(c.task)},
                        {"model", config_to_json(c.model)}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  check_known_keys(j,
                   {"base_lr", "weight_decay", "warmup_steps", "total_steps", "batch_size",
                    "eval_every", "eval_batches", "grad_clip", "seed", "precision", "task",
                    "model"},
                   "");
  TrainConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("base_lr", c.base_lr);
  get("weight_decay", c.weight_decay);
  get("warmup_steps", c.warmup_steps);
  get("total_steps", c.total_steps);
  get("batch_size", c.batch_size);
  get("eval_every", c.eval_every);
  get("eval_batches", c.eval_batches);
  get("grad_clip", c.grad_clip);
  get("seed", c.seed);
  if (j.contains("precision")) {
    std::string p = j.at("precision").get<std::string>();
    if (p != "f32" && p != "f64") fail("config: precision must be 'f32' or 'f64', got '" + p + "'");
    c.precision = p == "f32" ? MatmulPrecision::f32 : MatmulPrecision::f64;
  }
  if (j.contains("task")) c.task = task_config_from_json(j.at("task"));
  if (j.contains("model")) c.model = config_from_json(j.at("model"));
  c.validate();
  return c;
}

void apply_override(nlohmann::json& j, const std::string& dotted_key, const std::string& value) {
  nlohmann::json* node = &j;
  size_t start = 0;
  while (true) {
    size_t dot = dotted_key.find('.', start);
    std::string part = dotted_key.substr(start, dot == std::string::npos ? dot : dot - start);
    if (part.empty()) fail("override: empty path segment in '" + dotted_key + "'");
    if (dot == std::string::npos) {
      nlohmann::json parsed = nlohmann::json::parse(value, nullptr, /*allow_exceptions=*/false);
      (*node)[part] = parsed.is_discarded() ? nlohmann::json(value) : parsed;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

void save_checkpoint(Model& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail("checkpoint: cannot open '" + path + "' for writing");
  os.write(kMagic, sizeof(kMagic));
  write_pod<uint32_t>(os, kVersion);
  std::string cfg = config_to_json(model.config).dump();
  write_pod<uint64_t>(os, cfg.size());
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

  auto params = model.parameters();
  write_pod<uint64_t>(os, params.size());
  std::vector<float> buf;
  for (auto& p : params) {
    write_pod<uint32_t>(os, static_cast<uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_pod<uint32_t>(os, static_cast<uint32_t>(p.tensor.ndim()));
    for (int d = 0; d < p.tensor.ndim(); ++d) write_pod<int64_t>(os, p.tensor.dim(d));
    buf.resize(p.tensor.size());
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(p.tensor[i]);
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!os) fail("checkpoint: write to '" + path + "' failed");
}

Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("checkpoint: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    fail("checkpoint: '" + path + "' is not a checkpoint file");
  uint32_t version = read_pod<uint32_t>(is);
  if (version != kVersion)
    fail("checkpoint: unsupported version " + std::to_string(version));
  uint64_t cfg_len = read_pod<uint64_t>(is);
  std::string cfg(cfg_len, '\0');
  is.read(cfg.data(), static_cast<std::streamsize>(cfg_len));
  if (!is) fail("checkpoint: truncated config");
  Model model = init_params(config_from_json(nlohmann::json::parse(cfg)), 0);

  uint64_t n_params = read_pod<uint64_t>(is);
  auto params = model.parameters();
  if (n_params != params.size())
    fail("checkpoint: parameter count mismatch (" + std::to_string(n_params) + " stored, " +
         std::to_string(params.size()) + " expected)");
  std::vector<float> buf;
  for (auto& p : params) {
    uint32_t name_len = read_pod<uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (name != p.name) fail("checkpoint: parameter order mismatch at '" + name + "'");
    uint32_t ndim = read_pod<uint32_t>(is);
    if (static_cast<int>(ndim) != p.tensor.ndim())
      fail("checkpoint: rank mismatch for '" + name + "'");
    for (int d = 0; d < p.tensor.ndim(); ++d) {
      int64_t extent = read_pod<int64_t>(is);
      if (extent != p.tensor.dim(d)) fail("checkpoint: shape mismatch for '" + name + "'");
    }
    buf.resize(p.tensor.size());
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!is) fail("checkpoint: truncated data for '" + name + "'");
    for (size_t i = 0; i < buf.size(); ++i) p.tensor[i] = static_cast<double>(buf[i]);
  }
  return model;
}

MetricsCsv::MetricsCsv(const std::string& path, bool truncate) : path_(path) {
  bool need_header = truncate;
  if (!truncate) {
    std::ifstream probe(path_);
    need_header = !probe || probe.peek() == std::ifstream::traits_type::eof();
  }
  if (need_header) {
    std::ofstream os(path_, truncate ? std::ios::trunc : std::ios::app);
    if (!os) fail("metrics: cannot open '" + path_ + "'");
    os << "step,split,metric,value,seed\n";
  }
}

void MetricsCsv::append(long step, const std::string& split, const std::string& metric,
                        double value, uint64_t seed) {
  std::ofstream os(path_, std::ios::app);
  if (!os) fail("metrics: cannot open '" + path_ + "'");
  os << step << ',' << split << ',' << metric << ',' << format_double(value) << ',' << seed
     << '\n';
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace hyla
