#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "hyla/model.hpp"
#include "hyla/train.hpp"

namespace hyla {

// ModelConfig <-> JSON with field names matching the struct.
// Parsers are strict: unknown keys raise an error naming the field.
nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

nlohmann::json train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

// dotted-path override, e.g. apply_override(j, "model.num_heads", "16");
// values parse as JSON first, falling back to a plain string
void apply_override(nlohmann::json& j, const std::string& dotted_key, const std::string& value);

// Single-file checkpoint: versioned magic header, config as JSON text, then
// named parameter arrays with shapes, data stored as little-endian float32.
void save_checkpoint(Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

// Append-only metrics CSV with header `step,split,metric,value,seed`.
class MetricsCsv {
 public:
  // truncate=true starts a fresh file (reproducible reruns); false appends
  explicit MetricsCsv(const std::string& path, bool truncate = false);
  void append(long step, const std::string& split, const std::string& metric, double value,
              uint64_t seed);
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

// round-trip safe decimal formatting for doubles
std::string format_double(double v);

}  // namespace hyla
