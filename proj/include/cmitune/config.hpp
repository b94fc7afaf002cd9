#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "cmitune/data.hpp"
#include "cmitune/distiller.hpp"
#include "cmitune/model.hpp"
#include "cmitune/trainer.hpp"

namespace cmitune {

enum class DataKind { synth, jsonl };

struct DataConfig {
  DataKind kind = DataKind::synth;
  Metric metric = Metric::accuracy;
  // synth
  SynthTask task = SynthTask::majority_token;
  int n_train = 200;
  int n_dev = 50;
  int seq_len = 16;
  uint64_t seed = 0;
  // jsonl
  std::filesystem::path train_path;
  std::filesystem::path dev_path;
  std::optional<std::filesystem::path> vocab_path;  // absent: train BPE on the train texts
};

struct TeacherRef {
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> sweep_summary;
};

struct DistillSection {
  std::vector<double> alpha_grid{0.05, 0.5, 0.9};
  std::vector<double> temperature_grid{1, 2, 5};
  DistillOptions options;
  TeacherRef teacher;
};

struct TrainSection {
  TrainConfig config;
  std::vector<double> lambda_grid;  // sweep only
  int runs_per_config = 3;
};

// Parsed and validated run configuration file. Unknown keys anywhere in the
// document are rejected before any compute happens.
struct RunConfigFile {
  nlohmann::json raw;  // echoed verbatim into every report
  std::optional<ModelConfig> model;
  std::optional<DataConfig> data;
  std::optional<TrainSection> train;
  std::optional<DistillSection> distill;
  std::optional<std::filesystem::path> output_dir;
};

RunConfigFile parse_config_json(const nlohmann::json& doc);
RunConfigFile load_config(const std::filesystem::path& path);

// Deterministic content hash of a JSON document (sorted keys).
uint64_t json_fingerprint(const nlohmann::json& doc);

struct BuiltData {
  LabeledDataset train;
  LabeledDataset dev;
  std::optional<Vocab> vocab;  // jsonl only
};

// Materializes the datasets described by the config. For jsonl without an
// explicit vocab file, a BPE vocabulary is trained on the train-split texts
// at the model's vocab_size.
BuiltData build_data(const DataConfig& data, const ModelConfig& model);

}  // namespace cmitune
