#include "cmitune/config.hpp"

#include <fstream>
#include <sstream>

namespace cmitune {

using nlohmann::json;

namespace {

void require_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: section '" + where + "' must be an object");
}

void reject_unknown_keys(const json& obj, const std::string& where,
                         std::initializer_list<const char*> allowed) {
  for (const auto& [key, value] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("config: unknown key '" + key + "' in section '" + where + "'");
  }
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: key '" + std::string(key) + "' has the wrong type");
  }
}

ModelConfig parse_model(const json& j) {
  require_object(j, "model");
  reject_unknown_keys(j, "model",
                      {"vocab_size", "embed_dim", "context_len", "num_layers", "num_heads",
                       "ffn_mult", "num_classes", "pooling", "cls_token_id"});
  ModelConfig c;
  c.vocab_size = get_or(j, "vocab_size", c.vocab_size);
  c.embed_dim = get_or(j, "embed_dim", c.embed_dim);
  c.context_len = get_or(j, "context_len", c.context_len);
  c.num_layers = get_or(j, "num_layers", c.num_layers);
  c.num_heads = get_or(j, "num_heads", c.num_heads);
  c.ffn_mult = get_or(j, "ffn_mult", c.ffn_mult);
  c.num_classes = get_or(j, "num_classes", c.num_classes);
  const std::string pooling = get_or<std::string>(j, "pooling", "first_special");
  if (pooling == "first_special") {
    c.pooling = Pooling::first_special;
  } else if (pooling == "last_token") {
    c.pooling = Pooling::last_token;
  } else {
    throw ConfigError("config: model.pooling must be 'first_special' or 'last_token'");
  }
  c.cls_token_id = get_or(j, "cls_token_id", c.cls_token_id);
  c.validate();
  return c;
}

DataConfig parse_data(const json& j) {
  require_object(j, "data");
  reject_unknown_keys(j, "data", {"kind", "metric", "synth", "jsonl"});
  DataConfig d;
  const std::string kind = get_or<std::string>(j, "kind", "synth");
  if (kind == "synth") {
    d.kind = DataKind::synth;
  } else if (kind == "jsonl") {
    d.kind = DataKind::jsonl;
  } else {
    throw ConfigError("config: data.kind must be 'synth' or 'jsonl'");
  }
  d.metric = metric_from_name(get_or<std::string>(j, "metric", "accuracy"));
  if (d.kind == DataKind::synth) {
    if (!j.contains("synth")) throw ConfigError("config: data.kind 'synth' needs a data.synth section");
    const json& s = j.at("synth");
    require_object(s, "data.synth");
    reject_unknown_keys(s, "data.synth", {"task", "n_train", "n_dev", "seq_len", "seed"});
    d.task = synth_task_from_name(get_or<std::string>(s, "task", "majority_token"));
    d.n_train = get_or(s, "n_train", d.n_train);
    d.n_dev = get_or(s, "n_dev", d.n_dev);
    d.seq_len = get_or(s, "seq_len", d.seq_len);
    d.seed = get_or<uint64_t>(s, "seed", d.seed);
    if (d.n_train < 20 || d.n_dev < 20) {
      throw ConfigError("config: synth splits need at least 20 samples each");
    }
  } else {
    if (!j.contains("jsonl")) throw ConfigError("config: data.kind 'jsonl' needs a data.jsonl section");
    const json& s = j.at("jsonl");
    require_object(s, "data.jsonl");
    reject_unknown_keys(s, "data.jsonl", {"train", "dev", "vocab"});
    if (!s.contains("train") || !s.contains("dev")) {
      throw ConfigError("config: data.jsonl needs 'train' and 'dev' paths");
    }
    d.train_path = s.at("train").get<std::string>();
    d.dev_path = s.at("dev").get<std::string>();
    if (s.contains("vocab")) d.vocab_path = std::filesystem::path(s.at("vocab").get<std::string>());
  }
  return d;
}

TrainSection parse_train(const json& j) {
  require_object(j, "train");
  reject_unknown_keys(
      j, "train",
      {"lambda", "gamma", "cmi_sign", "cmi_mode", "epochs", "batch_size", "lr", "seed",
       "centroid_refresh", "ema_beta", "optimizer", "adam_beta1", "adam_beta2", "adam_eps",
       "sgd_backtrack", "classifier_only", "clip_kl_nats", "lambda_grid", "runs_per_config"});
  TrainSection section;
  TrainConfig& c = section.config;
  c.lambda = get_or(j, "lambda", c.lambda);
  c.gamma = get_or(j, "gamma", c.gamma);
  const std::string sign = get_or<std::string>(j, "cmi_sign", "off");
  if (sign == "min") {
    c.cmi_sign = CmiSign::min;
  } else if (sign == "max") {
    c.cmi_sign = CmiSign::max;
  } else if (sign == "off") {
    c.cmi_sign = CmiSign::off;
  } else {
    throw ConfigError("config: train.cmi_sign must be 'min', 'max' or 'off'");
  }
  const std::string mode = get_or<std::string>(j, "cmi_mode", "eq11_average");
  if (mode == "eq11_average") {
    c.cmi_mode = CmiMode::eq11_average;
  } else if (mode == "eq12_literal") {
    c.cmi_mode = CmiMode::eq12_literal;
  } else {
    throw ConfigError("config: train.cmi_mode must be 'eq11_average' or 'eq12_literal'");
  }
  c.epochs = get_or(j, "epochs", c.epochs);
  c.batch_size = get_or(j, "batch_size", c.batch_size);
  c.lr = get_or(j, "lr", c.lr);
  c.seed = get_or<uint64_t>(j, "seed", c.seed);
  const std::string refresh = get_or<std::string>(j, "centroid_refresh", "per_epoch");
  if (refresh == "per_epoch") {
    c.centroid_refresh = CentroidRefresh::per_epoch;
  } else if (refresh == "per_step_ema") {
    c.centroid_refresh = CentroidRefresh::per_step_ema;
  } else {
    throw ConfigError("config: train.centroid_refresh must be 'per_epoch' or 'per_step_ema'");
  }
  c.ema_beta = get_or(j, "ema_beta", c.ema_beta);
  const std::string opt = get_or<std::string>(j, "optimizer", "adam");
  if (opt == "adam") {
    c.optimizer = OptimizerKind::adam;
  } else if (opt == "sgd") {
    c.optimizer = OptimizerKind::sgd;
  } else {
    throw ConfigError("config: train.optimizer must be 'adam' or 'sgd'");
  }
  c.adam_beta1 = get_or(j, "adam_beta1", c.adam_beta1);
  c.adam_beta2 = get_or(j, "adam_beta2", c.adam_beta2);
  c.adam_eps = get_or(j, "adam_eps", c.adam_eps);
  c.sgd_backtrack = get_or(j, "sgd_backtrack", c.sgd_backtrack);
  c.classifier_only = get_or(j, "classifier_only", c.classifier_only);
  c.clip_kl_nats = get_or(j, "clip_kl_nats", c.clip_kl_nats);
  c.validate();
  if (j.contains("lambda_grid")) {
    for (const auto& v : j.at("lambda_grid")) section.lambda_grid.push_back(v.get<double>());
  }
  section.runs_per_config = get_or(j, "runs_per_config", section.runs_per_config);
  if (section.runs_per_config < 1) throw ConfigError("config: train.runs_per_config must be >= 1");
  return section;
}

DistillSection parse_distill(const json& j) {
  require_object(j, "distill");
  reject_unknown_keys(j, "distill",
                      {"alpha_grid", "temperature_grid", "epochs", "batch_size", "lr", "seed",
                       "runs_per_cell", "teacher"});
  DistillSection d;
  if (j.contains("alpha_grid")) {
    d.alpha_grid.clear();
    for (const auto& v : j.at("alpha_grid")) d.alpha_grid.push_back(v.get<double>());
  }
  if (j.contains("temperature_grid")) {
    d.temperature_grid.clear();
    for (const auto& v : j.at("temperature_grid")) d.temperature_grid.push_back(v.get<double>());
  }
  if (d.alpha_grid.empty() || d.temperature_grid.empty()) {
    throw ConfigError("config: distill grids must be nonempty");
  }
  for (double a : d.alpha_grid) {
    if (a < 0.05 || a > 0.9) {
      throw ConfigError("config: distill.alpha_grid values must lie in [0.05, 0.9]");
    }
  }
  for (double t : d.temperature_grid) {
    if (t < 1 || t > 5) {
      throw ConfigError("config: distill.temperature_grid values must lie in [1, 5]");
    }
  }
  d.options.epochs = get_or(j, "epochs", d.options.epochs);
  d.options.batch_size = get_or(j, "batch_size", d.options.batch_size);
  d.options.lr = get_or(j, "lr", d.options.lr);
  d.options.seed = get_or<uint64_t>(j, "seed", d.options.seed);
  d.options.runs_per_cell = get_or(j, "runs_per_cell", d.options.runs_per_cell);
  if (d.options.epochs < 1 || d.options.batch_size < 1 || d.options.lr <= 0 ||
      d.options.runs_per_cell < 1) {
    throw ConfigError("config: invalid distill options");
  }
  if (j.contains("teacher")) {
    const json& t = j.at("teacher");
    require_object(t, "distill.teacher");
    reject_unknown_keys(t, "distill.teacher", {"checkpoint", "sweep_summary"});
    if (t.contains("checkpoint")) d.teacher.checkpoint = std::filesystem::path(t.at("checkpoint").get<std::string>());
    if (t.contains("sweep_summary")) {
      d.teacher.sweep_summary = std::filesystem::path(t.at("sweep_summary").get<std::string>());
    }
    if (d.teacher.checkpoint && d.teacher.sweep_summary) {
      throw ConfigError("config: distill.teacher must name either a checkpoint or a sweep_summary");
    }
  }
  return d;
}

}  // namespace

RunConfigFile parse_config_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config: top level must be a JSON object");
  reject_unknown_keys(doc, "<top>", {"model", "data", "train", "distill", "output"});
  RunConfigFile cfg;
  cfg.raw = doc;
  if (doc.contains("model")) cfg.model = parse_model(doc.at("model"));
  if (doc.contains("data")) cfg.data = parse_data(doc.at("data"));
  if (doc.contains("train")) cfg.train = parse_train(doc.at("train"));
  if (doc.contains("distill")) cfg.distill = parse_distill(doc.at("distill"));
  if (doc.contains("output")) {
    const json& o = doc.at("output");
    require_object(o, "output");
    reject_unknown_keys(o, "output", {"dir"});
    if (o.contains("dir")) cfg.output_dir = std::filesystem::path(o.at("dir").get<std::string>());
  }
  return cfg;
}

RunConfigFile load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ConfigError("config: invalid JSON in " + path.string() + ": " + e.what());
  }
  return parse_config_json(doc);
}

uint64_t json_fingerprint(const json& doc) {
  const std::string canonical = doc.dump();  // object keys already sorted
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : canonical) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

BuiltData build_data(const DataConfig& data, const ModelConfig& model) {
  BuiltData out;
  if (data.kind == DataKind::synth) {
    SynthSpec spec;
    spec.task = data.task;
    spec.seq_len = data.seq_len;
    spec.vocab_size = model.vocab_size;
    spec.n_samples = data.n_train;
    spec.seed = data.seed;
    out.train = synth_task(spec, "train");
    spec.n_samples = data.n_dev;
    spec.seed = data.seed + 1;
    out.dev = synth_task(spec, "dev");
    if (data.seq_len > model.context_len) {
      throw ConfigError("config: synth seq_len exceeds the model context length");
    }
  } else {
    Vocab vocab;
    if (data.vocab_path) {
      vocab = load_vocab(*data.vocab_path);
    } else {
      // deterministic fallback: byte-level BPE over the train texts
      std::ifstream in(data.train_path);
      if (!in) throw DataError("config: cannot open " + data.train_path.string());
      std::string corpus;
      std::string line;
      while (std::getline(in, line)) {
        try {
          json j = json::parse(line.empty() ? "{}" : line);
          if (j.contains("text")) {
            corpus += j.at("text").get<std::string>();
            corpus += '\n';
          }
        } catch (const json::exception&) {
          // load_jsonl will report the malformed line with its number
        }
      }
      if (corpus.empty()) throw DataError("config: no text found in " + data.train_path.string());
      vocab = train_bpe(corpus, model.vocab_size);
    }
    if (vocab.size() > model.vocab_size) {
      throw ConfigError("config: vocabulary size " + std::to_string(vocab.size()) +
                        " exceeds model vocab_size " + std::to_string(model.vocab_size));
    }
    out.train = load_jsonl(data.train_path, vocab, model.context_len, "train");
    out.dev = load_jsonl(data.dev_path, vocab, model.context_len, "dev");
    out.vocab = std::move(vocab);
  }
  if (out.train.num_classes != model.num_classes) {
    throw ConfigError("config: dataset has " + std::to_string(out.train.num_classes) +
                      " classes but model.num_classes is " + std::to_string(model.num_classes));
  }
  for (const Sample& s : out.dev.samples) {
    if (s.label >= out.train.num_classes) {
      throw DataError("config: dev split has label " + std::to_string(s.label) +
                      " outside the train split's " + std::to_string(out.train.num_classes) +
                      " classes");
    }
  }
  if (data.metric != Metric::accuracy && out.train.num_classes != 2) {
    throw ConfigError("config: f1/mcc metrics require a binary task");
  }
  return out;
}

}  // namespace cmitune
