#include "cmitune/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian float64");

namespace cmitune {

using nlohmann::json;

namespace {

json config_to_json(const ModelConfig& c) {
  return json{{"vocab_size", c.vocab_size},
              {"embed_dim", c.embed_dim},
              {"context_len", c.context_len},
              {"num_layers", c.num_layers},
              {"num_heads", c.num_heads},
              {"ffn_mult", c.ffn_mult},
              {"num_classes", c.num_classes},
              {"pooling", c.pooling == Pooling::first_special ? "first_special" : "last_token"},
              {"cls_token_id", c.cls_token_id}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.context_len = j.at("context_len").get<int>();
  c.num_layers = j.at("num_layers").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.ffn_mult = j.at("ffn_mult").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  const std::string pooling = j.at("pooling").get<std::string>();
  if (pooling == "first_special") {
    c.pooling = Pooling::first_special;
  } else if (pooling == "last_token") {
    c.pooling = Pooling::last_token;
  } else {
    throw ConfigError("checkpoint: unknown pooling '" + pooling + "'");
  }
  c.cls_token_id = j.at("cls_token_id").get<int>();
  return c;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  const auto named = params.named_params();
  json manifest = json::array();
  int64_t offset = 0;
  for (const auto& [name, tensor] : named) {
    json shape = json::array();
    for (int64_t d : tensor.shape()) shape.push_back(d);
    manifest.push_back(json{{"name", name}, {"shape", shape}, {"offset", offset}});
    offset += tensor.size();
  }
  json header{{"version", 1}, {"config", config_to_json(params.config)}, {"manifest", manifest}};

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("save_checkpoint: cannot open " + path.string());
  out << header.dump() << "\n";
  for (const auto& [name, tensor] : named) {
    const auto data = tensor.data();
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!out) throw DataError("save_checkpoint: write failed for " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("load_checkpoint: cannot open " + path.string());
  std::string header_line;
  if (!std::getline(in, header_line)) throw DataError("load_checkpoint: missing header line");
  json header;
  try {
    header = json::parse(header_line);
  } catch (const json::exception& e) {
    throw DataError("load_checkpoint: invalid header: " + std::string(e.what()));
  }
  if (header.at("version").get<int>() != 1) throw DataError("load_checkpoint: unsupported version");

  ModelParams params = ModelParams::init(config_from_json(header.at("config")), 0);
  auto named = params.named_params();
  const json& manifest = header.at("manifest");
  if (manifest.size() != named.size()) {
    throw ConfigError("load_checkpoint: manifest has " + std::to_string(manifest.size()) +
                      " arrays, expected " + std::to_string(named.size()));
  }
  const std::streamoff payload_start = in.tellg();
  for (size_t i = 0; i < named.size(); ++i) {
    const json& entry = manifest[i];
    auto& [name, tensor] = named[i];
    if (entry.at("name").get<std::string>() != name) {
      throw ConfigError("load_checkpoint: manifest entry '" + entry.at("name").get<std::string>() +
                        "' does not match expected '" + name + "'");
    }
    Shape shape;
    for (const auto& d : entry.at("shape")) shape.push_back(d.get<int64_t>());
    if (shape != tensor.shape()) {
      throw ConfigError("load_checkpoint: shape mismatch for '" + name + "': file " + shape_str(shape) +
                        " vs config " + shape_str(tensor.shape()));
    }
    const int64_t offset = entry.at("offset").get<int64_t>();
    in.seekg(payload_start + static_cast<std::streamoff>(offset) * static_cast<std::streamoff>(sizeof(double)));
    auto dst = tensor.mutable_data();
    in.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size() * sizeof(double)));
    if (!in) throw DataError("load_checkpoint: truncated payload for '" + name + "'");
  }
  return params;
}

}  // namespace cmitune
