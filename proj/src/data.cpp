#include "cmitune/data.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "cmitune/tensor.hpp"

namespace cmitune {

using nlohmann::json;

void LabeledDataset::rebuild_index() {
  by_label.assign(static_cast<size_t>(num_classes), {});
  for (size_t i = 0; i < samples.size(); ++i) {
    by_label[static_cast<size_t>(samples[i].label)].push_back(static_cast<int64_t>(i));
  }
}

uint64_t LabeledDataset::fingerprint() const {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](uint64_t x) {
    for (int i = 0; i < 8; ++i) {
      h ^= (x >> (8 * i)) & 0xff;
      h *= 1099511628211ull;
    }
  };
  mix(static_cast<uint64_t>(num_classes));
  for (const Sample& s : samples) {
    mix(static_cast<uint64_t>(s.label));
    mix(static_cast<uint64_t>(s.tokens.size()));
    for (int t : s.tokens) mix(static_cast<uint64_t>(t));
  }
  return h;
}

LabeledDataset load_jsonl(const std::filesystem::path& path, const Vocab& vocab, int max_len,
                          const std::string& split) {
  std::ifstream in(path);
  if (!in) throw DataError("load_jsonl: cannot open " + path.string());
  if (max_len < 2) throw ConfigError("load_jsonl: max_len must be >= 2");

  LabeledDataset ds;
  ds.split = split;
  std::string line;
  int line_no = 0;
  int max_label = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError("load_jsonl: parse error at line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("text") || !j.contains("label") || !j["text"].is_string() ||
        !j["label"].is_number_integer()) {
      throw DataError("load_jsonl: line " + std::to_string(line_no) +
                      " must be {\"text\": string, \"label\": integer}");
    }
    const int label = j["label"].get<int>();
    if (label < 0) throw DataError("load_jsonl: negative label at line " + std::to_string(line_no));
    max_label = std::max(max_label, label);

    Sample s;
    s.id = static_cast<int64_t>(ds.samples.size());
    s.label = label;
    s.tokens = encode(j["text"].get<std::string>(), vocab, true);
    if (static_cast<int>(s.tokens.size()) > max_len) {
      // keep the tail so the trailing CLS survives
      s.tokens.erase(s.tokens.begin(), s.tokens.end() - max_len);
    }
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw DataError("load_jsonl: " + path.string() + " holds no samples (no classes)");
  ds.num_classes = max_label + 1;
  ds.rebuild_index();
  if (split == "train") {
    for (int y = 0; y < ds.num_classes; ++y) {
      if (ds.by_label[static_cast<size_t>(y)].empty()) {
        throw DataError("load_jsonl: labels are not dense, class " + std::to_string(y) +
                        " is empty in the train split");
      }
    }
  }
  return ds;
}

namespace {

constexpr int kTokenA = 4;  // first two non-special ids are the designated tokens
constexpr int kTokenB = 5;

int noise_token(std::mt19937_64& rng, int vocab_size) {
  // any non-special token except the two designated ones
  const int range = vocab_size - 6;
  return 6 + static_cast<int>(rng() % static_cast<uint64_t>(range));
}

std::vector<int> wrap_specials(std::vector<int> payload) {
  std::vector<int> out;
  out.reserve(payload.size() + 2);
  out.push_back(Vocab::kStart);
  out.insert(out.end(), payload.begin(), payload.end());
  out.push_back(Vocab::kCls);
  return out;
}

}  // namespace

SynthTask synth_task_from_name(const std::string& name) {
  if (name == "majority_token") return SynthTask::majority_token;
  if (name == "contains_pattern") return SynthTask::contains_pattern;
  if (name == "parity_of_token") return SynthTask::parity_of_token;
  throw ConfigError("unknown synthetic task '" + name + "'");
}

std::string synth_task_name(SynthTask task) {
  switch (task) {
    case SynthTask::majority_token: return "majority_token";
    case SynthTask::contains_pattern: return "contains_pattern";
    case SynthTask::parity_of_token: return "parity_of_token";
  }
  return "?";
}

LabeledDataset synth_task(const SynthSpec& spec, const std::string& split) {
  constexpr int kClasses = 2;
  if (spec.n_samples < 10 * kClasses) {
    throw ConfigError("synth_task: n_samples must be >= " + std::to_string(10 * kClasses));
  }
  if (spec.vocab_size < 7) {
    throw ConfigError("synth_task: vocabulary too small for task " + synth_task_name(spec.task) +
                      " (need >= 7 ids)");
  }
  const int payload = spec.seq_len - 2;
  if (payload < 3) throw ConfigError("synth_task: seq_len must be >= 5");

  std::mt19937_64 rng(derive_seed(spec.seed, "synth", static_cast<uint64_t>(spec.task)));
  LabeledDataset ds;
  ds.split = split;
  ds.num_classes = kClasses;

  for (int i = 0; i < spec.n_samples; ++i) {
    const int target = i % 2;  // balanced within +-1 by construction
    std::vector<int> tokens(static_cast<size_t>(payload));
    switch (spec.task) {
      case SynthTask::majority_token: {
        // label 0: token A strictly outnumbers B; label 1: the reverse.
        int na = static_cast<int>(rng() % static_cast<uint64_t>(payload + 1));
        int nb = static_cast<int>(rng() % static_cast<uint64_t>(payload + 1 - na));
        while (na == nb) {
          na = static_cast<int>(rng() % static_cast<uint64_t>(payload + 1));
          nb = static_cast<int>(rng() % static_cast<uint64_t>(payload + 1 - na));
        }
        if ((na > nb) != (target == 0)) std::swap(na, nb);
        size_t w = 0;
        for (int j = 0; j < na; ++j) tokens[w++] = kTokenA;
        for (int j = 0; j < nb; ++j) tokens[w++] = kTokenB;
        while (w < tokens.size()) tokens[w++] = noise_token(rng, spec.vocab_size);
        break;
      }
      case SynthTask::contains_pattern: {
        // label 1: the bigram (A, B) occurs somewhere; label 0: it never does.
        for (size_t j = 0; j < tokens.size(); ++j) tokens[j] = noise_token(rng, spec.vocab_size);
        if (target == 1) {
          const size_t pos = rng() % (tokens.size() - 1);
          tokens[pos] = kTokenA;
          tokens[pos + 1] = kTokenB;
        } else {
          // sprinkle As and Bs but never adjacent in that order
          for (size_t j = 0; j < tokens.size(); ++j) {
            const uint64_t roll = rng() % 4;
            if (roll == 0) tokens[j] = kTokenA;
            if (roll == 1) tokens[j] = kTokenB;
          }
          for (size_t j = 0; j + 1 < tokens.size(); ++j) {
            if (tokens[j] == kTokenA && tokens[j + 1] == kTokenB) {
              tokens[j + 1] = noise_token(rng, spec.vocab_size);
            }
          }
        }
        break;
      }
      case SynthTask::parity_of_token: {
        // label = count of token A mod 2
        int na = static_cast<int>(rng() % static_cast<uint64_t>(payload + 1));
        if (na % 2 != target) na = na > 0 ? na - 1 : na + 1;
        size_t w = 0;
        for (int j = 0; j < na; ++j) tokens[w++] = kTokenA;
        while (w < tokens.size()) tokens[w++] = noise_token(rng, spec.vocab_size);
        break;
      }
    }
    if (spec.task != SynthTask::contains_pattern) {
      // shuffle positions; counts (and hence the label rule) are unaffected
      for (size_t n = tokens.size(); n > 1; --n) {
        const size_t j = static_cast<size_t>(rng() % n);
        std::swap(tokens[n - 1], tokens[j]);
      }
    }
    Sample s;
    s.id = static_cast<int64_t>(i);
    s.label = target;
    s.tokens = wrap_specials(std::move(tokens));
    ds.samples.push_back(std::move(s));
  }
  ds.rebuild_index();
  return ds;
}

}  // namespace cmitune
