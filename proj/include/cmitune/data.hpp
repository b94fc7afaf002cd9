#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cmitune/tokenizer.hpp"

namespace cmitune {

struct Sample {
  std::vector<int> tokens;
  int label = 0;
  int64_t id = 0;
};

struct LabeledDataset {
  std::vector<Sample> samples;
  int num_classes = 0;
  std::string split;                           // "train" or "dev"
  std::vector<std::vector<int64_t>> by_label;  // sample indices per label

  void rebuild_index();
  // Content hash over labels and token ids; recorded in run reports.
  uint64_t fingerprint() const;
};

// Lines of {"text": ..., "label": ...}. Texts are encoded with specials and
// truncated to max_len keeping the tail (so the trailing CLS survives).
// Labels must be dense from 0; the train split must populate every class.
LabeledDataset load_jsonl(const std::filesystem::path& path, const Vocab& vocab, int max_len,
                          const std::string& split);

enum class SynthTask { majority_token, contains_pattern, parity_of_token };

struct SynthSpec {
  SynthTask task = SynthTask::majority_token;
  int n_samples = 0;
  int seq_len = 16;  // includes the START/CLS wrapper
  uint64_t seed = 0;
  int vocab_size = 64;
};

// Deterministic label rule, balanced classes within +-1, token ids drawn
// from [4, vocab_size). Sequences are wrapped as [START, payload..., CLS].
LabeledDataset synth_task(const SynthSpec& spec, const std::string& split);

SynthTask synth_task_from_name(const std::string& name);
std::string synth_task_name(SynthTask task);

}  // namespace cmitune
