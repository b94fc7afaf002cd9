#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cmitune/errors.hpp"

namespace cmitune {

// Byte-level BPE vocabulary. Ids are dense: 0..3 are the special tokens,
// then the distinct corpus bytes in ascending order, then one id per merge
// in training order.
struct Vocab {
  static constexpr int kStart = 0;
  static constexpr int kCls = 1;
  static constexpr int kPad = 2;
  static constexpr int kUnk = 3;
  static constexpr int kNumSpecials = 4;

  std::vector<std::string> tokens;              // byte sequence per id; specials are empty
  std::vector<std::pair<int, int>> merges;      // (left id, right id) in training order
  std::array<int, 256> byte_to_id{};            // -1 when the byte is not in the base alphabet

  int size() const { return static_cast<int>(tokens.size()); }
  bool is_special(int id) const { return id >= 0 && id < kNumSpecials; }
};

// Greedy BPE training: repeatedly merge the most frequent adjacent pair,
// breaking frequency ties by the lexicographically smaller (left bytes,
// right bytes) pair. Stops when the vocabulary reaches target_size or no
// adjacent pair remains.
Vocab train_bpe(std::string_view corpus, int target_size);

// Applies the merges in training order. Bytes outside the base alphabet
// become UNK. With add_specials the result is [START, ..., CLS].
std::vector<int> encode(std::string_view text, const Vocab& vocab, bool add_specials);

// Concatenates token byte sequences; special tokens are dropped.
std::string decode(std::span<const int> ids, const Vocab& vocab);

// Text format: line 1 version, line 2 |V|, then one line per base token
// (a single hex-escaped byte) and one line per merge (two hex-escaped byte
// strings separated by a tab), both in id order. Round-trips bit-exactly.
void save_vocab(const Vocab& vocab, const std::filesystem::path& path);
Vocab load_vocab(const std::filesystem::path& path);

}  // namespace cmitune
