#include "cmitune/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

namespace cmitune {

namespace {

std::string hex_escape(std::string_view bytes) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (unsigned char c : bytes) {
    out.push_back(digits[c >> 4]);
    out.push_back(digits[c & 0xf]);
  }
  return out;
}

int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return 10 + (c - 'a');
  if (c >= 'A' && c <= 'F') return 10 + (c - 'A');
  return -1;
}

std::string hex_unescape(std::string_view hex, const std::string& context) {
  if (hex.size() % 2 != 0) throw DataError("vocab file: odd-length hex string in " + context);
  std::string out;
  out.reserve(hex.size() / 2);
  for (size_t i = 0; i < hex.size(); i += 2) {
    const int hi = hex_value(hex[i]);
    const int lo = hex_value(hex[i + 1]);
    if (hi < 0 || lo < 0) throw DataError("vocab file: invalid hex digit in " + context);
    out.push_back(static_cast<char>((hi << 4) | lo));
  }
  return out;
}

// Applies one merge rule left-to-right over a token sequence.
void apply_merge(std::vector<int>& seq, int left, int right, int merged) {
  size_t w = 0;
  for (size_t r = 0; r < seq.size();) {
    if (r + 1 < seq.size() && seq[r] == left && seq[r + 1] == right) {
      seq[w++] = merged;
      r += 2;
    } else {
      seq[w++] = seq[r++];
    }
  }
  seq.resize(w);
}

}  // namespace

Vocab train_bpe(std::string_view corpus, int target_size) {
  if (corpus.empty()) throw InputError("train_bpe: empty corpus");

  Vocab vocab;
  vocab.byte_to_id.fill(-1);
  vocab.tokens.assign(Vocab::kNumSpecials, std::string());

  bool present[256] = {};
  for (unsigned char c : corpus) present[c] = true;
  int distinct = 0;
  for (int b = 0; b < 256; ++b) {
    if (present[b]) {
      vocab.byte_to_id[static_cast<size_t>(b)] = vocab.size();
      vocab.tokens.push_back(std::string(1, static_cast<char>(b)));
      ++distinct;
    }
  }
  if (target_size < Vocab::kNumSpecials + distinct) {
    throw InputError("train_bpe: target_size " + std::to_string(target_size) +
                     " below specials + " + std::to_string(distinct) + " base symbols");
  }

  std::vector<int> seq;
  seq.reserve(corpus.size());
  for (unsigned char c : corpus) seq.push_back(vocab.byte_to_id[c]);

  while (vocab.size() < target_size && seq.size() >= 2) {
    // Count adjacent pairs. std::map keeps candidates ordered by id pair,
    // but the tie-break contract is on byte strings, so resolve explicitly.
    std::map<std::pair<int, int>, int64_t> counts;
    for (size_t i = 0; i + 1 < seq.size(); ++i) ++counts[{seq[i], seq[i + 1]}];
    if (counts.empty()) break;

    std::pair<int, int> best{-1, -1};
    int64_t best_count = 0;
    for (const auto& [pair, count] : counts) {
      if (count > best_count) {
        best = pair;
        best_count = count;
      } else if (count == best_count) {
        const auto key = std::make_pair(std::string_view(vocab.tokens[static_cast<size_t>(pair.first)]),
                                        std::string_view(vocab.tokens[static_cast<size_t>(pair.second)]));
        const auto cur = std::make_pair(std::string_view(vocab.tokens[static_cast<size_t>(best.first)]),
                                        std::string_view(vocab.tokens[static_cast<size_t>(best.second)]));
        if (key < cur) best = pair;
      }
    }

    const int merged = vocab.size();
    vocab.tokens.push_back(vocab.tokens[static_cast<size_t>(best.first)] +
                           vocab.tokens[static_cast<size_t>(best.second)]);
    vocab.merges.push_back(best);
    apply_merge(seq, best.first, best.second, merged);
  }
  return vocab;
}

std::vector<int> encode(std::string_view text, const Vocab& vocab, bool add_specials) {
  std::vector<int> seq;
  seq.reserve(text.size() + 2);
  for (unsigned char c : text) {
    const int id = vocab.byte_to_id[c];
    seq.push_back(id >= 0 ? id : Vocab::kUnk);
  }
  const int first_merged_id = vocab.size() - static_cast<int>(vocab.merges.size());
  for (size_t m = 0; m < vocab.merges.size(); ++m) {
    const auto [left, right] = vocab.merges[m];
    apply_merge(seq, left, right, first_merged_id + static_cast<int>(m));
  }
  if (add_specials) {
    seq.insert(seq.begin(), Vocab::kStart);
    seq.push_back(Vocab::kCls);
  }
  return seq;
}

std::string decode(std::span<const int> ids, const Vocab& vocab) {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= vocab.size()) {
      throw InputError("decode: token id " + std::to_string(id) + " out of range for vocabulary of " +
                       std::to_string(vocab.size()));
    }
    if (!vocab.is_special(id)) out += vocab.tokens[static_cast<size_t>(id)];
  }
  return out;
}

void save_vocab(const Vocab& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("save_vocab: cannot open " + path.string());
  out << 1 << "\n" << vocab.size() << "\n";
  const int base_count = vocab.size() - Vocab::kNumSpecials - static_cast<int>(vocab.merges.size());
  for (int i = 0; i < base_count; ++i) {
    out << hex_escape(vocab.tokens[static_cast<size_t>(Vocab::kNumSpecials + i)]) << "\n";
  }
  for (const auto& [left, right] : vocab.merges) {
    out << hex_escape(vocab.tokens[static_cast<size_t>(left)]) << "\t"
        << hex_escape(vocab.tokens[static_cast<size_t>(right)]) << "\n";
  }
  if (!out) throw DataError("save_vocab: write failed for " + path.string());
}

Vocab load_vocab(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("load_vocab: cannot open " + path.string());
  std::string line;
  auto next_line = [&](const char* what) {
    if (!std::getline(in, line)) throw DataError(std::string("load_vocab: missing ") + what);
    return line;
  };
  int version = 0;
  {
    std::istringstream s(next_line("version line"));
    if (!(s >> version) || version != 1) throw DataError("load_vocab: unsupported version");
  }
  int size = 0;
  {
    std::istringstream s(next_line("size line"));
    if (!(s >> size) || size < Vocab::kNumSpecials) throw DataError("load_vocab: invalid vocabulary size");
  }

  Vocab vocab;
  vocab.byte_to_id.fill(-1);
  vocab.tokens.assign(Vocab::kNumSpecials, std::string());
  // First matching id wins when two tokens carry identical bytes.
  std::unordered_map<std::string, int> first_id;

  int line_no = 2;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      const std::string bytes = hex_unescape(line, "line " + std::to_string(line_no));
      if (bytes.size() != 1) throw DataError("load_vocab: base token must be a single byte, line " +
                                             std::to_string(line_no));
      vocab.byte_to_id[static_cast<unsigned char>(bytes[0])] = vocab.size();
      first_id.emplace(bytes, vocab.size());
      vocab.tokens.push_back(bytes);
    } else {
      const std::string left = hex_unescape(std::string_view(line).substr(0, tab),
                                            "line " + std::to_string(line_no));
      const std::string right = hex_unescape(std::string_view(line).substr(tab + 1),
                                             "line " + std::to_string(line_no));
      const auto li = first_id.find(left);
      const auto ri = first_id.find(right);
      if (li == first_id.end() || ri == first_id.end()) {
        throw DataError("load_vocab: merge references unknown token, line " + std::to_string(line_no));
      }
      vocab.merges.emplace_back(li->second, ri->second);
      const std::string merged = left + right;
      first_id.emplace(merged, vocab.size());
      vocab.tokens.push_back(merged);
    }
  }
  if (vocab.size() != size) {
    throw DataError("load_vocab: token count " + std::to_string(vocab.size()) +
                    " does not match declared size " + std::to_string(size));
  }
  return vocab;
}

}  // namespace cmitune
