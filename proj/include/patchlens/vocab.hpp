#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "patchlens/errors.hpp"

namespace patchlens {

constexpr int kNumByteTokens = 256;

// Byte-fallback spelling used in vocab files: "<0x00>" .. "<0xFF>".
inline std::string byte_token_spelling(int byte) {
  static const char* hex = "0123456789ABCDEF";
  std::string s = "<0x00>";
  s[3] = hex[(byte >> 4) & 0xF];
  s[4] = hex[byte & 0xF];
  return s;
}

struct TokenSpanChars {
  int64_t start = 0;  // byte offset into the source string
  int64_t end = 0;    // exclusive
};

struct TokenizeResult {
  std::vector<int64_t> ids;
  std::vector<TokenSpanChars> spans;  // one per id, covers the source exactly
};

// Greedy longest-match tokenizer with byte fallback. Ids 0..255 are reserved
// for raw bytes; learned tokens start at id 256. Round-trips any byte string.
class Vocab {
 public:
  Vocab() = default;

  explicit Vocab(const std::vector<std::string>& learned_tokens) {
    for (const auto& t : learned_tokens) add_token(t);
  }

  int64_t size() const { return kNumByteTokens + static_cast<int64_t>(learned_.size()); }

  int64_t add_token(const std::string& tok) {
    if (tok.empty()) throw ConfigError("Vocab: empty token");
    if (tok.find('\n') != std::string::npos || tok.find('\r') != std::string::npos)
      throw ConfigError("Vocab: token may not contain newline bytes");
    if (tok.size() == 6 && tok[0] == '<' && tok[1] == '0' && tok[2] == 'x' && tok[5] == '>')
      throw ConfigError("Vocab: token '" + tok + "' collides with byte-fallback spelling");
    if (ids_.count(tok)) throw ConfigError("Vocab: duplicate token '" + tok + "'");
    const int64_t id = size();
    learned_.push_back(tok);
    ids_.emplace(tok, id);
    if (static_cast<int64_t>(tok.size()) > max_len_) max_len_ = static_cast<int64_t>(tok.size());
    return id;
  }

  bool contains(std::string_view tok) const { return ids_.count(std::string(tok)) > 0; }

  // Throws if the token is unknown. Single bytes resolve to their fallback id.
  int64_t id_of(std::string_view tok) const {
    auto it = ids_.find(std::string(tok));
    if (it != ids_.end()) return it->second;
    if (tok.size() == 1) return static_cast<unsigned char>(tok[0]);
    throw ConfigError("Vocab: unknown token '" + std::string(tok) + "'");
  }

  std::string token(int64_t id) const {
    if (id < 0 || id >= size()) throw ConfigError("Vocab: id " + std::to_string(id) + " out of range");
    if (id < kNumByteTokens) return std::string(1, static_cast<char>(static_cast<unsigned char>(id)));
    return learned_[static_cast<size_t>(id - kNumByteTokens)];
  }

  // Printable spelling (byte ids rendered as <0xNN>) for reports and files.
  std::string spelling(int64_t id) const {
    if (id >= 0 && id < kNumByteTokens) return byte_token_spelling(static_cast<int>(id));
    return token(id);
  }

  TokenizeResult tokenize(std::string_view text) const {
    TokenizeResult out;
    int64_t pos = 0;
    const int64_t n = static_cast<int64_t>(text.size());
    while (pos < n) {
      int64_t best_id = -1;
      int64_t best_len = 0;
      const int64_t limit = std::min<int64_t>(max_len_, n - pos);
      for (int64_t len = limit; len >= 1; --len) {
        auto it = ids_.find(std::string(text.substr(static_cast<size_t>(pos), static_cast<size_t>(len))));
        if (it != ids_.end()) {
          best_id = it->second;
          best_len = len;
          break;
        }
      }
      if (best_id < 0) {  // unmatched byte -> fallback
        best_id = static_cast<unsigned char>(text[static_cast<size_t>(pos)]);
        best_len = 1;
      }
      out.ids.push_back(best_id);
      out.spans.push_back({pos, pos + best_len});
      pos += best_len;
    }
    return out;
  }

  std::string detokenize(const std::vector<int64_t>& ids) const {
    std::string s;
    for (int64_t id : ids) s += token(id);
    return s;
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("Vocab: cannot open '" + path + "' for writing");
    for (int b = 0; b < kNumByteTokens; ++b) f << byte_token_spelling(b) << '\n';
    for (const auto& t : learned_) f << t << '\n';
    if (!f) throw ConfigError("Vocab: write failed for '" + path + "'");
  }

  static Vocab load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw LoadError("Vocab: cannot open '" + path + "'");
    Vocab v;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(f, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (lineno < kNumByteTokens) {
        if (line != byte_token_spelling(static_cast<int>(lineno)))
          throw LoadError("Vocab: line " + std::to_string(lineno) +
                          " must be the byte-fallback entry " +
                          byte_token_spelling(static_cast<int>(lineno)) + ", got '" + line + "'");
      } else {
        v.add_token(line);
      }
      ++lineno;
    }
    if (lineno < kNumByteTokens)
      throw LoadError("Vocab: file '" + path + "' has only " + std::to_string(lineno) +
                      " lines; first 256 must be byte-fallback entries");
    return v;
  }

 private:
  std::vector<std::string> learned_;             // id-256 -> token text
  std::unordered_map<std::string, int64_t> ids_; // learned tokens only
  int64_t max_len_ = 1;
};

}  // namespace patchlens
