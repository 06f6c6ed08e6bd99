#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "neurolens/error.hpp"

namespace neurolens {

using TokenId = std::uint32_t;

struct TokenSequence {
  std::vector<TokenId> ids;
  std::string source_text;
};

/// Fixed vocabulary: three specials, 256 byte-fallback tokens and word tokens.
/// Byte tokens are spelled "<0xNN>" in the vocab file and detokenize to the raw byte.
class Vocab {
 public:
  static constexpr std::string_view kPad = "<pad>";
  static constexpr std::string_view kBos = "<bos>";
  static constexpr std::string_view kEos = "<eos>";

  Vocab() = default;

  /// Builds the canonical layout: <pad>, <bos>, <eos>, <0x00>..<0xFF>, then words in order.
  static Vocab from_words(const std::vector<std::string>& words) {
    std::vector<std::string> table;
    table.reserve(3 + 256 + words.size());
    table.emplace_back(kPad);
    table.emplace_back(kBos);
    table.emplace_back(kEos);
    for (int b = 0; b < 256; ++b) table.push_back(byte_token_name(static_cast<unsigned char>(b)));
    for (const auto& w : words) table.push_back(w);
    return Vocab(std::move(table));
  }

  explicit Vocab(std::vector<std::string> table) : tokens_(std::move(table)) { index(); }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  TokenId pad() const noexcept { return pad_; }
  TokenId bos() const noexcept { return bos_; }
  TokenId eos() const noexcept { return eos_; }
  TokenId byte_id(unsigned char b) const noexcept { return byte_ids_[b]; }

  bool is_special(TokenId id) const noexcept { return id == pad_ || id == bos_ || id == eos_; }
  bool is_byte(TokenId id) const noexcept { return id < byte_of_.size() && byte_of_[id] >= 0; }

  /// Id of a word token, or -1.
  std::int64_t find(std::string_view word) const {
    auto it = words_.find(std::string(word));
    return it == words_.end() ? -1 : static_cast<std::int64_t>(it->second);
  }

  /// Greedy longest match over word tokens with byte fallback. Never fails.
  TokenSequence tokenize(std::string_view text) const {
    TokenSequence seq;
    seq.source_text = std::string(text);
    std::size_t i = 0;
    while (i < text.size()) {
      const std::size_t max_len = std::min(max_word_len_, text.size() - i);
      bool matched = false;
      for (std::size_t len = max_len; len >= 1; --len) {
        auto it = words_.find(std::string(text.substr(i, len)));
        if (it != words_.end()) {
          seq.ids.push_back(it->second);
          i += len;
          matched = true;
          break;
        }
      }
      if (!matched) {
        seq.ids.push_back(byte_ids_[static_cast<unsigned char>(text[i])]);
        ++i;
      }
    }
    return seq;
  }

  /// Concatenates token strings; specials render as nothing, byte tokens as their byte.
  std::string detokenize(const std::vector<TokenId>& ids) const {
    std::string out;
    for (TokenId id : ids) {
      if (id >= tokens_.size()) fail(ErrorCode::SchemaError, "token id " + std::to_string(id) + " out of range");
      if (is_special(id)) continue;
      if (is_byte(id)) {
        out.push_back(static_cast<char>(byte_of_[id]));
      } else {
        out += tokens_[id];
      }
    }
    return out;
  }

  /// Display form of a token for reports (byte tokens keep their "<0xNN>" spelling).
  const std::string& display(TokenId id) const { return tokens_.at(id); }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail(ErrorCode::IoError, "cannot write vocab file " + path);
    for (std::size_t id = 0; id < tokens_.size(); ++id) os << id << '\t' << escape(tokens_[id]) << '\n';
  }

  static Vocab load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(ErrorCode::IoError, "cannot read vocab file " + path);
    std::vector<std::string> table;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) {
        fail(ErrorCode::SchemaError, path + ":" + std::to_string(lineno) + ": expected id<TAB>token");
      }
      std::size_t id = 0;
      try {
        id = std::stoul(line.substr(0, tab));
      } catch (const std::exception&) {
        fail(ErrorCode::SchemaError, path + ":" + std::to_string(lineno) + ": bad token id");
      }
      if (id != table.size()) {
        fail(ErrorCode::SchemaError, path + ":" + std::to_string(lineno) + ": ids must be dense and ascending");
      }
      table.push_back(unescape(line.substr(tab + 1)));
    }
    return Vocab(std::move(table));
  }

  static std::string byte_token_name(unsigned char b) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "<0x%02X>", b);
    return buf;
  }

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  void index() {
    std::unordered_map<std::string, TokenId> seen;
    byte_of_.assign(tokens_.size(), -1);
    byte_ids_.fill(0);
    std::array<bool, 256> have_byte{};
    bool have_pad = false, have_bos = false, have_eos = false;
    for (TokenId id = 0; id < tokens_.size(); ++id) {
      const std::string& t = tokens_[id];
      if (t.empty()) fail(ErrorCode::SchemaError, "empty token string at id " + std::to_string(id));
      if (!seen.emplace(t, id).second) fail(ErrorCode::SchemaError, "duplicate token string '" + t + "'");
      if (t == kPad) {
        pad_ = id;
        have_pad = true;
      } else if (t == kBos) {
        bos_ = id;
        have_bos = true;
      } else if (t == kEos) {
        eos_ = id;
        have_eos = true;
      } else if (const int b = parse_byte_token(t); b >= 0) {
        byte_of_[id] = b;
        byte_ids_[b] = id;
        have_byte[b] = true;
      } else {
        words_.emplace(t, id);
        max_word_len_ = std::max(max_word_len_, t.size());
      }
    }
    if (!have_pad || !have_bos || !have_eos) fail(ErrorCode::SchemaError, "vocab lacks <pad>/<bos>/<eos>");
    for (int b = 0; b < 256; ++b) {
      if (!have_byte[b]) fail(ErrorCode::SchemaError, "vocab lacks byte token " + byte_token_name(b));
    }
  }

  static int parse_byte_token(const std::string& t) {
    if (t.size() != 6 || t.compare(0, 3, "<0x") != 0 || t[5] != '>') return -1;
    auto hexval = [](char c) -> int {
      if (c >= '0' && c <= '9') return c - '0';
      if (c >= 'A' && c <= 'F') return c - 'A' + 10;
      return -1;
    };
    const int hi = hexval(t[3]);
    const int lo = hexval(t[4]);
    if (hi < 0 || lo < 0) return -1;
    return hi * 16 + lo;
  }

  static std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
      switch (c) {
        case '\\': out += "\\\\"; break;
        case '\t': out += "\\t"; break;
        case '\n': out += "\\n"; break;
        case '\r': out += "\\r"; break;
        default: out.push_back(c);
      }
    }
    return out;
  }

  static std::string unescape(const std::string& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '\\' && i + 1 < s.size()) {
        const char n = s[++i];
        out.push_back(n == 't' ? '\t' : n == 'n' ? '\n' : n == 'r' ? '\r' : n);
      } else if (s[i] != '\r') {
        out.push_back(s[i]);
      }
    }
    return out;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> words_;
  std::vector<int> byte_of_;
  std::array<TokenId, 256> byte_ids_{};
  std::size_t max_word_len_ = 0;
  TokenId pad_ = 0, bos_ = 0, eos_ = 0;
};

}  // namespace neurolens
