#pragma once

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "icmu/error.hpp"

namespace icmu {

// Token table with the eight reserved entries pinned to ids 0..7. The on-disk
// format is one token per line, line number = id, reserved tokens first.
class Vocabulary {
public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;
  static constexpr int kHis = 4;
  static constexpr int kQues = 5;
  static constexpr int kAns = 6;
  static constexpr int kMask = 7;
  static constexpr int kNumReserved = 8;

  static const std::vector<std::string>& reserved_tokens();

  Vocabulary();

  // Lowercase word/punctuation tokens from the corpus, deduplicated and
  // sorted so the ids are a pure function of the corpus content.
  static Vocabulary from_corpus(std::span<const std::string> texts);
  static Vocabulary from_tokens(const std::vector<std::string>& tokens);  // full list incl. reserved

  int add(const std::string& token);  // returns existing id if present
  bool has(const std::string& token) const { return ids_.count(token) > 0; }
  int id_of(const std::string& token) const;  // [UNK] when absent
  const std::string& token_of(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

// Lowercased split into word tokens; punctuation characters become their own
// single-character tokens.
std::vector<std::string> split_words(const std::string& text);

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab);
std::string detokenize(std::span<const int> ids, const Vocabulary& vocab);

}  // namespace icmu
