#include "icmu/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>

namespace icmu {

const std::vector<std::string>& Vocabulary::reserved_tokens() {
  static const std::vector<std::string> kReserved = {"[PAD]", "[UNK]", "[CLS]", "[SEP]",
                                                     "[HIS]", "[QUES]", "[ANS]", "[MASK]"};
  return kReserved;
}

Vocabulary::Vocabulary() {
  for (const auto& t : reserved_tokens()) add(t);
}

Vocabulary Vocabulary::from_corpus(std::span<const std::string> texts) {
  std::set<std::string> words;
  for (const auto& text : texts) {
    for (auto& w : split_words(text)) words.insert(std::move(w));
  }
  Vocabulary v;
  for (const auto& w : words) v.add(w);
  return v;
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens) {
  const auto& reserved = reserved_tokens();
  if (tokens.size() < reserved.size()) {
    throw ParseError("vocabulary: token list shorter than the reserved set");
  }
  for (size_t i = 0; i < reserved.size(); ++i) {
    if (tokens[i] != reserved[i]) {
      throw ParseError("vocabulary: reserved token " + std::to_string(i) + " is '" + tokens[i] +
                       "', expected '" + reserved[i] + "'");
    }
  }
  Vocabulary v;
  for (size_t i = reserved.size(); i < tokens.size(); ++i) {
    if (v.has(tokens[i])) throw ParseError("vocabulary: duplicate token '" + tokens[i] + "'");
    v.add(tokens[i]);
  }
  return v;
}

int Vocabulary::add(const std::string& token) {
  auto it = ids_.find(token);
  if (it != ids_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  ids_.emplace(token, id);
  return id;
}

int Vocabulary::id_of(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token_of(int id) const {
  if (id < 0 || id >= size()) {
    throw IndexError("vocabulary: id " + std::to_string(id) + " out of range [0," +
                     std::to_string(size()) + ")");
  }
  return tokens_[static_cast<size_t>(id)];
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("vocabulary: cannot open '" + path + "' for writing");
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("vocabulary: cannot open '" + path + "'");
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return from_tokens(tokens);
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      words.push_back(current);
      current.clear();
    }
  };
  for (unsigned char ch : text) {
    if (std::isspace(ch)) {
      flush();
    } else if (ch < 0x80 && std::ispunct(ch)) {
      flush();
      words.emplace_back(1, static_cast<char>(ch));
    } else {
      current.push_back(static_cast<char>(std::tolower(ch)));
    }
  }
  flush();
  return words;
}

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab) {
  std::vector<int> ids;
  for (const auto& w : split_words(text)) ids.push_back(vocab.id_of(w));
  return ids;
}

std::string detokenize(std::span<const int> ids, const Vocabulary& vocab) {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token_of(ids[i]);
  }
  return out;
}

}  // namespace icmu
