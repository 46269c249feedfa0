#include "ctrlgen/vocab.hpp"

#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace ctrlgen {

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < 2 || tokens_[kBos] != "<bos>" || tokens_[kEos] != "<eos>") {
    throw std::invalid_argument("vocabulary must start with <bos>, <eos>");
  }
  for (TokenId i = 0; i < tokens_.size(); ++i) {
    const auto& t = tokens_[i];
    if (t.empty() || t.find_first_of(" \t\r\n") != std::string::npos) {
      throw std::invalid_argument("vocabulary token must be non-empty without whitespace");
    }
    if (!index_.emplace(t, i).second) throw std::invalid_argument("duplicate token: " + t);
  }
}

Vocabulary Vocabulary::synthetic(std::size_t size) {
  if (size < 3) throw std::invalid_argument("synthetic vocabulary needs at least 3 tokens");
  std::vector<std::string> toks{"<bos>", "<eos>"};
  for (std::size_t i = 2; i < size; ++i) {
    std::string name = std::to_string(i);
    if (name.size() < 2) name.insert(0, "0");
    toks.push_back("w" + name);
  }
  return Vocabulary(std::move(toks));
}

Vocabulary Vocabulary::parse(std::string_view text) {
  std::vector<std::string> toks;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) toks.emplace_back(line);
    start = end + 1;
  }
  return Vocabulary(std::move(toks));
}

const std::string& Vocabulary::token(TokenId id) const {
  if (!valid(id)) throw std::out_of_range("token id out of range: " + std::to_string(id));
  return tokens_[id];
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) throw std::out_of_range("unknown token: " + std::string(token));
  return it->second;
}

bool Vocabulary::contains(std::string_view token) const {
  return index_.count(std::string(token)) != 0;
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok) ids.push_back(id(tok));
  return ids;
}

std::string Vocabulary::decode(const std::vector<TokenId>& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

std::string Vocabulary::serialize() const {
  std::string out;
  for (const auto& t : tokens_) {
    out += t;
    out += '\n';
  }
  return out;
}

}  // namespace ctrlgen
