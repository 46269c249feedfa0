#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ctrlgen {

using TokenId = std::uint32_t;

inline constexpr TokenId kBos = 0;
inline constexpr TokenId kEos = 1;

/// Closed token set. Ids are positions; `<bos>` and `<eos>` are always 0 and 1.
class Vocabulary {
 public:
  explicit Vocabulary(std::vector<std::string> tokens);

  /// `<bos>`, `<eos>`, then w02 .. w{size-1}.
  static Vocabulary synthetic(std::size_t size);
  /// Newline-delimited; a trailing newline is optional.
  static Vocabulary parse(std::string_view text);

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  TokenId id(std::string_view token) const;
  bool contains(std::string_view token) const;
  bool valid(TokenId id) const noexcept { return id < tokens_.size(); }

  std::vector<TokenId> encode(std::string_view whitespace_text) const;
  std::string decode(const std::vector<TokenId>& ids) const;

  /// One token per line, each followed by '\n'.
  std::string serialize() const;

  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace ctrlgen
