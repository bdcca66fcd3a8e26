#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace vlmo::data {

class VocabularyError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kMask = 1;
inline constexpr TokenId kTextCls = 2;
inline constexpr TokenId kTextSep = 3;
inline constexpr std::size_t kNumSpecials = 4;
inline constexpr std::size_t kNumBaseWords = 48;

// Closed toy vocabulary: 4 specials, 48 whole words, and sub-token pieces
// for the handful of words that tokenize into two pieces.
class Vocabulary {
  public:
    static const Vocabulary& toy();

    std::size_t size() const { return tokens_.size(); }
    const std::string& token(TokenId id) const;
    std::optional<TokenId> find(std::string_view token) const;

    // Token ids for a whole word: one id for base words, two pieces for
    // split words. Throws VocabularyError for unknown words.
    std::vector<TokenId> word_pieces(std::string_view word) const;

    bool is_special(TokenId id) const { return id >= 0 && static_cast<std::size_t>(id) < kNumSpecials; }
    const std::vector<std::string>& tokens() const { return tokens_; }

  private:
    Vocabulary();
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
    std::unordered_map<std::string, std::array<TokenId, 2>> split_words_;
};

}  // namespace vlmo::data
