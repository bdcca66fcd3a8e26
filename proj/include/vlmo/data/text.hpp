#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "vlmo/data/vocab.hpp"

namespace vlmo::data {

// [T_CLS] pieces... [T_SEP]. word_ids give the source word of each piece
// (-1 for the specials) so masking can treat a word as a unit.
struct TokenSequence {
    std::vector<TokenId> ids;
    std::vector<std::int32_t> word_ids;

    std::size_t size() const { return ids.size(); }
};

// Whitespace tokenizer over the toy vocabulary. Sequences longer than
// max_length keep their prefix and always end in [T_SEP].
TokenSequence tokenize(std::string_view text, std::size_t max_length,
                       const Vocabulary& vocab = Vocabulary::toy());

struct MaskingOptions {
    double probability = 0.15;
    // BERT 80/10/10 corruption of selected words instead of always [MASK].
    bool bert_corruption = false;
};

struct MaskedTokens {
    TokenSequence tokens;
    std::vector<std::int64_t> labels;  // original id where masked, kIgnoreIndex elsewhere
    std::size_t masked_words = 0;
    std::size_t total_words = 0;
};

// Selects words independently with the given probability and replaces every
// piece of a selected word. Specials are never selected.
MaskedTokens whole_word_mask(const TokenSequence& tokens, const MaskingOptions& options, std::mt19937_64& rng,
                             const Vocabulary& vocab = Vocabulary::toy());

}  // namespace vlmo::data
