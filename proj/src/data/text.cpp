#include "vlmo/data/text.hpp"

#include <sstream>
#include <string>

#include "vlmo/numerics/ops.hpp"
#include "vlmo/numerics/tensor.hpp"

namespace vlmo::data {

TokenSequence tokenize(std::string_view text, std::size_t max_length, const Vocabulary& vocab) {
    if (max_length < 2) throw ContractError("tokenize: max_length must leave room for [T_CLS] and [T_SEP]");
    TokenSequence seq;
    seq.ids.push_back(kTextCls);
    seq.word_ids.push_back(-1);
    std::istringstream words{std::string(text)};
    std::string word;
    std::int32_t word_index = 0;
    while (words >> word) {
        for (auto id : vocab.word_pieces(word)) {
            seq.ids.push_back(id);
            seq.word_ids.push_back(word_index);
        }
        ++word_index;
    }
    if (seq.ids.size() + 1 > max_length) {
        seq.ids.resize(max_length - 1);
        seq.word_ids.resize(max_length - 1);
    }
    seq.ids.push_back(kTextSep);
    seq.word_ids.push_back(-1);
    return seq;
}

MaskedTokens whole_word_mask(const TokenSequence& tokens, const MaskingOptions& options, std::mt19937_64& rng,
                             const Vocabulary& vocab) {
    if (!(options.probability >= 0.0 && options.probability <= 1.0)) {
        throw ContractError("whole_word_mask: probability must be in [0, 1]");
    }
    MaskedTokens out{tokens, std::vector<std::int64_t>(tokens.size(), kIgnoreIndex), 0, 0};
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<TokenId> random_word(static_cast<TokenId>(kNumSpecials),
                                                       static_cast<TokenId>(vocab.size() - 1));
    std::size_t i = 0;
    while (i < tokens.size()) {
        const auto word = tokens.word_ids[i];
        std::size_t end = i + 1;
        if (word < 0) {
            i = end;
            continue;
        }
        while (end < tokens.size() && tokens.word_ids[end] == word) ++end;
        ++out.total_words;
        // Draw exactly once per word so the stream stays aligned across options.
        const bool selected = unit(rng) < options.probability;
        if (selected) {
            ++out.masked_words;
            double mode = options.bert_corruption ? unit(rng) : 0.0;
            for (std::size_t k = i; k < end; ++k) {
                out.labels[k] = tokens.ids[k];
                if (mode < 0.8) {
                    out.tokens.ids[k] = kMask;
                } else if (mode < 0.9) {
                    out.tokens.ids[k] = random_word(rng);
                }
            }
        }
        i = end;
    }
    return out;
}

}  // namespace vlmo::data
