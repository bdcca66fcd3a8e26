#include "vlmo/data/vocab.hpp"

namespace vlmo::data {

namespace {

constexpr std::array<std::string_view, kNumSpecials> kSpecials{"[PAD]", "[MASK]", "[T_CLS]", "[T_SEP]"};

constexpr std::array<std::string_view, kNumBaseWords> kBaseWords{
    // shapes, colors, sizes, positions
    "square", "circle", "triangle", "cross", "ring", "stripe", "red", "green", "blue", "yellow", "white", "orange",
    "small", "large", "top", "bottom", "left", "right",
    // caption template
    "a", "an", "of", "image", "picture", "photo", "is", "in", "at", "the", "corner",
    // questions
    "what", "color", "shape", "size", "where", "it",
    // general filler
    "there", "on", "with", "and", "one", "two", "both", "images", "show", "object", "side", "yes", "no"};

struct SplitWord {
    std::string_view word, head, tail;
};

constexpr std::array<SplitWord, 6> kSplitWords{{
    {"checkerboard", "checker", "##board"},
    {"diagonal", "diag", "##onal"},
    {"magenta", "mag", "##enta"},
    {"turquoise", "turq", "##uoise"},
    {"illustration", "illus", "##tration"},
    {"rendering", "render", "##ing"},
}};

}  // namespace

Vocabulary::Vocabulary() {
    auto add = [this](std::string_view token) {
        index_.emplace(std::string(token), static_cast<TokenId>(tokens_.size()));
        tokens_.emplace_back(token);
    };
    for (auto s : kSpecials) add(s);
    for (auto w : kBaseWords) add(w);
    for (const auto& split : kSplitWords) {
        add(split.head);
        add(split.tail);
        split_words_.emplace(std::string(split.word),
                             std::array<TokenId, 2>{index_.at(std::string(split.head)),
                                                    index_.at(std::string(split.tail))});
    }
}

const Vocabulary& Vocabulary::toy() {
    static const Vocabulary vocab;
    return vocab;
}

const std::string& Vocabulary::token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary");
    }
    return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::vector<TokenId> Vocabulary::word_pieces(std::string_view word) const {
    if (auto it = split_words_.find(std::string(word)); it != split_words_.end()) {
        return {it->second[0], it->second[1]};
    }
    auto id = find(word);
    // Specials and sub-token pieces are not words.
    if (!id || is_special(*id) || static_cast<std::size_t>(*id) >= kNumSpecials + kNumBaseWords) {
        throw VocabularyError("word '" + std::string(word) + "' is not in the vocabulary");
    }
    return {*id};
}

}  // namespace vlmo::data
