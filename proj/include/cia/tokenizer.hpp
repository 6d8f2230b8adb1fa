#pragma once

#include <cctype>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cia {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

/// Word-level vocabulary for the micro model: reserved ids, every attack
/// target word, the punctuation used as padding, and filler words from the
/// prompt corpus. Exactly 64 entries.
inline const std::vector<std::string>& default_vocabulary() {
    static const std::vector<std::string> vocab = {
        "<pad>", "<bos>", "<eos>", "<unk>",
        // targets
        "dog", "fish", "bomb", "poison", "sure", "unknown", "yes", "no", "good", "bad", "sorry", "cat", "bird",
        "flower", "green", "human", "blood", "gun", "drug", "virus", "porn",
        // punctuation / padding characters
        "!", "@", "+", ".", ",", "?", "'",
        // misleading template
        "this", "image", "shows", "a",
        // prompt filler
        "the", "of", "what", "is", "in", "describe", "would", "you", "if", "to", "be", "it", "label", "content",
        "any", "how", "many", "category", "picture", "scene", "classify", "caption", "are", "or", "one", "word",
        "story", "provide"};
    return vocab;
}

class Tokenizer {
  public:
    static constexpr TokenId kPad = 0;
    static constexpr TokenId kBos = 1;
    static constexpr TokenId kEos = 2;
    static constexpr TokenId kUnk = 3;

    Tokenizer() : Tokenizer(default_vocabulary()) {}

    explicit Tokenizer(std::vector<std::string> vocab) : vocab_(std::move(vocab)) {
        if (vocab_.size() < 8) throw std::invalid_argument("tokenizer: vocabulary needs at least 8 entries");
        if (vocab_[kPad] != "<pad>" || vocab_[kBos] != "<bos>" || vocab_[kEos] != "<eos>" || vocab_[kUnk] != "<unk>")
            throw std::invalid_argument("tokenizer: ids 0-3 must be <pad>, <bos>, <eos>, <unk>");
        for (std::size_t i = 0; i < vocab_.size(); ++i) {
            if (vocab_[i].empty()) throw std::invalid_argument("tokenizer: empty vocabulary entry");
            if (!index_.emplace(vocab_[i], static_cast<TokenId>(i)).second)
                throw std::invalid_argument("tokenizer: duplicate vocabulary entry '" + vocab_[i] + "'");
        }
    }

    std::size_t size() const { return vocab_.size(); }
    const std::vector<std::string>& vocabulary() const { return vocab_; }

    static bool is_reserved(TokenId id) { return id >= kPad && id <= kUnk; }

    std::optional<TokenId> find(std::string_view word) const {
        auto it = index_.find(std::string(word));
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    TokenId id(std::string_view word) const {
        auto found = find(word);
        if (!found) throw std::out_of_range("tokenizer: '" + std::string(word) + "' is not in the vocabulary");
        return *found;
    }

    const std::string& word(TokenId id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size())
            throw std::out_of_range("tokenizer: id " + std::to_string(id) + " out of range");
        return vocab_[id];
    }

    /// Lowercased words split on whitespace; each punctuation character is a
    /// word of its own.
    static std::vector<std::string> split_words(std::string_view text) {
        std::vector<std::string> words;
        std::string cur;
        auto flush = [&] {
            if (!cur.empty()) words.push_back(std::move(cur));
            cur.clear();
        };
        for (char raw : text) {
            const auto c = static_cast<unsigned char>(raw);
            if (std::isspace(c)) {
                flush();
            } else if (c < 0x80 && std::ispunct(c)) {
                flush();
                words.emplace_back(1, raw);
            } else {
                cur.push_back(static_cast<char>(std::tolower(c)));
            }
        }
        flush();
        return words;
    }

    TokenSeq tokenize(std::string_view text) const {
        TokenSeq ids;
        for (const auto& w : split_words(text)) ids.push_back(find(w).value_or(kUnk));
        return ids;
    }

    /// Space-joined words; reserved ids are dropped.
    std::string detokenize(const TokenSeq& ids) const {
        std::string out;
        for (TokenId id : ids) {
            const auto& w = word(id);
            if (is_reserved(id)) continue;
            if (!out.empty()) out.push_back(' ');
            out += w;
        }
        return out;
    }

  private:
    std::vector<std::string> vocab_;
    std::unordered_map<std::string, TokenId> index_;
};

}  // namespace cia
