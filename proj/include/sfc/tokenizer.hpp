#pragma once

// Word-level whitespace tokenizer over a fixed vocabulary. One token per word;
// "," and "." are ordinary vocabulary entries.

#include <map>
#include <string>
#include <vector>

#include "sfc/tensor.hpp"

namespace sfc {

class Tokenizer {
public:
    Tokenizer() = default;

    explicit Tokenizer(std::vector<std::string> vocab) : vocab_(std::move(vocab)) {
        for (std::size_t i = 0; i < vocab_.size(); ++i) {
            require(!ids_.count(vocab_[i]), "duplicate vocabulary entry: " + vocab_[i]);
            ids_[vocab_[i]] = static_cast<int>(i);
        }
    }

    int id(const std::string& word) const {
        auto it = ids_.find(word);
        require(it != ids_.end(), "token not in vocabulary: '" + word + "'");
        return it->second;
    }

    bool contains(const std::string& word) const { return ids_.count(word) != 0; }

    const std::string& word(int id) const {
        require(id >= 0 && static_cast<std::size_t>(id) < vocab_.size(), "token id out of range");
        return vocab_[static_cast<std::size_t>(id)];
    }

    std::vector<int> encode(const std::vector<std::string>& words) const {
        std::vector<int> out;
        out.reserve(words.size());
        for (const auto& w : words) out.push_back(id(w));
        return out;
    }

    std::vector<int> encode_text(const std::string& text) const {
        return encode(split(text));
    }

    static std::vector<std::string> split(const std::string& text) {
        std::vector<std::string> out;
        std::string cur;
        for (char c : text) {
            if (c == ' ' || c == '\t' || c == '\n') {
                if (!cur.empty()) out.push_back(std::move(cur));
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        if (!cur.empty()) out.push_back(std::move(cur));
        return out;
    }

    std::size_t vocab_size() const { return vocab_.size(); }
    const std::vector<std::string>& vocab() const { return vocab_; }

private:
    std::vector<std::string> vocab_;
    std::map<std::string, int> ids_;
};

}  // namespace sfc
