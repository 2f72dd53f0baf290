#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "canlab/errors.hpp"

namespace canlab {

// Word-level tokenizer over the synthetic caption vocabulary. Fixed table:
// three specials, the prompt/caption words, then <extra_N> filler up to
// vocab_size.
class Tokenizer {
public:
    explicit Tokenizer(std::size_t vocab_size);

    static constexpr int kBos = 0;
    static constexpr int kEos = 1;
    static constexpr int kUnk = 2;

    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;

    std::size_t vocab_size() const { return words_.size(); }
    const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

} // namespace canlab
