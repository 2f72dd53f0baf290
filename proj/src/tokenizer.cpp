#include "canlab/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

namespace canlab {

namespace {

const char* kBaseWords[] = {
    "<bos>", "<eos>", "<unk>",
    "a", "describe", "the", "object", "in", "this", "image",
    "red", "green", "blue", "yellow", "magenta", "cyan", "orange", "purple",
    "white", "pink",
    "circle", "square", "triangle", "cross", "ring", "diamond", "bar",
    "frame", "dot", "checker",
};

} // namespace

Tokenizer::Tokenizer(std::size_t vocab_size) {
    const std::size_t base = sizeof(kBaseWords) / sizeof(kBaseWords[0]);
    if (vocab_size < base)
        throw ConfigError("vocab_size " + std::to_string(vocab_size) +
                          " smaller than base vocabulary " + std::to_string(base));
    for (const char* w : kBaseWords) words_.emplace_back(w);
    for (std::size_t i = base; i < vocab_size; ++i)
        words_.push_back("<extra_" + std::to_string(i - base) + ">");
    for (std::size_t i = 0; i < words_.size(); ++i)
        index_[words_[i]] = static_cast<int>(i);
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<int> out;
    std::istringstream iss(text);
    std::string w;
    while (iss >> w) {
        std::transform(w.begin(), w.end(), w.begin(),
                       [](unsigned char c) { return std::tolower(c); });
        auto it = index_.find(w);
        out.push_back(it == index_.end() ? kUnk : it->second);
    }
    return out;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        if (id == kBos || id == kEos) continue;
        const auto& w = words_.at(static_cast<std::size_t>(id));
        if (!out.empty()) out += ' ';
        out += w;
    }
    return out;
}

} // namespace canlab
