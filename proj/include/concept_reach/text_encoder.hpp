#pragma once

// Frozen deterministic text encoder for the caption grammar: token lookup
// table plus positional vectors, both drawn once from a fixed seed. The same
// prompt always maps to the same L x D encoding; sequences are padded to
// exactly L positions.

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "concepts.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace concept_reach {

struct TextEncoding {
    std::string prompt;
    Tensor embedding;  // [L, D]
};

class TextEncoder {
  public:
    static constexpr int kSeqLen = 10;
    static constexpr int kEmbedDim = 512;

    explicit TextEncoder(uint64_t seed = 0x7e7e5eedULL) : seed_(seed) {
        // Closed caption vocabulary; index 0 is the pad token.
        const char* words[] = {"<pad>", "a",      "behind",   "shape", "red",   "green",
                               "blue",  "circle", "triangle", "square"};
        Rng rng(seed);
        for (const char* w : words) {
            int id = int(vocab_.size());
            vocab_[w] = id;
        }
        table_ = Tensor({int(vocab_.size()), kEmbedDim});
        Rng trng = rng.substream("token_table");
        for (auto& v : table_.data) v = trng.normal() / std::sqrt(real(kEmbedDim));
        pos_ = Tensor({kSeqLen, kEmbedDim});
        Rng prng = rng.substream("positions");
        for (auto& v : pos_.data) v = prng.normal() / std::sqrt(real(kEmbedDim));
    }

    std::vector<int> tokenize(const std::string& prompt) const {
        std::vector<int> toks;
        size_t i = 0;
        while (i < prompt.size()) {
            while (i < prompt.size() && prompt[i] == ' ') ++i;
            size_t j = i;
            while (j < prompt.size() && prompt[j] != ' ') ++j;
            if (j > i) {
                auto it = vocab_.find(prompt.substr(i, j - i));
                if (it == vocab_.end())
                    throw std::invalid_argument("TextEncoder: unknown word in prompt: " +
                                                prompt.substr(i, j - i));
                toks.push_back(it->second);
            }
            i = j;
        }
        if (int(toks.size()) > kSeqLen)
            throw std::invalid_argument("TextEncoder: prompt exceeds " + std::to_string(kSeqLen) +
                                        " tokens: " + prompt);
        toks.resize(kSeqLen, 0);  // pad
        return toks;
    }

    TextEncoding encode(const std::string& prompt) const {
        auto toks = tokenize(prompt);
        TextEncoding enc{prompt, Tensor({kSeqLen, kEmbedDim})};
        for (int l = 0; l < kSeqLen; ++l)
            for (int d = 0; d < kEmbedDim; ++d)
                enc.embedding[size_t(l) * kEmbedDim + d] =
                    table_[size_t(toks[size_t(l)]) * kEmbedDim + d] + pos_[size_t(l) * kEmbedDim + d];
        return enc;
    }

    uint64_t seed() const { return seed_; }
    std::string identifier() const { return "frozen-lookup-512/seed=" + std::to_string(seed_); }

  private:
    uint64_t seed_;
    std::map<std::string, int> vocab_;
    Tensor table_;
    Tensor pos_;
};

}  // namespace concept_reach
