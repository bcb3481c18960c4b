#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace icft {

// Byte-level tokenizer with a learned BPE merge table. Ids 0..255 are raw
// bytes, id 256+i is merge i. Byte fallback makes round trips exact for any
// input; encode/decode are deterministic.
class Tokenizer {
public:
    Tokenizer();  // bytes only, no merges

    static Tokenizer train_bpe(std::string_view corpus, int vocab_size);

    std::vector<int32_t> encode(std::string_view text) const;
    std::string decode(std::span<const int32_t> ids) const;

    int vocab_size() const { return 256 + static_cast<int>(merges_.size()); }
    int merge_count() const { return static_cast<int>(merges_.size()); }

    void save(const std::string& path) const;
    static Tokenizer load(const std::string& path);

private:
    struct Merge {
        int32_t left;
        int32_t right;
    };
    std::vector<Merge> merges_;
    std::vector<std::string> token_bytes_;  // per token id, its byte expansion

    void rebuild_token_bytes();
};

}  // namespace icft
