#include "icft/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include "icft/errors.hpp"

#include <json.hpp>

namespace icft {

Tokenizer::Tokenizer() { rebuild_token_bytes(); }

void Tokenizer::rebuild_token_bytes() {
    token_bytes_.clear();
    token_bytes_.reserve(256 + merges_.size());
    for (int b = 0; b < 256; ++b) token_bytes_.push_back(std::string(1, static_cast<char>(b)));
    for (const Merge& m : merges_)
        token_bytes_.push_back(token_bytes_[m.left] + token_bytes_[m.right]);
}

Tokenizer Tokenizer::train_bpe(std::string_view corpus, int vocab_size) {
    if (vocab_size < 256) throw config_error("tokenizer vocab_size must be >= 256");
    Tokenizer tok;
    std::vector<int32_t> seq;
    seq.reserve(corpus.size());
    for (unsigned char c : corpus) seq.push_back(c);

    while (tok.vocab_size() < vocab_size && seq.size() >= 2) {
        // most frequent adjacent pair; ties broken by smallest (left, right)
        std::map<std::pair<int32_t, int32_t>, int64_t> counts;
        for (size_t i = 0; i + 1 < seq.size(); ++i) counts[{seq[i], seq[i + 1]}]++;
        std::pair<int32_t, int32_t> best{};
        int64_t best_count = 0;
        for (const auto& [pair, n] : counts) {
            if (n > best_count) {
                best = pair;
                best_count = n;
            }
        }
        if (best_count < 2) break;

        const int32_t new_id = tok.vocab_size();
        tok.merges_.push_back({best.first, best.second});
        std::vector<int32_t> merged;
        merged.reserve(seq.size());
        for (size_t i = 0; i < seq.size();) {
            if (i + 1 < seq.size() && seq[i] == best.first && seq[i + 1] == best.second) {
                merged.push_back(new_id);
                i += 2;
            } else {
                merged.push_back(seq[i]);
                i += 1;
            }
        }
        seq = std::move(merged);
    }
    tok.rebuild_token_bytes();
    return tok;
}

std::vector<int32_t> Tokenizer::encode(std::string_view text) const {
    std::vector<int32_t> seq;
    seq.reserve(text.size());
    for (unsigned char c : text) seq.push_back(c);
    // apply merges in training order; occurrences within one pass are merged
    // left to right, matching how training rewrote its corpus
    for (size_t mi = 0; mi < merges_.size(); ++mi) {
        const Merge& m = merges_[mi];
        const int32_t id = 256 + static_cast<int32_t>(mi);
        size_t w = 0;
        bool any = false;
        for (size_t i = 0; i < seq.size();) {
            if (i + 1 < seq.size() && seq[i] == m.left && seq[i + 1] == m.right) {
                seq[w++] = id;
                i += 2;
                any = true;
            } else {
                seq[w++] = seq[i];
                i += 1;
            }
        }
        if (any) seq.resize(w);
    }
    return seq;
}

std::string Tokenizer::decode(std::span<const int32_t> ids) const {
    std::string out;
    for (int32_t id : ids) {
        if (id < 0 || id >= vocab_size()) throw validation_error("token id out of range in decode");
        out += token_bytes_[id];
    }
    return out;
}

void Tokenizer::save(const std::string& path) const {
    nlohmann::json j;
    j["version"] = 1;
    j["vocab_size"] = vocab_size();
    auto& arr = j["merges"] = nlohmann::json::array();
    for (const Merge& m : merges_) arr.push_back({m.left, m.right});
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write tokenizer file " + path);
    out << j.dump(2) << '\n';
}

Tokenizer Tokenizer::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot read tokenizer file " + path);
    nlohmann::json j;
    in >> j;
    Tokenizer tok;
    for (const auto& m : j.at("merges")) {
        tok.merges_.push_back({m.at(0).get<int32_t>(), m.at(1).get<int32_t>()});
    }
    tok.rebuild_token_bytes();
    return tok;
}

}  // namespace icft
