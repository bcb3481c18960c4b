#include "icft/packing.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include "icft/errors.hpp"

#include <json.hpp>

namespace icft {

const char* mask_strategy_name(MaskStrategy s) {
    switch (s) {
        case MaskStrategy::MaskLast: return "mask_last";
        case MaskStrategy::MaskAll: return "mask_all";
        case MaskStrategy::Autoregressive: return "autoregressive";
    }
    return "?";
}

MaskStrategy mask_strategy_from_name(const std::string& name) {
    if (name == "mask_last") return MaskStrategy::MaskLast;
    if (name == "mask_all") return MaskStrategy::MaskAll;
    if (name == "autoregressive") return MaskStrategy::Autoregressive;
    throw config_error("unknown mask strategy '" + name + "'");
}

ShotRegime classify_shots(int n) {
    if (n < 0) throw contract_error("negative shot count");
    if (n == 0) return ShotRegime::Zero;
    if (n <= 20) return ShotRegime::Few;
    return ShotRegime::Many;
}

const char* shot_regime_name(ShotRegime r) {
    switch (r) {
        case ShotRegime::Zero: return "zero";
        case ShotRegime::Few: return "few";
        case ShotRegime::Many: return "many";
    }
    return "?";
}

ShotRegime shot_regime_from_name(const std::string& name) {
    if (name == "zero") return ShotRegime::Zero;
    if (name == "few") return ShotRegime::Few;
    if (name == "many") return ShotRegime::Many;
    throw config_error("unknown shot regime '" + name + "'");
}

RenderedExample render_example(const Example& ex, const PromptTemplate& tpl,
                               const Tokenizer& tok) {
    const std::string input_text = tpl.render_input(ex);
    if (input_text.empty() || ex.target.empty())
        throw validation_error("example renders empty input or target (task " + ex.task_id + ")");
    RenderedExample r;
    r.input_tokens = tok.encode(input_text);
    std::vector<int32_t> y = tok.encode(ex.target);
    std::vector<int32_t> sfx = tok.encode(tpl.target_suffix);
    r.mask_len = static_cast<int>(y.size()) + (sfx.empty() ? 0 : 1);
    r.target_tokens = std::move(y);
    r.target_tokens.insert(r.target_tokens.end(), sfx.begin(), sfx.end());
    if (r.input_tokens.empty() || r.target_tokens.empty())
        throw validation_error("example tokenizes to an empty segment");
    return r;
}

int32_t stop_token_of(const PromptTemplate& tpl, const Tokenizer& tok) {
    if (tpl.target_suffix.empty()) return -1;
    auto ids = tok.encode(tpl.target_suffix);
    return ids.empty() ? -1 : ids[0];
}

std::vector<uint8_t> build_loss_mask(const PackedInstance& inst, MaskStrategy strategy) {
    std::vector<uint8_t> mask(inst.tokens.size(), 0);
    if (inst.boundaries.empty()) throw contract_error("instance has no boundaries");
    switch (strategy) {
        case MaskStrategy::MaskAll:
            for (const auto& b : inst.boundaries)
                for (int t = b.target_begin; t < b.target_end; ++t) mask[t] = 1;
            break;
        case MaskStrategy::MaskLast: {
            const auto& b = inst.boundaries.back();
            for (int t = b.target_begin; t < b.target_end; ++t) mask[t] = 1;
            break;
        }
        case MaskStrategy::Autoregressive:
            // every position except 0, which has no conditioning context
            for (size_t t = 1; t < mask.size(); ++t) mask[t] = 1;
            break;
    }
    return mask;
}

PackedInstance prefix_instance(const PackedInstance& inst, int examples) {
    if (examples < 1 || examples > static_cast<int>(inst.boundaries.size()))
        throw contract_error("prefix_instance example count out of range");
    PackedInstance out;
    out.n_w = inst.n_w;
    out.task_id = inst.task_id;
    const auto& last = inst.boundaries[examples - 1];
    out.tokens.assign(inst.tokens.begin(), inst.tokens.begin() + last.end);
    out.boundaries.assign(inst.boundaries.begin(), inst.boundaries.begin() + examples);
    out.shot_count = examples - 1;
    out.loss_mask = build_loss_mask(out, MaskStrategy::MaskLast);
    return out;
}

ExampleStream stream_of(std::vector<Example> examples) {
    auto state = std::make_shared<std::pair<std::vector<Example>, size_t>>(std::move(examples), 0);
    return [state]() -> std::optional<Example> {
        if (state->second >= state->first.size()) return std::nullopt;
        return state->first[state->second++];
    };
}

Packer::Packer(const Tokenizer& tok, PromptTemplate tpl, int n_w, MaskStrategy strategy)
    : tok_(tok), tpl_(std::move(tpl)), n_w_(n_w), strategy_(strategy) {
    if (n_w_ < 1) throw config_error("packer n_w must be positive");
    preamble_tokens_ = tok_.encode(tpl_.preamble);
}

std::optional<std::pair<Example, RenderedExample>> Packer::take(ExampleStream& stream,
                                                                PackReport& report) {
    if (lookahead_) {
        auto out = std::move(*lookahead_);
        lookahead_.reset();
        return out;
    }
    while (true) {
        auto ex = stream();
        if (!ex) return std::nullopt;
        RenderedExample r = render_example(*ex, tpl_, tok_);
        // an example that can never fit is skipped with a report entry,
        // never truncated
        if (static_cast<int>(preamble_tokens_.size()) + r.total() > n_w_) {
            report.skipped_oversized += 1;
            report.skipped_inputs.push_back(ex->input.substr(0, 32));
            continue;
        }
        return std::make_pair(std::move(*ex), std::move(r));
    }
}

PackedInstance Packer::assemble(
    const std::vector<std::pair<Example, RenderedExample>>& exs) const {
    PackedInstance inst;
    inst.n_w = n_w_;
    inst.task_id = exs.empty() ? "" : exs.front().first.task_id;
    inst.tokens = preamble_tokens_;
    int shot = 0;
    for (const auto& [ex, r] : exs) {
        ExampleBoundary b;
        b.start = static_cast<int>(inst.tokens.size());
        inst.tokens.insert(inst.tokens.end(), r.input_tokens.begin(), r.input_tokens.end());
        b.target_begin = static_cast<int>(inst.tokens.size());
        inst.tokens.insert(inst.tokens.end(), r.target_tokens.begin(), r.target_tokens.end());
        b.end = static_cast<int>(inst.tokens.size());
        b.target_end = b.target_begin + r.mask_len;
        b.shot_index = shot++;
        inst.boundaries.push_back(b);
    }
    inst.shot_count = static_cast<int>(inst.boundaries.size()) - 1;
    inst.loss_mask = build_loss_mask(inst, strategy_);
    return inst;
}

std::optional<PackedInstance> Packer::next_max_context(ExampleStream& stream,
                                                       PackReport& report) {
    std::vector<std::pair<Example, RenderedExample>> exs;
    int used = static_cast<int>(preamble_tokens_.size());
    while (true) {
        auto item = take(stream, report);
        if (!item) break;
        if (used + item->second.total() > n_w_) {
            lookahead_ = std::move(item);  // first example of the next instance
            break;
        }
        used += item->second.total();
        exs.push_back(std::move(*item));
    }
    if (exs.empty()) return std::nullopt;
    report.instances += 1;
    report.examples_packed += static_cast<int64_t>(exs.size());
    report.total_tokens += used;
    return assemble(exs);
}

std::optional<PackedInstance> Packer::next_fixed_shots(ExampleStream& stream, int shots,
                                                       PackReport& report) {
    if (shots < 0) throw contract_error("negative shot count");
    std::vector<std::pair<Example, RenderedExample>> exs;
    int used = static_cast<int>(preamble_tokens_.size());
    for (int i = 0; i < shots + 1; ++i) {
        auto item = take(stream, report);
        if (!item) {
            if (exs.empty()) return std::nullopt;
            throw validation_error("stream exhausted mid-instance in fixed-shot packing");
        }
        used += item->second.total();
        if (used > n_w_)
            throw context_length_error("fixed-shot instance exceeds n_w=" + std::to_string(n_w_));
        exs.push_back(std::move(*item));
    }
    report.instances += 1;
    report.examples_packed += static_cast<int64_t>(exs.size());
    report.total_tokens += used;
    return assemble(exs);
}

std::vector<Example> stratified_sample(const std::vector<Example>& pool, int count, Rng& rng) {
    if (count == 0) return {};
    if (count < 0) throw contract_error("negative sample count");
    std::map<std::string, std::vector<const Example*>> by_class;
    for (const auto& ex : pool) by_class[ex.target].push_back(&ex);
    if (by_class.empty()) throw validation_error("stratified_sample on empty pool");
    for (const auto& [label, members] : by_class)
        if (members.empty()) throw validation_error("class '" + label + "' has no examples");

    std::vector<std::string> classes;
    for (const auto& [label, _] : by_class) classes.push_back(label);
    rng.shuffle(classes.begin(), classes.end());

    const int k = static_cast<int>(classes.size());
    const int base = count / k;
    const int extra = count % k;  // the first `extra` classes in shuffled order get one more

    std::vector<Example> out;
    out.reserve(static_cast<size_t>(count));
    for (int ci = 0; ci < k; ++ci) {
        const auto& members = by_class[classes[ci]];
        const int want = base + (ci < extra ? 1 : 0);
        for (int j = 0; j < want; ++j)
            out.push_back(*members[rng.uniform_u64(members.size())]);
    }
    rng.shuffle(out.begin(), out.end());
    return out;
}

std::vector<Example> uniform_sample(const std::vector<Example>& pool, int count, Rng& rng) {
    if (count < 0) throw contract_error("negative sample count");
    if (pool.empty() && count > 0) throw validation_error("uniform_sample on empty pool");
    std::vector<Example> out;
    out.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) out.push_back(pool[rng.uniform_u64(pool.size())]);
    return out;
}

JsonlCorpus load_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open corpus " + path);
    JsonlCorpus corpus;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw validation_error(path + ":" + std::to_string(lineno) + ": bad JSON: " +
                                   e.what());
        }
        Example ex;
        try {
            ex.input = j.at("input").get<std::string>();
            ex.target = j.at("target").get<std::string>();
            ex.task_id = j.at("task").get<std::string>();
        } catch (const std::exception& e) {
            throw validation_error(path + ":" + std::to_string(lineno) +
                                   ": missing field: " + e.what());
        }
        if (j.contains("labels"))
            for (const auto& l : j["labels"]) ex.label_set.push_back(l.get<std::string>());
        if (j.contains("category"))
            corpus.task_category[ex.task_id] = j["category"].get<std::string>();
        corpus.examples.push_back(std::move(ex));
    }
    return corpus;
}

void save_jsonl(const std::string& path, const std::vector<Example>& examples,
                const std::map<std::string, std::string>& task_category) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write corpus " + path);
    for (const auto& ex : examples) {
        nlohmann::json j;
        j["input"] = ex.input;
        j["target"] = ex.target;
        j["task"] = ex.task_id;
        if (!ex.label_set.empty()) j["labels"] = ex.label_set;
        auto it = task_category.find(ex.task_id);
        if (it != task_category.end()) j["category"] = it->second;
        out << j.dump() << '\n';
    }
}

namespace {

constexpr char kShardMagic[4] = {'I', 'C', 'P', 'K'};
constexpr uint32_t kShardVersion = 1;

template <class T>
void put(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <class T>
T get(std::ifstream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw io_error("truncated shard file");
    return v;
}

}  // namespace

void write_shard(const std::string& path, const std::vector<PackedInstance>& instances,
                 int n_w) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write shard " + path);
    out.write(kShardMagic, 4);
    put<uint32_t>(out, kShardVersion);
    put<uint32_t>(out, static_cast<uint32_t>(n_w));
    put<uint64_t>(out, instances.size());
    for (const auto& inst : instances) {
        put<uint32_t>(out, static_cast<uint32_t>(inst.tokens.size()));
        put<uint32_t>(out, static_cast<uint32_t>(inst.boundaries.size()));
        put<uint32_t>(out, static_cast<uint32_t>(inst.shot_count));
        out.write(reinterpret_cast<const char*>(inst.tokens.data()),
                  static_cast<std::streamsize>(inst.tokens.size() * sizeof(int32_t)));
        out.write(reinterpret_cast<const char*>(inst.loss_mask.data()),
                  static_cast<std::streamsize>(inst.loss_mask.size()));
        for (const auto& b : inst.boundaries) {
            put<uint32_t>(out, static_cast<uint32_t>(b.start));
            put<uint32_t>(out, static_cast<uint32_t>(b.target_begin));
            put<uint32_t>(out, static_cast<uint32_t>(b.target_end));
            put<uint32_t>(out, static_cast<uint32_t>(b.end));
            put<uint32_t>(out, static_cast<uint32_t>(b.shot_index));
        }
    }
    if (!out) throw io_error("failed writing shard " + path);
}

std::vector<PackedInstance> read_shard(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open shard " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != std::string(kShardMagic, 4))
        throw validation_error("not a shard file: " + path);
    const uint32_t version = get<uint32_t>(in);
    if (version != kShardVersion)
        throw validation_error("unsupported shard version " + std::to_string(version));
    const uint32_t n_w = get<uint32_t>(in);
    const uint64_t count = get<uint64_t>(in);
    std::vector<PackedInstance> out;
    out.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        PackedInstance inst;
        inst.n_w = static_cast<int>(n_w);
        const uint32_t t = get<uint32_t>(in);
        const uint32_t nb = get<uint32_t>(in);
        inst.shot_count = static_cast<int>(get<uint32_t>(in));
        inst.tokens.resize(t);
        in.read(reinterpret_cast<char*>(inst.tokens.data()),
                static_cast<std::streamsize>(t * sizeof(int32_t)));
        inst.loss_mask.resize(t);
        in.read(reinterpret_cast<char*>(inst.loss_mask.data()), static_cast<std::streamsize>(t));
        for (uint32_t b = 0; b < nb; ++b) {
            ExampleBoundary eb;
            eb.start = static_cast<int>(get<uint32_t>(in));
            eb.target_begin = static_cast<int>(get<uint32_t>(in));
            eb.target_end = static_cast<int>(get<uint32_t>(in));
            eb.end = static_cast<int>(get<uint32_t>(in));
            eb.shot_index = static_cast<int>(get<uint32_t>(in));
            inst.boundaries.push_back(eb);
        }
        if (!in) throw io_error("truncated shard file " + path);
        out.push_back(std::move(inst));
    }
    return out;
}

}  // namespace icft
