#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "icft/rng.hpp"
#include "icft/tokenizer.hpp"

namespace icft {

enum class MaskStrategy { MaskLast, MaskAll, Autoregressive };

const char* mask_strategy_name(MaskStrategy s);
MaskStrategy mask_strategy_from_name(const std::string& name);

enum class ShotRegime { Zero, Few, Many };

// n = 0 zero-shot, 1..20 few-shot, > 20 many-shot
ShotRegime classify_shots(int n);
const char* shot_regime_name(ShotRegime r);
ShotRegime shot_regime_from_name(const std::string& name);

struct Example {
    std::string input;
    std::string target;
    std::string task_id;
    std::vector<std::string> label_set;  // empty for generation tasks
};

struct PromptTemplate {
    std::string preamble;       // rendered once per packed instance
    std::string input_prefix;
    std::string input_suffix;
    std::string target_prefix;  // conditioning side: the model generates after it
    std::string target_suffix;  // end-of-target delimiter; first token is the stop token

    std::string render_input(const Example& ex) const {
        return input_prefix + ex.input + input_suffix + target_prefix;
    }
    std::string render_target(const Example& ex) const { return ex.target + target_suffix; }
    std::string render(const Example& ex) const { return render_input(ex) + render_target(ex); }
};

// Token segments of one rendered example. Segments are tokenized separately
// so the input/target boundary is exact; detokenizing the concatenation
// reproduces the rendered text byte for byte.
struct RenderedExample {
    std::vector<int32_t> input_tokens;   // prefix + x + suffix + target_prefix
    std::vector<int32_t> target_tokens;  // y + target_suffix
    int mask_len = 0;                    // |tokens(y)| plus one delimiter token if present
    int total() const {
        return static_cast<int>(input_tokens.size() + target_tokens.size());
    }
};

RenderedExample render_example(const Example& ex, const PromptTemplate& tpl, const Tokenizer& tok);

// First token of the rendered target suffix; -1 when the suffix is empty.
int32_t stop_token_of(const PromptTemplate& tpl, const Tokenizer& tok);

struct ExampleBoundary {
    int start = 0;         // first token of the example
    int target_begin = 0;  // first token of y
    int target_end = 0;    // past the maskable span (y tokens + 1 delimiter token)
    int end = 0;           // past the whole example
    int shot_index = 0;
};

struct PackedInstance {
    std::vector<int32_t> tokens;
    std::vector<uint8_t> loss_mask;
    std::vector<ExampleBoundary> boundaries;
    int shot_count = 0;  // boundaries.size() - 1
    int n_w = 0;
    std::string task_id;

    int length() const { return static_cast<int>(tokens.size()); }
};

std::vector<uint8_t> build_loss_mask(const PackedInstance& inst, MaskStrategy strategy);

// Truncation of a packed instance to its first `examples` examples, masking
// only the last target (the Table-1 prefix expansion for mask-last training).
PackedInstance prefix_instance(const PackedInstance& inst, int examples);

struct PackReport {
    int64_t instances = 0;
    int64_t examples_packed = 0;
    int64_t skipped_oversized = 0;
    int64_t total_tokens = 0;
    std::vector<std::string> skipped_inputs;  // first bytes of each skipped render
    double mean_shots() const {
        return instances == 0 ? 0.0
                              : static_cast<double>(examples_packed - instances) /
                                    static_cast<double>(instances);
    }
};

using ExampleStream = std::function<std::optional<Example>()>;

ExampleStream stream_of(std::vector<Example> examples);

// Greedy maximum-in-context-length packer. Keeps one example of lookahead so
// an instance stops exactly when the next example would overflow n_w.
class Packer {
public:
    Packer(const Tokenizer& tok, PromptTemplate tpl, int n_w, MaskStrategy strategy);

    // Fills the window with whole examples; nullopt once the stream is done.
    std::optional<PackedInstance> next_max_context(ExampleStream& stream, PackReport& report);

    // Exactly `shots` context examples plus one final example.
    std::optional<PackedInstance> next_fixed_shots(ExampleStream& stream, int shots,
                                                   PackReport& report);

    const PromptTemplate& prompt_template() const { return tpl_; }
    int n_w() const { return n_w_; }

private:
    const Tokenizer& tok_;
    PromptTemplate tpl_;
    int n_w_;
    MaskStrategy strategy_;
    std::vector<int32_t> preamble_tokens_;
    std::optional<std::pair<Example, RenderedExample>> lookahead_;

    std::optional<std::pair<Example, RenderedExample>> take(ExampleStream& stream,
                                                            PackReport& report);
    PackedInstance assemble(const std::vector<std::pair<Example, RenderedExample>>& exs) const;
};

// Per-class counts differ by at most one; which classes get the extra draw
// and the final order are decided by the seeded RNG.
std::vector<Example> stratified_sample(const std::vector<Example>& pool, int count, Rng& rng);

std::vector<Example> uniform_sample(const std::vector<Example>& pool, int count, Rng& rng);

// JSON-lines corpus: one object per line with fields input, target, task,
// optional labels, optional category.
struct JsonlCorpus {
    std::vector<Example> examples;
    std::map<std::string, std::string> task_category;
};

JsonlCorpus load_jsonl(const std::string& path);
void save_jsonl(const std::string& path, const std::vector<Example>& examples,
                const std::map<std::string, std::string>& task_category = {});

// Binary shard container for packed instances (layout documented in README).
void write_shard(const std::string& path, const std::vector<PackedInstance>& instances, int n_w);
std::vector<PackedInstance> read_shard(const std::string& path);

}  // namespace icft
