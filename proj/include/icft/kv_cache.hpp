#pragma once

#include <algorithm>
#include <cstdint>
#include <future>
#include <list>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "icft/model.hpp"
#include "icft/packing.hpp"

namespace icft {

// Per-layer key/value rows for a cached prompt prefix of length N1, plus the
// logits after the final prompt token so continuations can start immediately.
template <class Real>
struct KvCache {
    std::vector<int32_t> prompt_tokens;
    uint64_t prompt_hash = 0;
    uint64_t fingerprint = 0;  // model + adapter content hash
    int d = 0;
    std::vector<std::vector<Real>> k, v;  // per layer, len * d flat rows
    std::vector<Real> last_logits;        // empty for an empty prompt

    int len() const { return static_cast<int>(prompt_tokens.size()); }
};

// Scratch continuation on top of an immutable base cache. Keeps the base
// shared between concurrent decodes of the same prompt.
template <class Real>
struct CacheView {
    const KvCache<Real>* base = nullptr;
    int n_layers = 0;
    int d = 0;
    std::vector<std::vector<Real>> k_ext, v_ext;

    CacheView(const KvCache<Real>* b, int layers, int dim) : base(b), n_layers(layers), d(dim) {
        k_ext.resize(layers);
        v_ext.resize(layers);
    }
    int base_len() const { return base ? base->len() : 0; }
    int total_len() const {
        return base_len() + static_cast<int>(k_ext.empty() ? 0 : k_ext[0].size() / d);
    }
    const Real* key_row(int layer, int j) const {
        const int bl = base_len();
        if (j < bl) return base->k[layer].data() + static_cast<size_t>(j) * d;
        return k_ext[layer].data() + static_cast<size_t>(j - bl) * d;
    }
    const Real* val_row(int layer, int j) const {
        const int bl = base_len();
        if (j < bl) return base->v[layer].data() + static_cast<size_t>(j) * d;
        return v_ext[layer].data() + static_cast<size_t>(j - bl) * d;
    }
};

struct EngineCounters {
    uint64_t prefill_hits = 0;
    uint64_t prefill_misses = 0;
    uint64_t positions_processed = 0;  // tokens pushed through the decoder
    uint64_t attn_pairs = 0;           // (query, key) pairs, counted in layer 0
};

struct EngineOptions {
    size_t max_cache_entries = 0;  // 0 = no eviction
    int max_new_tokens = 48;
};

template <class Real>
struct LabelScore {
    int index = 0;
    std::string label;
    double score = 0.0;  // length-normalized target log-likelihood
    bool ok = true;
    std::string error;
};

struct Generation {
    std::vector<int32_t> tokens;
    std::vector<double> logprobs;  // chosen-token logprob per emitted token
    int n2 = 0;                    // query length + emitted tokens
    bool truncated = false;
};

// Many-shot prompted inference with prompt-prefix KV caching. One engine is
// bound to one (model, adapter) pair; the cache store is keyed by prompt hash
// and validated against the binding fingerprint. Concurrent prefills of the
// same prompt coalesce into a single computation.
template <class Real>
class InferenceEngine {
public:
    InferenceEngine(const ModelParams<Real>& params, const LoraAdapter<Real>* adapter,
                    EngineOptions opt = {})
        : params_(&params), adapter_(adapter), opt_(opt) {
        params.config.validate();
        fingerprint_ = hash_mix(params.content_hash(),
                                adapter ? adapter->content_hash() : fnv1a("no-adapter"));
    }

    uint64_t fingerprint() const { return fingerprint_; }
    const ModelParams<Real>& model() const { return *params_; }

    EngineCounters counters() const {
        std::lock_guard<std::mutex> lock(mu_);
        return counters_;
    }
    void reset_counters() {
        std::lock_guard<std::mutex> lock(mu_);
        counters_ = {};
    }

    std::shared_ptr<const KvCache<Real>> prefill(std::span<const int32_t> prompt) {
        if (static_cast<int>(prompt.size()) > params_->config.n_w)
            throw context_length_error("prompt length exceeds n_w");
        const uint64_t h = hash_mix(fnv1a(prompt.data(), prompt.size() * sizeof(int32_t)),
                                    prompt.size());
        std::shared_future<std::shared_ptr<const KvCache<Real>>> wait_on;
        {
            std::lock_guard<std::mutex> lock(mu_);
            auto it = store_.find(h);
            if (it != store_.end() && it->second->fingerprint == fingerprint_ &&
                std::equal(prompt.begin(), prompt.end(), it->second->prompt_tokens.begin(),
                           it->second->prompt_tokens.end())) {
                counters_.prefill_hits += 1;
                touch(h);
                return it->second;
            }
            auto inflight = inflight_.find(h);
            if (inflight != inflight_.end()) {
                counters_.prefill_hits += 1;  // coalesced request, no extra forward pass
                wait_on = inflight->second;
            } else {
                auto promise = std::make_shared<
                    std::promise<std::shared_ptr<const KvCache<Real>>>>();
                inflight_.emplace(h, promise->get_future().share());
                pending_[h] = promise;
                counters_.prefill_misses += 1;
            }
        }
        if (wait_on.valid()) return wait_on.get();

        auto cache = std::make_shared<KvCache<Real>>(compute_cache(prompt, h));
        {
            std::lock_guard<std::mutex> lock(mu_);
            store_[h] = cache;
            lru_.push_front(h);
            evict_if_needed();
            auto promise = pending_[h];
            pending_.erase(h);
            inflight_.erase(h);
            promise->set_value(cache);
        }
        return cache;
    }

    // Greedy decoding from a cached prompt. Token-for-token identical to
    // regreedy-decoding the full sequence without a cache.
    Generation decode_greedy(const KvCache<Real>& cache, std::span<const int32_t> query,
                             int max_new, int32_t stop_token) {
        check_cache(cache);
        Generation gen;
        if (max_new == 0) return gen;
        if (cache.len() + static_cast<int>(query.size()) > params_->config.n_w)
            throw context_length_error("query does not fit the context window");
        CacheView<Real> cv(&cache, params_->config.n_layers, params_->config.d_model);
        int pos = cache.len();
        std::vector<Real> logits = cache.last_logits;
        for (int32_t tok : query) logits = step(cv, tok, pos++);
        if (logits.empty()) throw contract_error("decoding with no context at all");
        gen.n2 = static_cast<int>(query.size());
        while (static_cast<int>(gen.tokens.size()) < max_new) {
            const auto [tok, lp] = argmax_logprob(logits);
            gen.tokens.push_back(tok);
            gen.logprobs.push_back(lp);
            gen.n2 += 1;
            const bool done = tok == stop_token;
            if (pos >= params_->config.n_w) {
                gen.truncated = !done && static_cast<int>(gen.tokens.size()) < max_new;
                break;
            }
            logits = step(cv, tok, pos++);
            if (done) break;
        }
        return gen;
    }

    // Length-normalized label log-likelihood scores, ranked best first with
    // deterministic index tie-breaking.
    std::vector<LabelScore<Real>> score_labels(
        const KvCache<Real>& cache, std::span<const int32_t> query,
        const std::vector<std::pair<std::string, std::vector<int32_t>>>& labels) {
        check_cache(cache);
        if (labels.empty()) throw contract_error("score_labels with empty label set");
        CacheView<Real> qv(&cache, params_->config.n_layers, params_->config.d_model);
        if (cache.len() + static_cast<int>(query.size()) > params_->config.n_w)
            throw context_length_error("query does not fit the context window");
        int pos = cache.len();
        std::vector<Real> logits = cache.last_logits;
        for (int32_t tok : query) logits = step(qv, tok, pos++);
        if (logits.empty()) throw contract_error("scoring with no context at all");

        std::vector<LabelScore<Real>> scores;
        for (size_t li = 0; li < labels.size(); ++li) {
            const auto& [text, toks] = labels[li];
            LabelScore<Real> s;
            s.index = static_cast<int>(li);
            s.label = text;
            if (toks.empty()) {
                s.ok = false;
                s.error = "label renders to no tokens";
                scores.push_back(std::move(s));
                continue;
            }
            if (pos + static_cast<int>(toks.size()) - 1 > params_->config.n_w) {
                s.ok = false;
                s.error = "label does not fit the context window";
                scores.push_back(std::move(s));
                continue;
            }
            CacheView<Real> lv = qv;  // fork the small extension, share the base
            std::vector<Real> cur = logits;
            int lpos = pos;
            double lp = 0.0;
            for (size_t j = 0; j < toks.size(); ++j) {
                lp += token_logprob(cur, toks[j]);
                if (j + 1 < toks.size()) cur = step(lv, toks[j], lpos++);
            }
            s.score = lp / static_cast<double>(toks.size());
            scores.push_back(std::move(s));
        }
        std::stable_sort(scores.begin(), scores.end(),
                         [](const LabelScore<Real>& a, const LabelScore<Real>& b) {
                             if (a.ok != b.ok) return a.ok;
                             if (a.score != b.score) return a.score > b.score;
                             return a.index < b.index;
                         });
        return scores;
    }

    // Logits after each continuation token, using the cache. Row j equals the
    // full-recompute logits at position len(prompt)+j.
    Tensor<Real> continuation_logits(const KvCache<Real>& cache,
                                     std::span<const int32_t> continuation) {
        check_cache(cache);
        if (cache.len() + static_cast<int>(continuation.size()) > params_->config.n_w)
            throw context_length_error("continuation does not fit the context window");
        CacheView<Real> cv(&cache, params_->config.n_layers, params_->config.d_model);
        int pos = cache.len();
        Tensor<Real> out = Tensor<Real>::zeros(
            {static_cast<int>(continuation.size()), params_->config.vocab_size});
        for (size_t i = 0; i < continuation.size(); ++i) {
            std::vector<Real> logits = step(cv, continuation[i], pos++);
            std::copy(logits.begin(), logits.end(), out.row_ptr(static_cast<int>(i)));
        }
        return out;
    }

    // One uncached pass over the whole sequence (fresh scratch state).
    Tensor<Real> full_logits(std::span<const int32_t> tokens) {
        if (static_cast<int>(tokens.size()) > params_->config.n_w)
            throw context_length_error("sequence exceeds n_w");
        CacheView<Real> cv(nullptr, params_->config.n_layers, params_->config.d_model);
        Tensor<Real> out =
            Tensor<Real>::zeros({static_cast<int>(tokens.size()), params_->config.vocab_size});
        int pos = 0;
        for (size_t i = 0; i < tokens.size(); ++i) {
            std::vector<Real> logits = step(cv, tokens[i], pos++);
            std::copy(logits.begin(), logits.end(), out.row_ptr(static_cast<int>(i)));
        }
        return out;
    }

private:
    const ModelParams<Real>* params_;
    const LoraAdapter<Real>* adapter_;
    EngineOptions opt_;
    uint64_t fingerprint_ = 0;

    mutable std::mutex mu_;
    EngineCounters counters_;
    std::unordered_map<uint64_t, std::shared_ptr<const KvCache<Real>>> store_;
    std::list<uint64_t> lru_;
    std::unordered_map<uint64_t,
                       std::shared_future<std::shared_ptr<const KvCache<Real>>>>
        inflight_;
    std::unordered_map<uint64_t,
                       std::shared_ptr<std::promise<std::shared_ptr<const KvCache<Real>>>>>
        pending_;

    void check_cache(const KvCache<Real>& cache) const {
        if (cache.fingerprint != fingerprint_)
            throw contract_error("cache was built for a different model/adapter");
    }

    void touch(uint64_t h) {
        lru_.remove(h);
        lru_.push_front(h);
    }
    void evict_if_needed() {
        if (opt_.max_cache_entries == 0) return;
        while (store_.size() > opt_.max_cache_entries && !lru_.empty()) {
            store_.erase(lru_.back());
            lru_.pop_back();
        }
    }

    KvCache<Real> compute_cache(std::span<const int32_t> prompt, uint64_t h) {
        KvCache<Real> cache;
        cache.prompt_tokens.assign(prompt.begin(), prompt.end());
        cache.prompt_hash = h;
        cache.fingerprint = fingerprint_;
        cache.d = params_->config.d_model;
        cache.k.resize(params_->config.n_layers);
        cache.v.resize(params_->config.n_layers);
        CacheView<Real> cv(nullptr, params_->config.n_layers, params_->config.d_model);
        int pos = 0;
        std::vector<Real> logits;
        for (int32_t tok : prompt) logits = step(cv, tok, pos++);
        for (int l = 0; l < params_->config.n_layers; ++l) {
            cache.k[l] = std::move(cv.k_ext[l]);
            cache.v[l] = std::move(cv.v_ext[l]);
        }
        cache.last_logits = std::move(logits);
        return cache;
    }

    static std::pair<int32_t, double> argmax_logprob(const std::vector<Real>& logits) {
        int32_t best = 0;
        for (size_t i = 1; i < logits.size(); ++i)
            if (logits[i] > logits[best]) best = static_cast<int32_t>(i);
        return {best, token_logprob(logits, best)};
    }

    static double token_logprob(const std::vector<Real>& logits, int32_t tok) {
        if (tok < 0 || tok >= static_cast<int32_t>(logits.size()))
            throw validation_error("token id out of vocab in scoring");
        const Real lse = log_sum_exp_row(logits.data(), static_cast<int>(logits.size()));
        return static_cast<double>(logits[tok] - lse);
    }

    void lora_matvec_acc(std::vector<Real>& y, const std::string& name,
                         const Real* x) const {
        if (!adapter_) return;
        const LoraPair<Real>* p = adapter_->pair_for(name);
        if (!p) return;
        std::vector<Real> mid(p->a.shape[0], Real(0));
        matvec_acc(mid.data(), p->a, x);
        std::vector<Real> up(p->b.shape[0], Real(0));
        matvec_acc(up.data(), p->b, mid.data());
        const Real s = adapter_->scaling();
        for (size_t i = 0; i < y.size(); ++i) y[i] += s * up[i];
    }

    static void layer_norm_vec(std::vector<Real>& x, const Tensor<Real>& g,
                               const Tensor<Real>& b, Real eps) {
        const int d = static_cast<int>(x.size());
        Real mean = Real(0);
        for (Real v : x) mean += v;
        mean /= Real(d);
        Real var = Real(0);
        for (Real v : x) {
            const Real c = v - mean;
            var += c * c;
        }
        var /= Real(d);
        const Real inv = Real(1) / std::sqrt(var + eps);
        for (int j = 0; j < d; ++j) x[j] = (x[j] - mean) * inv * g.data[j] + b.data[j];
    }

    static void rope_vec(Real* h, int dh, int pos) {
        for (int j = 0; j < dh; j += 2) {
            const double theta =
                static_cast<double>(pos) * std::pow(10000.0, -static_cast<double>(j) / dh);
            const Real c = static_cast<Real>(std::cos(theta));
            const Real s = static_cast<Real>(std::sin(theta));
            const Real a = h[j], b = h[j + 1];
            h[j] = a * c - b * s;
            h[j + 1] = a * s + b * c;
        }
    }

    // One incremental decoder step: consume `tok` at absolute position `pos`,
    // append its K/V to the view, return the next-token logits.
    std::vector<Real> step(CacheView<Real>& cv, int32_t tok, int pos) {
        const ModelConfig& cfg = params_->config;
        if (tok < 0 || tok >= cfg.vocab_size) throw validation_error("token id out of vocab");
        if (pos >= cfg.n_w) throw context_length_error("decode position beyond n_w");
        const int d = cfg.d_model;
        const int dh = cfg.head_dim();

        std::vector<Real> h(d);
        const Real* emb = params_->tok_embed.row_ptr(tok);
        std::copy(emb, emb + d, h.begin());
        if (cfg.positions == PosScheme::Learned) {
            const Real* pe = params_->pos_embed.row_ptr(pos);
            for (int j = 0; j < d; ++j) h[j] += pe[j];
        }

        for (int l = 0; l < cfg.n_layers; ++l) {
            const LayerParams<Real>& lp = params_->layers[l];
            const std::string pre = "layer" + std::to_string(l) + ".";
            std::vector<Real> xn = h;
            layer_norm_vec(xn, lp.ln1_g, lp.ln1_b, Real(cfg.layer_norm_eps));

            std::vector<Real> q(d, Real(0)), k(d, Real(0)), v(d, Real(0));
            matvec_acc(q.data(), lp.wq, xn.data());
            lora_matvec_acc(q, pre + "attn.wq", xn.data());
            matvec_acc(k.data(), lp.wk, xn.data());
            lora_matvec_acc(k, pre + "attn.wk", xn.data());
            matvec_acc(v.data(), lp.wv, xn.data());
            lora_matvec_acc(v, pre + "attn.wv", xn.data());
            if (cfg.positions == PosScheme::Rotary) {
                for (int hd = 0; hd < cfg.n_heads; ++hd) {
                    rope_vec(q.data() + hd * dh, dh, pos);
                    rope_vec(k.data() + hd * dh, dh, pos);
                }
            }
            cv.k_ext[l].insert(cv.k_ext[l].end(), k.begin(), k.end());
            cv.v_ext[l].insert(cv.v_ext[l].end(), v.begin(), v.end());

            const int len = cv.base_len() + static_cast<int>(cv.k_ext[l].size()) / d;
            if (l == 0) {
                std::lock_guard<std::mutex> lock(mu_);
                counters_.attn_pairs += static_cast<uint64_t>(len);
            }
            std::vector<Real> attn(d, Real(0));
            std::vector<Real> scores(len);
            const Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(dh));
            for (int hd = 0; hd < cfg.n_heads; ++hd) {
                const Real* qh = q.data() + hd * dh;
                for (int j = 0; j < len; ++j) {
                    const Real* kh = cv.key_row(l, j) + hd * dh;
                    Real s = Real(0);
                    for (int c = 0; c < dh; ++c) s += qh[c] * kh[c];
                    scores[j] = s * inv_sqrt;
                }
                Real mx = scores[0];
                for (int j = 1; j < len; ++j) mx = std::max(mx, scores[j]);
                Real sum = Real(0);
                for (int j = 0; j < len; ++j) {
                    scores[j] = std::exp(scores[j] - mx);
                    sum += scores[j];
                }
                const Real inv = Real(1) / sum;
                Real* out = attn.data() + hd * dh;
                for (int j = 0; j < len; ++j) {
                    const Real p = scores[j] * inv;
                    const Real* vh = cv.val_row(l, j) + hd * dh;
                    for (int c = 0; c < dh; ++c) out[c] += p * vh[c];
                }
            }
            std::vector<Real> proj(d, Real(0));
            matvec_acc(proj.data(), lp.wo, attn.data());
            lora_matvec_acc(proj, pre + "attn.wo", attn.data());
            for (int j = 0; j < d; ++j) h[j] += proj[j];

            std::vector<Real> xn2 = h;
            layer_norm_vec(xn2, lp.ln2_g, lp.ln2_b, Real(cfg.layer_norm_eps));
            std::vector<Real> mid(cfg.d_ff, Real(0));
            matvec_acc(mid.data(), lp.w1, xn2.data());
            lora_matvec_acc(mid, pre + "ffn.w1", xn2.data());
            for (auto& m : mid) m = gelu_fwd(m);
            std::vector<Real> ffn(d, Real(0));
            matvec_acc(ffn.data(), lp.w2, mid.data());
            lora_matvec_acc(ffn, pre + "ffn.w2", mid.data());
            for (int j = 0; j < d; ++j) h[j] += ffn[j];
        }

        layer_norm_vec(h, params_->lnf_g, params_->lnf_b, Real(cfg.layer_norm_eps));
        std::vector<Real> logits(cfg.vocab_size, Real(0));
        matvec_acc(logits.data(), params_->output_matrix(), h.data());
        {
            std::lock_guard<std::mutex> lock(mu_);
            counters_.positions_processed += 1;
        }
        return logits;
    }
};

// ---------------------------------------------------------------------------
// Prompted prediction: build the prompt with the training template, cache it,
// route classification to label scoring and generation to greedy decoding.
// ---------------------------------------------------------------------------

enum class DecisionRule { RankLabels, DecodeMatch };

inline const char* decision_rule_name(DecisionRule r) {
    return r == DecisionRule::RankLabels ? "rank" : "decode";
}
inline DecisionRule decision_rule_from_name(const std::string& s) {
    if (s == "rank") return DecisionRule::RankLabels;
    if (s == "decode") return DecisionRule::DecodeMatch;
    throw config_error("unknown decision rule '" + s + "'");
}

inline std::string trim_text(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\n\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\n\r");
    return s.substr(b, e - b + 1);
}

template <class Real>
std::vector<int32_t> build_prompt_tokens(const Tokenizer& tok, const PromptTemplate& tpl,
                                         const std::vector<Example>& context) {
    std::vector<int32_t> prompt = tok.encode(tpl.preamble);
    for (const Example& ex : context) {
        RenderedExample r = render_example(ex, tpl, tok);
        prompt.insert(prompt.end(), r.input_tokens.begin(), r.input_tokens.end());
        prompt.insert(prompt.end(), r.target_tokens.begin(), r.target_tokens.end());
    }
    return prompt;
}

template <class Real>
std::string generate_with_prompt(InferenceEngine<Real>& engine, const Tokenizer& tok,
                                 const PromptTemplate& tpl,
                                 const std::vector<Example>& context, const Example& query,
                                 const std::vector<std::string>& label_set,
                                 DecisionRule rule = DecisionRule::RankLabels,
                                 int max_new = 48) {
    auto prompt = build_prompt_tokens<Real>(tok, tpl, context);
    auto cache = engine.prefill(prompt);
    std::vector<int32_t> query_tokens = tok.encode(tpl.render_input(query));

    if (!label_set.empty() && rule == DecisionRule::RankLabels) {
        std::vector<std::pair<std::string, std::vector<int32_t>>> labels;
        for (const auto& l : label_set) labels.emplace_back(l, tok.encode(l));
        auto ranked = engine.score_labels(*cache, query_tokens, labels);
        if (ranked.empty() || !ranked.front().ok)
            throw validation_error("no label could be scored");
        return ranked.front().label;
    }

    const int32_t stop = stop_token_of(tpl, tok);
    Generation gen = engine.decode_greedy(*cache, query_tokens, max_new, stop);
    std::vector<int32_t> kept;
    for (int32_t t : gen.tokens) {
        if (t == stop) break;
        kept.push_back(t);
    }
    return trim_text(tok.decode(kept));
}

// ---------------------------------------------------------------------------
// Cache export in the checkpoint container format.
// ---------------------------------------------------------------------------

template <class Real>
void save_cache(const std::string& path, const KvCache<Real>& cache) {
    CheckpointFile f;
    f.kind = "kv_cache";
    f.meta["prompt_tokens"] = cache.prompt_tokens;
    f.meta["prompt_hash"] = cache.prompt_hash;
    f.meta["fingerprint"] = cache.fingerprint;
    f.meta["d"] = cache.d;
    f.meta["n_layers"] = cache.k.size();
    for (size_t l = 0; l < cache.k.size(); ++l) {
        Tensor<Real> kt = Tensor<Real>::matrix(cache.len(), cache.d, cache.k[l]);
        Tensor<Real> vt = Tensor<Real>::matrix(cache.len(), cache.d, cache.v[l]);
        f.tensors.push_back(to_record("k" + std::to_string(l), kt));
        f.tensors.push_back(to_record("v" + std::to_string(l), vt));
    }
    f.tensors.push_back(
        to_record("last_logits", Tensor<Real>::row_vector(cache.last_logits)));
    save_checkpoint(path, f);
}

template <class Real>
KvCache<Real> load_cache(const std::string& path) {
    CheckpointFile f = load_checkpoint(path);
    if (f.kind != "kv_cache") throw validation_error("checkpoint kind is not 'kv_cache'");
    KvCache<Real> cache;
    cache.prompt_tokens = f.meta.at("prompt_tokens").get<std::vector<int32_t>>();
    cache.prompt_hash = f.meta.at("prompt_hash").get<uint64_t>();
    cache.fingerprint = f.meta.at("fingerprint").get<uint64_t>();
    cache.d = f.meta.at("d").get<int>();
    const int layers = f.meta.at("n_layers").get<int>();
    for (int l = 0; l < layers; ++l) {
        cache.k.push_back(from_record<Real>(f.find("k" + std::to_string(l))).data);
        cache.v.push_back(from_record<Real>(f.find("v" + std::to_string(l))).data);
    }
    cache.last_logits = from_record<Real>(f.find("last_logits")).data;
    return cache;
}

}  // namespace icft
