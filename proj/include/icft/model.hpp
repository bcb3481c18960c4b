#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "icft/autodiff.hpp"
#include "icft/checkpoint.hpp"
#include "icft/rng.hpp"
#include "icft/tensor.hpp"

namespace icft {

enum class PosScheme { Learned, Rotary };

inline const char* pos_scheme_name(PosScheme p) {
    return p == PosScheme::Learned ? "learned" : "rotary";
}
inline PosScheme pos_scheme_from_name(const std::string& s) {
    if (s == "learned") return PosScheme::Learned;
    if (s == "rotary") return PosScheme::Rotary;
    throw config_error("unknown positional scheme '" + s + "'");
}

struct ModelConfig {
    int vocab_size = 512;
    int d_model = 128;
    int n_layers = 4;
    int n_heads = 4;
    int d_ff = 512;
    int n_w = 512;  // maximum tokens in the context window
    PosScheme positions = PosScheme::Learned;
    bool tie_embeddings = false;
    double layer_norm_eps = 1e-5;

    int head_dim() const { return d_model / n_heads; }
    void validate() const {
        if (d_model % n_heads != 0) throw config_error("d_model must be divisible by n_heads");
        if (n_w < 64) throw config_error("n_w must be at least 64");
        if (vocab_size < 1 || n_layers < 1 || d_ff < 1) throw config_error("bad model config");
        if (positions == PosScheme::Rotary && head_dim() % 2 != 0)
            throw config_error("rotary needs an even head_dim");
    }
    bool operator==(const ModelConfig&) const = default;
};

template <class Real>
struct LayerParams {
    Tensor<Real> wq, wk, wv, wo;    // [d, d]
    Tensor<Real> w1;                // [d_ff, d]
    Tensor<Real> w2;                // [d, d_ff]
    Tensor<Real> ln1_g, ln1_b, ln2_g, ln2_b;  // [d]
};

template <class Real>
struct ModelParams {
    ModelConfig config;
    Tensor<Real> tok_embed;  // [V, d]
    Tensor<Real> pos_embed;  // [n_w, d]; empty under rotary positions
    std::vector<LayerParams<Real>> layers;
    Tensor<Real> lnf_g, lnf_b;  // [d]
    Tensor<Real> w_out;         // [V, d]; empty when tied to tok_embed

    static ModelParams init(const ModelConfig& cfg, uint64_t seed) {
        cfg.validate();
        Rng rng(derive_seed(seed, "model-init"));
        const Real std_w = Real(0.02);
        ModelParams p;
        p.config = cfg;
        p.tok_embed = Tensor<Real>::randn({cfg.vocab_size, cfg.d_model}, rng, std_w);
        if (cfg.positions == PosScheme::Learned)
            p.pos_embed = Tensor<Real>::randn({cfg.n_w, cfg.d_model}, rng, std_w);
        for (int l = 0; l < cfg.n_layers; ++l) {
            LayerParams<Real> lp;
            lp.wq = Tensor<Real>::randn({cfg.d_model, cfg.d_model}, rng, std_w);
            lp.wk = Tensor<Real>::randn({cfg.d_model, cfg.d_model}, rng, std_w);
            lp.wv = Tensor<Real>::randn({cfg.d_model, cfg.d_model}, rng, std_w);
            lp.wo = Tensor<Real>::randn({cfg.d_model, cfg.d_model}, rng, std_w);
            lp.w1 = Tensor<Real>::randn({cfg.d_ff, cfg.d_model}, rng, std_w);
            lp.w2 = Tensor<Real>::randn({cfg.d_model, cfg.d_ff}, rng, std_w);
            lp.ln1_g = Tensor<Real>::full({cfg.d_model}, Real(1));
            lp.ln1_b = Tensor<Real>::zeros({cfg.d_model});
            lp.ln2_g = Tensor<Real>::full({cfg.d_model}, Real(1));
            lp.ln2_b = Tensor<Real>::zeros({cfg.d_model});
            p.layers.push_back(std::move(lp));
        }
        p.lnf_g = Tensor<Real>::full({cfg.d_model}, Real(1));
        p.lnf_b = Tensor<Real>::zeros({cfg.d_model});
        if (!cfg.tie_embeddings)
            p.w_out = Tensor<Real>::randn({cfg.vocab_size, cfg.d_model}, rng, std_w);
        return p;
    }

    template <class Fn>
    void visit(Fn&& fn) {
        fn("tok_embed", tok_embed);
        if (config.positions == PosScheme::Learned) fn("pos_embed", pos_embed);
        for (size_t l = 0; l < layers.size(); ++l) {
            const std::string pre = "layer" + std::to_string(l) + ".";
            fn(pre + "attn.wq", layers[l].wq);
            fn(pre + "attn.wk", layers[l].wk);
            fn(pre + "attn.wv", layers[l].wv);
            fn(pre + "attn.wo", layers[l].wo);
            fn(pre + "ffn.w1", layers[l].w1);
            fn(pre + "ffn.w2", layers[l].w2);
            fn(pre + "ln1.g", layers[l].ln1_g);
            fn(pre + "ln1.b", layers[l].ln1_b);
            fn(pre + "ln2.g", layers[l].ln2_g);
            fn(pre + "ln2.b", layers[l].ln2_b);
        }
        fn("lnf.g", lnf_g);
        fn("lnf.b", lnf_b);
        if (!config.tie_embeddings) fn("w_out", w_out);
    }
    template <class Fn>
    void visit(Fn&& fn) const {
        const_cast<ModelParams*>(this)->visit(
            [&](const std::string& n, Tensor<Real>& t) { fn(n, static_cast<const Tensor<Real>&>(t)); });
    }

    int64_t param_count() const {
        int64_t n = 0;
        visit([&](const std::string&, const Tensor<Real>& t) { n += t.numel(); });
        return n;
    }

    uint64_t content_hash() const {
        uint64_t h = fnv1a("model");
        visit([&](const std::string& name, const Tensor<Real>& t) {
            h = hash_mix(h, fnv1a(name));
            h = hash_mix(h, fnv1a(t.data.data(), t.data.size() * sizeof(Real)));
        });
        return h;
    }

    const Tensor<Real>& output_matrix() const {
        return config.tie_embeddings ? tok_embed : w_out;
    }
};

// ---------------------------------------------------------------------------
// LoRA
// ---------------------------------------------------------------------------

struct LoraConfig {
    int rank = 8;
    double alpha = 16.0;
    std::vector<std::string> targets = {"attn.wq", "attn.wv"};  // per-layer target names
};

template <class Real>
struct LoraPair {
    Tensor<Real> a;  // [r, d_in]
    Tensor<Real> b;  // [d_out, r], zero-initialized so the delta starts at 0
};

template <class Real>
struct LoraAdapter {
    int rank = 8;
    double alpha = 16.0;
    std::map<std::string, LoraPair<Real>> pairs;  // keyed "layerN.attn.wq" etc.

    Real scaling() const { return static_cast<Real>(alpha / rank); }

    static LoraAdapter init(const ModelConfig& cfg, const LoraConfig& lc, uint64_t seed) {
        if (lc.rank < 1) throw config_error("lora rank must be >= 1");
        static const std::map<std::string, std::pair<int, int>> kTargetDims = {
            {"attn.wq", {0, 0}}, {"attn.wk", {0, 0}}, {"attn.wv", {0, 0}}, {"attn.wo", {0, 0}},
            {"ffn.w1", {1, 0}},  {"ffn.w2", {0, 1}},
        };
        Rng rng(derive_seed(seed, "lora-init"));
        LoraAdapter ad;
        ad.rank = lc.rank;
        ad.alpha = lc.alpha;
        for (int l = 0; l < cfg.n_layers; ++l) {
            for (const auto& t : lc.targets) {
                auto it = kTargetDims.find(t);
                if (it == kTargetDims.end())
                    throw config_error("unknown LoRA target '" + t + "'");
                // dims flags: {out is d_ff?, in is d_ff?}
                const int d_out = it->second.first ? cfg.d_ff : cfg.d_model;
                const int d_in = it->second.second ? cfg.d_ff : cfg.d_model;
                LoraPair<Real> p;
                p.a = Tensor<Real>::randn({lc.rank, d_in}, rng, Real(0.02));
                p.b = Tensor<Real>::zeros({d_out, lc.rank});
                ad.pairs["layer" + std::to_string(l) + "." + t] = std::move(p);
            }
        }
        return ad;
    }

    template <class Fn>
    void visit(Fn&& fn) {
        for (auto& [name, p] : pairs) {
            fn("lora." + name + ".a", p.a);
            fn("lora." + name + ".b", p.b);
        }
    }
    template <class Fn>
    void visit(Fn&& fn) const {
        const_cast<LoraAdapter*>(this)->visit(
            [&](const std::string& n, Tensor<Real>& t) { fn(n, static_cast<const Tensor<Real>&>(t)); });
    }

    int64_t param_count() const {
        int64_t n = 0;
        visit([&](const std::string&, const Tensor<Real>& t) { n += t.numel(); });
        return n;
    }

    uint64_t content_hash() const {
        uint64_t h = fnv1a("adapter");
        visit([&](const std::string& name, const Tensor<Real>& t) {
            h = hash_mix(h, fnv1a(name));
            h = hash_mix(h, fnv1a(t.data.data(), t.data.size() * sizeof(Real)));
        });
        return h;
    }

    const LoraPair<Real>* pair_for(const std::string& weight_name) const {
        auto it = pairs.find(weight_name);
        return it == pairs.end() ? nullptr : &it->second;
    }
};

// Dense delta (alpha/r) * B * A for one pair.
template <class Real>
Tensor<Real> lora_delta(const LoraPair<Real>& p, Real scaling) {
    Tensor<Real> d = matmul(p.b, p.a);
    for (auto& v : d.data) v *= scaling;
    return d;
}

// Effective dense weights W + (alpha/r) B A for every targeted matrix.
// The base params are untouched; the result maps weight name to W_eff.
template <class Real>
std::map<std::string, Tensor<Real>> apply_lora(const ModelParams<Real>& params,
                                               const LoraAdapter<Real>& adapter) {
    std::map<std::string, Tensor<Real>> eff;
    std::map<std::string, const Tensor<Real>*> base;
    params.visit([&](const std::string& n, const Tensor<Real>& t) { base[n] = &t; });
    for (const auto& [name, pair] : adapter.pairs) {
        auto it = base.find(name);
        if (it == base.end())
            throw config_error("LoRA target '" + name + "' not present in model");
        Tensor<Real> w = *it->second;
        Tensor<Real> d = lora_delta(pair, adapter.scaling());
        if (!w.same_shape(d))
            throw config_error("LoRA delta shape mismatch for '" + name + "'");
        for (size_t i = 0; i < w.data.size(); ++i) w.data[i] += d.data[i];
        eff.emplace(name, std::move(w));
    }
    return eff;
}

// Merged copy of the model with adapter deltas folded in.
template <class Real>
ModelParams<Real> merge_lora(const ModelParams<Real>& params, const LoraAdapter<Real>& adapter) {
    ModelParams<Real> merged = params;
    auto eff = apply_lora(params, adapter);
    merged.visit([&](const std::string& n, Tensor<Real>& t) {
        auto it = eff.find(n);
        if (it != eff.end()) t = it->second;
    });
    return merged;
}

// ---------------------------------------------------------------------------
// Graph forward pass (training and oracle path)
// ---------------------------------------------------------------------------

enum class TrainScope { None, Adapter, Base };

template <class Real>
struct ForwardGraph {
    NodePtr<Real> logits;  // [T, V]
    std::map<std::string, NodePtr<Real>> leaves;  // trainable tensors by name
};

namespace detail {

// Projection y = x W^T with optional LoRA low-rank path.
template <class Real>
NodePtr<Real> project(Graph<Real>& g, NodePtr<Real> x, NodePtr<Real> w,
                      const NodePtr<Real>* la, const NodePtr<Real>* lb, Real scaling) {
    NodePtr<Real> y = g.matmul_nt(x, w);
    if (la && lb) {
        NodePtr<Real> low = g.matmul_nt(g.matmul_nt(x, *la), *lb);
        y = g.add(y, g.scale(low, scaling));
    }
    return y;
}

}  // namespace detail

// Builds the causal transformer forward graph over `tokens`. Base weights
// become trainable leaves under TrainScope::Base, adapter tensors under
// TrainScope::Adapter; everything else enters the graph as constants.
// attn_pair_counter, when given, accumulates (query, key) pairs for layer 0.
template <class Real>
ForwardGraph<Real> forward_logits_graph(Graph<Real>& g, const ModelParams<Real>& params,
                                        const LoraAdapter<Real>* adapter,
                                        std::span<const int32_t> tokens, TrainScope scope,
                                        uint64_t* attn_pair_counter = nullptr) {
    const ModelConfig& cfg = params.config;
    const int t = static_cast<int>(tokens.size());
    if (t == 0) throw contract_error("forward on empty token sequence");
    if (t > cfg.n_w)
        throw context_length_error("sequence length " + std::to_string(t) + " exceeds n_w=" +
                                   std::to_string(cfg.n_w));
    for (int32_t id : tokens)
        if (id < 0 || id >= cfg.vocab_size) throw validation_error("token id out of vocab");

    ForwardGraph<Real> out;
    const bool train_base = scope == TrainScope::Base;
    const bool train_adapter = scope == TrainScope::Adapter;

    std::map<std::string, NodePtr<Real>> nodes;
    params.visit([&](const std::string& n, const Tensor<Real>& w) {
        nodes[n] = g.leaf(w, train_base);
        if (train_base) out.leaves[n] = nodes[n];
    });
    std::map<std::string, std::pair<NodePtr<Real>, NodePtr<Real>>> lora_nodes;
    if (adapter) {
        for (const auto& [name, pair] : adapter->pairs) {
            if (!nodes.count(name))
                throw config_error("LoRA target '" + name + "' not present in model");
            auto a = g.leaf(pair.a, train_adapter);
            auto b = g.leaf(pair.b, train_adapter);
            lora_nodes[name] = {a, b};
            if (train_adapter) {
                out.leaves["lora." + name + ".a"] = a;
                out.leaves["lora." + name + ".b"] = b;
            }
        }
    }
    auto lora_of = [&](const std::string& name) -> std::pair<const NodePtr<Real>*, const NodePtr<Real>*> {
        auto it = lora_nodes.find(name);
        if (it == lora_nodes.end()) return {nullptr, nullptr};
        return {&it->second.first, &it->second.second};
    };
    const Real scaling = adapter ? adapter->scaling() : Real(0);

    NodePtr<Real> h = g.embedding(nodes["tok_embed"], tokens);
    if (cfg.positions == PosScheme::Learned) {
        std::vector<int32_t> pos_ids(t);
        for (int i = 0; i < t; ++i) pos_ids[i] = i;
        h = g.add(h, g.embedding(nodes["pos_embed"], pos_ids));
    }

    const int dh = cfg.head_dim();
    const Real inv_sqrt_dh = Real(1) / std::sqrt(static_cast<Real>(dh));
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        NodePtr<Real> xn = g.layer_norm(h, nodes[pre + "ln1.g"], nodes[pre + "ln1.b"],
                                        Real(cfg.layer_norm_eps));
        auto [qa, qb] = lora_of(pre + "attn.wq");
        auto [ka, kb] = lora_of(pre + "attn.wk");
        auto [va, vb] = lora_of(pre + "attn.wv");
        auto [oa, ob] = lora_of(pre + "attn.wo");
        NodePtr<Real> q = detail::project(g, xn, nodes[pre + "attn.wq"], qa, qb, scaling);
        NodePtr<Real> k = detail::project(g, xn, nodes[pre + "attn.wk"], ka, kb, scaling);
        NodePtr<Real> v = detail::project(g, xn, nodes[pre + "attn.wv"], va, vb, scaling);

        std::vector<NodePtr<Real>> head_outs;
        for (int hd = 0; hd < cfg.n_heads; ++hd) {
            NodePtr<Real> qh = g.slice_cols(q, hd * dh, dh);
            NodePtr<Real> kh = g.slice_cols(k, hd * dh, dh);
            if (cfg.positions == PosScheme::Rotary) {
                qh = g.rope(qh, 0);
                kh = g.rope(kh, 0);
            }
            NodePtr<Real> vh = g.slice_cols(v, hd * dh, dh);
            NodePtr<Real> scores = g.scale(g.matmul_nt(qh, kh), inv_sqrt_dh);
            uint64_t* ctr = (l == 0 && hd == 0) ? attn_pair_counter : nullptr;
            NodePtr<Real> probs = g.causal_softmax(scores, ctr);
            head_outs.push_back(g.matmul(probs, vh));
        }
        NodePtr<Real> concat = g.concat_cols(head_outs);
        NodePtr<Real> attn_out = detail::project(g, concat, nodes[pre + "attn.wo"], oa, ob, scaling);
        h = g.add(h, attn_out);

        NodePtr<Real> xn2 = g.layer_norm(h, nodes[pre + "ln2.g"], nodes[pre + "ln2.b"],
                                         Real(cfg.layer_norm_eps));
        auto [f1a, f1b] = lora_of(pre + "ffn.w1");
        auto [f2a, f2b] = lora_of(pre + "ffn.w2");
        NodePtr<Real> mid = g.gelu(detail::project(g, xn2, nodes[pre + "ffn.w1"], f1a, f1b, scaling));
        NodePtr<Real> ffn_out = detail::project(g, mid, nodes[pre + "ffn.w2"], f2a, f2b, scaling);
        h = g.add(h, ffn_out);
    }

    NodePtr<Real> hn = g.layer_norm(h, nodes["lnf.g"], nodes["lnf.b"], Real(cfg.layer_norm_eps));
    NodePtr<Real> w_out = cfg.tie_embeddings ? nodes["tok_embed"] : nodes["w_out"];
    out.logits = g.matmul_nt(hn, w_out);
    return out;
}

// Plain logits without gradient bookkeeping.
template <class Real>
Tensor<Real> forward_logits(const ModelParams<Real>& params, const LoraAdapter<Real>* adapter,
                            std::span<const int32_t> tokens,
                            uint64_t* attn_pair_counter = nullptr) {
    Graph<Real> g;
    auto fw = forward_logits_graph(g, params, adapter, tokens, TrainScope::None,
                                   attn_pair_counter);
    return fw.logits->value;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

template <class Real>
void save_model(const std::string& path, const ModelParams<Real>& params) {
    CheckpointFile f;
    f.kind = "model";
    f.meta["vocab_size"] = params.config.vocab_size;
    f.meta["d_model"] = params.config.d_model;
    f.meta["n_layers"] = params.config.n_layers;
    f.meta["n_heads"] = params.config.n_heads;
    f.meta["d_ff"] = params.config.d_ff;
    f.meta["n_w"] = params.config.n_w;
    f.meta["positions"] = pos_scheme_name(params.config.positions);
    f.meta["tie_embeddings"] = params.config.tie_embeddings;
    f.meta["layer_norm_eps"] = params.config.layer_norm_eps;
    params.visit([&](const std::string& n, const Tensor<Real>& t) {
        f.tensors.push_back(to_record(n, t));
    });
    save_checkpoint(path, f);
}

template <class Real>
ModelParams<Real> load_model(const std::string& path) {
    CheckpointFile f = load_checkpoint(path);
    if (f.kind != "model") throw validation_error("checkpoint kind is not 'model'");
    ModelConfig cfg;
    cfg.vocab_size = f.meta.at("vocab_size").get<int>();
    cfg.d_model = f.meta.at("d_model").get<int>();
    cfg.n_layers = f.meta.at("n_layers").get<int>();
    cfg.n_heads = f.meta.at("n_heads").get<int>();
    cfg.d_ff = f.meta.at("d_ff").get<int>();
    cfg.n_w = f.meta.at("n_w").get<int>();
    cfg.positions = pos_scheme_from_name(f.meta.at("positions").get<std::string>());
    cfg.tie_embeddings = f.meta.at("tie_embeddings").get<bool>();
    cfg.layer_norm_eps = f.meta.at("layer_norm_eps").get<double>();
    ModelParams<Real> p = ModelParams<Real>::init(cfg, 0);
    p.visit([&](const std::string& n, Tensor<Real>& t) {
        Tensor<Real> loaded = from_record<Real>(f.find(n));
        if (!loaded.same_shape(t))
            throw validation_error("checkpoint tensor '" + n + "' has wrong shape");
        t = std::move(loaded);
    });
    return p;
}

template <class Real>
void save_adapter(const std::string& path, const LoraAdapter<Real>& adapter) {
    CheckpointFile f;
    f.kind = "adapter";
    f.meta["rank"] = adapter.rank;
    f.meta["alpha"] = adapter.alpha;
    auto targets = nlohmann::json::array();
    for (const auto& [name, _] : adapter.pairs) targets.push_back(name);
    f.meta["pairs"] = targets;
    adapter.visit([&](const std::string& n, const Tensor<Real>& t) {
        f.tensors.push_back(to_record(n, t));
    });
    save_checkpoint(path, f);
}

template <class Real>
LoraAdapter<Real> load_adapter(const std::string& path) {
    CheckpointFile f = load_checkpoint(path);
    if (f.kind != "adapter") throw validation_error("checkpoint kind is not 'adapter'");
    LoraAdapter<Real> ad;
    ad.rank = f.meta.at("rank").get<int>();
    ad.alpha = f.meta.at("alpha").get<double>();
    for (const auto& name : f.meta.at("pairs")) {
        const std::string key = name.get<std::string>();
        LoraPair<Real> p;
        p.a = from_record<Real>(f.find("lora." + key + ".a"));
        p.b = from_record<Real>(f.find("lora." + key + ".b"));
        ad.pairs[key] = std::move(p);
    }
    return ad;
}

}  // namespace icft
