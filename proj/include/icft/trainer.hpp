#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "icft/model.hpp"
#include "icft/optim.hpp"
#include "icft/packing.hpp"

namespace icft {

struct TrainConfig {
    MaskStrategy strategy = MaskStrategy::MaskAll;
    ShotRegime regime = ShotRegime::Many;
    int few_shot_k = 5;
    int steps = 200;
    double peak_lr = 3e-4;
    double floor_fraction = 0.1;
    double weight_decay = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double adam_eps = 1e-8;
    int global_batch = 8;
    int grad_accum = 4;
    int instances_per_task = 16;  // per-task quota when building the pool
    bool mask_last_all_prefixes = false;  // expand each instance into its prefixes
    uint64_t seed = 1;

    int micro_batch() const {
        if (global_batch % grad_accum != 0)
            throw config_error("global_batch must be divisible by grad_accum");
        return global_batch / grad_accum;
    }
    AdamHyper adam() const {
        AdamHyper h;
        h.lr = peak_lr;
        h.beta1 = beta1;
        h.beta2 = beta2;
        h.weight_decay = weight_decay;
        h.eps = adam_eps;
        return h;
    }
};

struct TrainReport {
    std::vector<double> step_losses;
    int64_t tokens_processed = 0;       // sum of instance lengths fed through
    int64_t loss_positions = 0;         // mask-true positions contributing to loss
    int64_t instances_processed = 0;
    std::map<std::string, int64_t> instances_per_task;
    std::string strategy;
    std::string regime;
    double wall_seconds = 0.0;  // reported separately from result files
};

// lr(0) = peak, lr(total) = peak * floor_fraction, cosine in between.
inline double cosine_lr(int step, int total_steps, double peak, double floor_fraction) {
    if (step < 0 || step > total_steps) throw contract_error("cosine_lr step out of range");
    const double floor = peak * floor_fraction;
    if (total_steps == 0) return peak;
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return floor + (peak - floor) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

template <class Real>
struct MaskedLoss {
    NodePtr<Real> loss;                    // scalar: mean CE over mask-true positions
    std::vector<Real> per_position;        // aligned with instance positions; 0 off-mask
    double total = 0.0;                    // unnormalized sum over mask-true positions
    int64_t positions = 0;
};

// Mean cross entropy over the strategy's mask positions. The loss at masked
// position t scores token t under the logits at t-1, so position 0 is never
// a loss position.
template <class Real>
MaskedLoss<Real> masked_loss(Graph<Real>& g, NodePtr<Real> logits, const PackedInstance& inst,
                             MaskStrategy strategy) {
    const int t = inst.length();
    if (logits->value.rank() != 2 || logits->value.shape[0] != t)
        throw contract_error("masked_loss logits length mismatch");
    std::vector<uint8_t> mask = build_loss_mask(inst, strategy);

    // targets for position i predict token i+1; -1 disables the position
    std::vector<int32_t> shifted(t, -1);
    std::vector<Real> weights(t, Real(0));
    int64_t positions = 0;
    for (int i = 1; i < t; ++i) {
        if (mask[i]) {
            shifted[i - 1] = inst.tokens[i];
            weights[i - 1] = Real(1);
            positions += 1;
        }
    }
    if (positions == 0) throw contract_error("masked_loss with empty mask");

    NodePtr<Real> per_tok = g.cross_entropy_per_token(logits, shifted);
    MaskedLoss<Real> out;
    out.loss = g.masked_mean(per_tok, weights);
    out.positions = positions;
    out.per_position.assign(t, Real(0));
    for (int i = 1; i < t; ++i) {
        if (mask[i]) {
            out.per_position[i] = per_tok->value.data[i - 1];
            out.total += static_cast<double>(per_tok->value.data[i - 1]);
        }
    }
    return out;
}

struct StepMetrics {
    double loss = 0.0;
    double lr = 0.0;
    int64_t tokens = 0;
    int64_t loss_positions = 0;
};

// One optimizer step over a batch of instances with gradient accumulation.
// Only adapter tensors change; base weights stay bit-identical.
template <class Real>
StepMetrics train_step(const ModelParams<Real>& params, LoraAdapter<Real>& adapter,
                       const std::vector<const PackedInstance*>& batch, const TrainConfig& cfg,
                       AdamOpt<Real>& opt, double lr) {
    if (batch.empty()) throw contract_error("train_step with empty batch");
    StepMetrics metrics;
    metrics.lr = lr;

    std::map<std::string, Tensor<Real>> grad_sum;
    adapter.visit([&](const std::string& n, Tensor<Real>& t) {
        grad_sum.emplace(n, Tensor<Real>::zeros(t.shape));
    });

    double loss_sum = 0.0;
    for (const PackedInstance* inst : batch) {
        Graph<Real> g;
        g.check_finite = false;  // the loss scalar is checked below
        auto fw = forward_logits_graph(g, params, &adapter,
                                       std::span<const int32_t>(inst->tokens), TrainScope::Adapter);
        MaskedLoss<Real> ml = masked_loss(g, fw.logits, *inst, cfg.strategy);
        const double loss = static_cast<double>(ml.loss->value.data[0]);
        if (!std::isfinite(loss))
            throw numeric_error("NaN/Inf loss on task '" + inst->task_id + "' (len " +
                                std::to_string(inst->length()) + ")");
        loss_sum += loss;
        backward(ml.loss);
        for (auto& [name, sum] : grad_sum) {
            auto it = fw.leaves.find(name);
            if (it == fw.leaves.end() || it->second->grad.data.empty()) continue;
            for (size_t i = 0; i < sum.data.size(); ++i)
                sum.data[i] += it->second->grad.data[i];
        }
        metrics.tokens += inst->length();
        metrics.loss_positions += ml.positions;
    }

    const Real inv = Real(1) / static_cast<Real>(batch.size());
    adapter.visit([&](const std::string& n, Tensor<Real>& t) {
        Tensor<Real>& gsum = grad_sum.at(n);
        for (auto& v : gsum.data) v *= inv;
        opt.step(n, t, gsum, lr);
    });
    metrics.loss = loss_sum / static_cast<double>(batch.size());
    return metrics;
}

// ---------------------------------------------------------------------------
// Meta-training over a multi-task corpus
// ---------------------------------------------------------------------------

struct MetaCorpus {
    // task id -> training example pool (re-drawn per instance from here)
    std::map<std::string, std::vector<Example>> task_pools;
    std::map<std::string, std::string> task_category;
    PromptTemplate tpl;
};

// Per-task quota of packed instances honoring the regime, examples re-drawn
// per instance (stratified when the task carries labels).
template <class Real>
std::vector<PackedInstance> build_instance_pool(const MetaCorpus& corpus, const Tokenizer& tok,
                                                int n_w, const TrainConfig& cfg) {
    std::vector<PackedInstance> pool;
    Packer packer(tok, corpus.tpl, n_w, cfg.strategy);
    for (const auto& [task_id, examples] : corpus.task_pools) {
        if (examples.empty()) throw validation_error("task '" + task_id + "' has no examples");
        const bool labeled = !examples.front().label_set.empty();
        for (int i = 0; i < cfg.instances_per_task; ++i) {
            Rng rng(derive_seed(cfg.seed, "instance", task_id, i));
            PackReport scratch;
            // oversample the draw; the packer stops at the window boundary
            const int want = cfg.regime == ShotRegime::Many
                                 ? n_w
                                 : (cfg.regime == ShotRegime::Few ? cfg.few_shot_k + 1 : 1);
            std::vector<Example> drawn =
                labeled ? stratified_sample(examples, want, rng)
                        : uniform_sample(examples, want, rng);
            auto stream = stream_of(std::move(drawn));
            std::optional<PackedInstance> inst;
            if (cfg.regime == ShotRegime::Many) {
                inst = packer.next_max_context(stream, scratch);
            } else {
                inst = packer.next_fixed_shots(stream, cfg.regime == ShotRegime::Few
                                                           ? cfg.few_shot_k
                                                           : 0,
                                               scratch);
            }
            if (!inst) throw validation_error("packing produced no instance for " + task_id);
            inst->task_id = task_id;
            pool.push_back(std::move(*inst));
        }
    }
    return pool;
}

// Multi-task masked fine-tuning on held-in tasks. Aborts when an instance's
// task id appears in the exclusion list (held-out leakage).
template <class Real>
TrainReport run_meta_training(const MetaCorpus& corpus, const Tokenizer& tok,
                              const ModelParams<Real>& params, LoraAdapter<Real>& adapter,
                              const TrainConfig& cfg,
                              const std::set<std::string>& held_out_ids) {
    for (const auto& [task_id, _] : corpus.task_pools)
        if (held_out_ids.count(task_id))
            throw contract_error("held-out task '" + task_id + "' leaked into training corpus");

    TrainReport report;
    report.strategy = mask_strategy_name(cfg.strategy);
    report.regime = shot_regime_name(cfg.regime);
    if (cfg.steps == 0) return report;

    std::vector<PackedInstance> pool = build_instance_pool<Real>(corpus, tok, params.config.n_w, cfg);
    if (cfg.strategy == MaskStrategy::MaskLast && cfg.mask_last_all_prefixes) {
        std::vector<PackedInstance> expanded;
        for (const auto& inst : pool)
            for (int e = 1; e <= static_cast<int>(inst.boundaries.size()); ++e)
                expanded.push_back(prefix_instance(inst, e));
        pool = std::move(expanded);
    }
    for (const auto& inst : pool) report.instances_per_task[inst.task_id] += 1;

    Rng order_rng(derive_seed(cfg.seed, "order"));
    std::vector<size_t> order(pool.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    order_rng.shuffle(order.begin(), order.end());

    AdamOpt<Real> opt;
    opt.hyper = cfg.adam();
    size_t cursor = 0;
    auto next_instance = [&]() -> const PackedInstance* {
        if (cursor >= order.size()) {
            order_rng.shuffle(order.begin(), order.end());
            cursor = 0;
        }
        return &pool[order[cursor++]];
    };

    for (int s = 0; s < cfg.steps; ++s) {
        std::vector<const PackedInstance*> batch;
        for (int b = 0; b < cfg.global_batch; ++b) batch.push_back(next_instance());
        const double lr = cosine_lr(s, cfg.steps, cfg.peak_lr, cfg.floor_fraction);
        StepMetrics m = train_step(params, adapter, batch, cfg, opt, lr);
        report.step_losses.push_back(m.loss);
        report.tokens_processed += m.tokens;
        report.loss_positions += m.loss_positions;
        report.instances_processed += static_cast<int64_t>(batch.size());
    }
    return report;
}

}  // namespace icft
