#include "icft/cost_model.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "icft/errors.hpp"

namespace icft {

double parse_scaled(const std::string& text, bool binary_k) {
    if (text.empty()) throw config_error("empty number");
    size_t pos = 0;
    double v;
    try {
        v = std::stod(text, &pos);
    } catch (const std::exception&) {
        throw config_error("bad number '" + text + "'");
    }
    std::string suffix = text.substr(pos);
    const double k = binary_k ? 1024.0 : 1000.0;
    if (suffix.empty()) return v;
    if (suffix == "K" || suffix == "k") return v * k;
    if (suffix == "M" || suffix == "m") return v * k * k;
    if (suffix == "B" || suffix == "b" || suffix == "G" || suffix == "g") return v * k * k * k;
    throw config_error("unknown scale suffix '" + suffix + "'");
}

std::string format_scaled(double v) {
    std::ostringstream os;
    os << std::setprecision(3);
    if (v >= 1e9) {
        os << v / 1e9 << "B";
    } else if (v >= 1e6) {
        os << v / 1e6 << "M";
    } else if (v >= 1e3) {
        os << v / 1e3 << "K";
    } else {
        os << v;
    }
    return os.str();
}

double training_tokens(MaskStrategy strategy, MaskLastMode mode, const CostParams& p) {
    switch (strategy) {
        case MaskStrategy::MaskAll:
        case MaskStrategy::Autoregressive:
            // one packed window per instance
            return p.n_meta * p.n_w;
        case MaskStrategy::MaskLast: {
            if (p.shots <= 0) throw config_error("mask-last token count needs shots > 0");
            if (mode == MaskLastMode::PaperConvention) return p.n_meta * p.n_w * p.shots;
            // n+1 growing prefixes of uniform example length n_w/(n+1):
            // sum_j j*n_w/(n+1) for j=1..n+1 = n_w*(n+2)/2
            const double m = p.shots + 1.0;
            return p.n_meta * p.n_w * (m + 1.0) / 2.0;
        }
    }
    throw config_error("unknown strategy");
}

double task_level_tokens(const CostParams& p) { return p.n_tasks * p.n_t * p.m_task; }

InferenceCost inference_complexity(const CostParams& p) {
    if (p.shots <= 0) throw config_error("inference complexity needs shots > 0");
    const double unit = (p.n_x + p.n_y) * (p.n_x + p.n_y);
    InferenceCost c;
    c.few_cost = p.few_k * p.few_k * unit;
    c.many_no_cache_cost = p.shots * p.shots * unit;
    c.many_cache_cost = p.shots * unit;
    c.few_relative = (p.few_k / p.shots) * (p.few_k / p.shots);
    c.cache_relative = 1.0 / p.shots;
    return c;
}

CostReport cost_report(const CostParams& p) {
    CostReport r;
    r.params = p;
    r.mask_all_tokens = training_tokens(MaskStrategy::MaskAll, MaskLastMode::PaperConvention, p);
    r.autoregressive_tokens = r.mask_all_tokens;
    if (p.shots > 0) {
        r.mask_last_tokens_paper =
            training_tokens(MaskStrategy::MaskLast, MaskLastMode::PaperConvention, p);
        r.mask_last_tokens_exact =
            training_tokens(MaskStrategy::MaskLast, MaskLastMode::ExactPrefixSum, p);
        if (r.mask_all_tokens > 0)
            r.mask_last_over_mask_all = r.mask_last_tokens_paper / r.mask_all_tokens;
        r.inference = inference_complexity(p);
    }
    r.task_level_tokens = icft::task_level_tokens(p);
    if (r.mask_all_tokens > 0) r.task_over_meta_tokens = r.task_level_tokens / r.mask_all_tokens;
    r.adapters_task_level = p.n_tasks;
    r.adapters_meta = 1;
    r.dev_hours_task_level = p.n_tasks * p.t_sft_hours;
    r.dev_hours_meta = p.t_meta_hours;
    if (p.t_meta_hours > 0) r.dev_time_ratio = r.dev_hours_task_level / p.t_meta_hours;

    r.notes.push_back(
        "shot count enters the printed arithmetic as n=106 while the text says n=100 with "
        "approximately 212 average shots; the printed product is reproduced here");
    r.notes.push_back(
        "development-time ratio computes to " +
        ([](double v) {
            std::ostringstream os;
            os << std::setprecision(3) << v;
            return os.str();
        })(r.dev_time_ratio) +
        "x; the source text rounds this to a 13 times decrease");
    r.notes.push_back(
        "kv-cache latency ratios 0.51x/0.11x and the 0.1x cache-load cost are measured "
        "values cited from external work, stored as constants");
    return r;
}

nlohmann::json cost_report_json(const CostReport& r) {
    nlohmann::json j;
    j["params"]["n_meta"] = r.params.n_meta;
    j["params"]["n_w"] = r.params.n_w;
    j["params"]["shots"] = r.params.shots;
    j["params"]["mean_shots"] = r.params.mean_shots;
    j["params"]["few_k"] = r.params.few_k;
    j["params"]["n_x"] = r.params.n_x;
    j["params"]["n_y"] = r.params.n_y;
    j["params"]["n_tasks"] = r.params.n_tasks;
    j["params"]["m_task"] = r.params.m_task;
    j["params"]["n_t"] = r.params.n_t;
    j["params"]["t_sft_hours"] = r.params.t_sft_hours;
    j["params"]["t_meta_hours"] = r.params.t_meta_hours;
    j["params"]["k_unit"] = r.params.binary_k ? 1024 : 1000;

    j["training_tokens"]["mask_all"] = r.mask_all_tokens;
    j["training_tokens"]["mask_all_pretty"] = format_scaled(r.mask_all_tokens);
    j["training_tokens"]["mask_last_paper"] = r.mask_last_tokens_paper;
    j["training_tokens"]["mask_last_paper_pretty"] = format_scaled(r.mask_last_tokens_paper);
    j["training_tokens"]["mask_last_exact"] = r.mask_last_tokens_exact;
    j["training_tokens"]["autoregressive"] = r.autoregressive_tokens;
    j["training_tokens"]["mask_last_over_mask_all"] = r.mask_last_over_mask_all;

    j["task_level"]["tokens"] = r.task_level_tokens;
    j["task_level"]["tokens_pretty"] = format_scaled(r.task_level_tokens);
    j["task_level"]["task_over_meta_ratio"] = r.task_over_meta_tokens;

    j["inference"]["few_cost"] = r.inference.few_cost;
    j["inference"]["many_no_cache_cost"] = r.inference.many_no_cache_cost;
    j["inference"]["many_cache_cost"] = r.inference.many_cache_cost;
    j["inference"]["few_relative"] = r.inference.few_relative;
    j["inference"]["cache_relative"] = r.inference.cache_relative;

    j["workflow"]["adapters_task_level"] = r.adapters_task_level;
    j["workflow"]["adapters_meta"] = r.adapters_meta;
    j["workflow"]["dev_hours_task_level"] = r.dev_hours_task_level;
    j["workflow"]["dev_hours_meta"] = r.dev_hours_meta;
    j["workflow"]["dev_time_ratio"] = r.dev_time_ratio;

    j["cited_constants"]["kv_latency_llama2"] = r.cited_kv_latency_llama2;
    j["cited_constants"]["kv_latency_llama3"] = r.cited_kv_latency_llama3;
    j["cited_constants"]["cache_load_cost"] = r.cited_cache_load_cost;

    j["notes"] = r.notes;
    return j;
}

std::string cost_report_table(const CostReport& r) {
    std::ostringstream os;
    os << "training strategy comparison (tokens)\n";
    os << "  mask all targets      " << format_scaled(r.mask_all_tokens) << "  ("
       << r.params.n_meta << " x " << r.params.n_w << ")\n";
    os << "  mask last target      " << format_scaled(r.mask_last_tokens_paper) << "  ("
       << r.params.n_meta << " x " << r.params.n_w << " x " << r.params.shots << ")\n";
    os << "  mask-last / mask-all  " << r.mask_last_over_mask_all << "x\n";
    os << "\nmeta training vs task-level fine-tuning (tokens)\n";
    os << "  meta training         " << format_scaled(r.mask_all_tokens) << "\n";
    os << "  task-level            " << format_scaled(r.task_level_tokens) << "  ("
       << r.params.n_t << " x " << r.params.m_task << " x " << r.params.n_tasks << ")\n";
    os << "  task-level / meta     " << r.task_over_meta_tokens << "x\n";
    os << "\ninference cost (relative to many-shot without kv cache)\n";
    os << "  few-shot              " << r.inference.few_relative << "x\n";
    os << "  many-shot w/o cache   1x\n";
    os << "  many-shot w/ cache    " << r.inference.cache_relative << "x\n";
    os << "\nworkflow\n";
    os << "  adapters              " << r.adapters_task_level << " vs " << r.adapters_meta
       << "\n";
    os << "  development time      " << r.dev_hours_task_level << "h vs " << r.dev_hours_meta
       << "h  (" << r.dev_time_ratio << "x)\n";
    os << "\nnotes\n";
    for (const auto& n : r.notes) os << "  - " << n << "\n";
    return os.str();
}

}  // namespace icft
