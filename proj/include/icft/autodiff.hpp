#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <vector>

#include "icft/tensor.hpp"

namespace icft {

// Reverse-mode autodiff over a define-by-run graph. Each op records a closure
// that scatters the output gradient into its parents. Graphs are rebuilt per
// step and discarded; single-threaded within one graph.

template <class Real>
struct Node {
    Tensor<Real> value;
    Tensor<Real> grad;  // sized lazily on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    const char* op = "leaf";

    void ensure_grad() {
        if (grad.data.empty()) grad = Tensor<Real>::zeros(value.shape);
    }
};

template <class Real>
using NodePtr = std::shared_ptr<Node<Real>>;

template <class Real>
class Graph {
public:
    bool check_finite = true;

    NodePtr<Real> leaf(Tensor<Real> t, bool requires_grad = true) {
        auto n = std::make_shared<Node<Real>>();
        n->value = std::move(t);
        n->requires_grad = requires_grad;
        return n;
    }
    NodePtr<Real> constant(Tensor<Real> t) { return leaf(std::move(t), false); }

    NodePtr<Real> add(NodePtr<Real> a, NodePtr<Real> b) {
        if (!a->value.same_shape(b->value))
            throw dim_error("add shapes " + a->value.shape_str() + " vs " + b->value.shape_str());
        Tensor<Real> out = a->value;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b->value.data[i];
        return make(std::move(out), {a, b}, "add", [](Node<Real>& n) {
            for (int s = 0; s < 2; ++s) {
                auto& p = *n.parents[s];
                if (!p.requires_grad) continue;
                p.ensure_grad();
                for (size_t i = 0; i < n.grad.data.size(); ++i) p.grad.data[i] += n.grad.data[i];
            }
        });
    }

    // bias broadcast over the last axis; the only broadcast in the library
    NodePtr<Real> add_bias(NodePtr<Real> x, NodePtr<Real> bias) {
        if (x->value.rank() != 2 || bias->value.rank() != 1 ||
            bias->value.shape[0] != x->value.shape[1])
            throw dim_error("add_bias wants [T,D] + [D]");
        Tensor<Real> out = x->value;
        const int rows = out.shape[0], cols = out.shape[1];
        for (int i = 0; i < rows; ++i) {
            Real* r = out.row_ptr(i);
            for (int j = 0; j < cols; ++j) r[j] += bias->value.data[j];
        }
        return make(std::move(out), {x, bias}, "add_bias", [](Node<Real>& n) {
            auto& x = *n.parents[0];
            auto& b = *n.parents[1];
            const int rows = n.grad.shape[0], cols = n.grad.shape[1];
            if (x.requires_grad) {
                x.ensure_grad();
                for (size_t i = 0; i < n.grad.data.size(); ++i) x.grad.data[i] += n.grad.data[i];
            }
            if (b.requires_grad) {
                b.ensure_grad();
                for (int i = 0; i < rows; ++i) {
                    const Real* g = n.grad.row_ptr(i);
                    for (int j = 0; j < cols; ++j) b.grad.data[j] += g[j];
                }
            }
        });
    }

    NodePtr<Real> mul(NodePtr<Real> a, NodePtr<Real> b) {
        if (!a->value.same_shape(b->value)) throw dim_error("mul shape mismatch");
        Tensor<Real> out = a->value;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b->value.data[i];
        return make(std::move(out), {a, b}, "mul", [](Node<Real>& n) {
            auto& a = *n.parents[0];
            auto& b = *n.parents[1];
            if (a.requires_grad) {
                a.ensure_grad();
                for (size_t i = 0; i < n.grad.data.size(); ++i)
                    a.grad.data[i] += n.grad.data[i] * b.value.data[i];
            }
            if (b.requires_grad) {
                b.ensure_grad();
                for (size_t i = 0; i < n.grad.data.size(); ++i)
                    b.grad.data[i] += n.grad.data[i] * a.value.data[i];
            }
        });
    }

    NodePtr<Real> scale(NodePtr<Real> a, Real s) {
        Tensor<Real> out = a->value;
        for (auto& v : out.data) v *= s;
        return make(std::move(out), {a}, "scale", [s](Node<Real>& n) {
            auto& a = *n.parents[0];
            if (!a.requires_grad) return;
            a.ensure_grad();
            for (size_t i = 0; i < n.grad.data.size(); ++i) a.grad.data[i] += n.grad.data[i] * s;
        });
    }

    NodePtr<Real> matmul(NodePtr<Real> a, NodePtr<Real> b) {
        Tensor<Real> out = icft::matmul(a->value, b->value);
        return make(std::move(out), {a, b}, "matmul", [](Node<Real>& n) {
            auto& a = *n.parents[0];
            auto& b = *n.parents[1];
            if (a.requires_grad) {
                a.ensure_grad();
                matmul_nt_acc(a.grad, n.grad, b.value);  // dA = dC * B^T
            }
            if (b.requires_grad) {
                b.ensure_grad();
                matmul_tn_acc(b.grad, a.value, n.grad);  // dB = A^T * dC
            }
        });
    }

    // a * b^T; the natural orientation for [T,d_in] x weight[d_out,d_in]
    NodePtr<Real> matmul_nt(NodePtr<Real> a, NodePtr<Real> b) {
        Tensor<Real> out = icft::matmul_nt(a->value, b->value);
        return make(std::move(out), {a, b}, "matmul_nt", [](Node<Real>& n) {
            auto& a = *n.parents[0];
            auto& b = *n.parents[1];
            if (a.requires_grad) {
                a.ensure_grad();
                matmul_acc(a.grad, n.grad, b.value);  // dA = dC * B
            }
            if (b.requires_grad) {
                b.ensure_grad();
                matmul_tn_acc(b.grad, n.grad, a.value);  // dB = dC^T * A
            }
        });
    }

    NodePtr<Real> softmax_rows(NodePtr<Real> x) {
        Tensor<Real> out = icft::softmax_rows(x->value);
        return make(std::move(out), {x}, "softmax", [](Node<Real>& n) {
            auto& x = *n.parents[0];
            if (!x.requires_grad) return;
            x.ensure_grad();
            const int rows = n.value.rank() == 1 ? 1 : n.value.shape[0];
            const int cols = n.value.rank() == 1 ? n.value.shape[0] : n.value.shape[1];
            for (int i = 0; i < rows; ++i) {
                const Real* y = n.value.data.data() + static_cast<size_t>(i) * cols;
                const Real* gy = n.grad.data.data() + static_cast<size_t>(i) * cols;
                Real* gx = x.grad.data.data() + static_cast<size_t>(i) * cols;
                Real dot = Real(0);
                for (int j = 0; j < cols; ++j) dot += gy[j] * y[j];
                for (int j = 0; j < cols; ++j) gx[j] += y[j] * (gy[j] - dot);
            }
        });
    }

    // Softmax over key positions j <= i per query row i; entries beyond the
    // diagonal are exactly zero. pair_counter (optional) accumulates the
    // number of (query, key) pairs touched.
    NodePtr<Real> causal_softmax(NodePtr<Real> scores, uint64_t* pair_counter = nullptr) {
        if (scores->value.rank() != 2 || scores->value.shape[0] != scores->value.shape[1])
            throw dim_error("causal_softmax wants square [T,T]");
        const int t = scores->value.shape[0];
        Tensor<Real> out = Tensor<Real>::zeros({t, t});
        for (int i = 0; i < t; ++i) {
            const Real* row = scores->value.row_ptr(i);
            Real* orow = out.row_ptr(i);
            Real mx = row[0];
            for (int j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
            Real sum = Real(0);
            for (int j = 0; j <= i; ++j) {
                orow[j] = std::exp(row[j] - mx);
                sum += orow[j];
            }
            const Real inv = Real(1) / sum;
            for (int j = 0; j <= i; ++j) orow[j] *= inv;
        }
        if (pair_counter) *pair_counter += static_cast<uint64_t>(t) * (t + 1) / 2;
        return make(std::move(out), {scores}, "causal_softmax", [t](Node<Real>& n) {
            auto& x = *n.parents[0];
            if (!x.requires_grad) return;
            x.ensure_grad();
            for (int i = 0; i < t; ++i) {
                const Real* y = n.value.row_ptr(i);
                const Real* gy = n.grad.row_ptr(i);
                Real* gx = x.grad.row_ptr(i);
                Real dot = Real(0);
                for (int j = 0; j <= i; ++j) dot += gy[j] * y[j];
                for (int j = 0; j <= i; ++j) gx[j] += y[j] * (gy[j] - dot);
            }
        });
    }

    // Last-axis layer norm with affine gain/bias.
    NodePtr<Real> layer_norm(NodePtr<Real> x, NodePtr<Real> gain, NodePtr<Real> bias, Real eps) {
        if (x->value.rank() != 2) throw dim_error("layer_norm wants [T,D]");
        const int rows = x->value.shape[0], d = x->value.shape[1];
        if (gain->value.rank() != 1 || gain->value.shape[0] != d || !gain->value.same_shape(bias->value))
            throw dim_error("layer_norm gain/bias must be [D]");
        if (!(eps > Real(0))) throw contract_error("layer_norm eps must be > 0");

        auto xhat = std::make_shared<Tensor<Real>>(Tensor<Real>::zeros({rows, d}));
        auto inv_sigma = std::make_shared<std::vector<Real>>(rows);
        Tensor<Real> out = Tensor<Real>::zeros({rows, d});
        for (int i = 0; i < rows; ++i) {
            const Real* r = x->value.row_ptr(i);
            Real mean = Real(0);
            for (int j = 0; j < d; ++j) mean += r[j];
            mean /= Real(d);
            Real var = Real(0);
            for (int j = 0; j < d; ++j) {
                const Real c = r[j] - mean;
                var += c * c;
            }
            var /= Real(d);
            const Real inv = Real(1) / std::sqrt(var + eps);
            (*inv_sigma)[i] = inv;
            Real* xh = xhat->row_ptr(i);
            Real* o = out.row_ptr(i);
            for (int j = 0; j < d; ++j) {
                xh[j] = (r[j] - mean) * inv;
                o[j] = xh[j] * gain->value.data[j] + bias->value.data[j];
            }
        }
        return make(std::move(out), {x, gain, bias}, "layer_norm",
                    [xhat, inv_sigma, rows, d](Node<Real>& n) {
                        auto& x = *n.parents[0];
                        auto& g = *n.parents[1];
                        auto& b = *n.parents[2];
                        if (g.requires_grad) g.ensure_grad();
                        if (b.requires_grad) b.ensure_grad();
                        if (x.requires_grad) x.ensure_grad();
                        for (int i = 0; i < rows; ++i) {
                            const Real* gy = n.grad.row_ptr(i);
                            const Real* xh = xhat->row_ptr(i);
                            if (g.requires_grad || b.requires_grad) {
                                for (int j = 0; j < d; ++j) {
                                    if (g.requires_grad) g.grad.data[j] += gy[j] * xh[j];
                                    if (b.requires_grad) b.grad.data[j] += gy[j];
                                }
                            }
                            if (x.requires_grad) {
                                // dx = inv/d * (d*gg - sum(gg) - xh * sum(gg*xh)), gg = gy*gain
                                Real sum_gg = Real(0), sum_ggx = Real(0);
                                for (int j = 0; j < d; ++j) {
                                    const Real gg = gy[j] * g.value.data[j];
                                    sum_gg += gg;
                                    sum_ggx += gg * xh[j];
                                }
                                Real* gx = x.grad.row_ptr(i);
                                const Real inv = (*inv_sigma)[i];
                                for (int j = 0; j < d; ++j) {
                                    const Real gg = gy[j] * g.value.data[j];
                                    gx[j] += inv * (gg - (sum_gg + xh[j] * sum_ggx) / Real(d));
                                }
                            }
                        }
                    });
    }

    NodePtr<Real> gelu(NodePtr<Real> x) {
        Tensor<Real> out = x->value;
        for (auto& v : out.data) v = gelu_fwd(v);
        return make(std::move(out), {x}, "gelu", [](Node<Real>& n) {
            auto& x = *n.parents[0];
            if (!x.requires_grad) return;
            x.ensure_grad();
            for (size_t i = 0; i < n.grad.data.size(); ++i)
                x.grad.data[i] += n.grad.data[i] * gelu_bwd(x.value.data[i]);
        });
    }

    // Gather rows of an embedding table; backward scatter-adds.
    NodePtr<Real> embedding(NodePtr<Real> table, std::span<const int32_t> ids) {
        if (table->value.rank() != 2) throw dim_error("embedding table must be [V,D]");
        const int v = table->value.shape[0], d = table->value.shape[1];
        const int t = static_cast<int>(ids.size());
        Tensor<Real> out = Tensor<Real>::zeros({t, d});
        for (int i = 0; i < t; ++i) {
            if (ids[i] < 0 || ids[i] >= v) throw dim_error("embedding id out of range");
            const Real* src = table->value.row_ptr(ids[i]);
            std::copy(src, src + d, out.row_ptr(i));
        }
        std::vector<int32_t> ids_copy(ids.begin(), ids.end());
        return make(std::move(out), {table}, "embedding",
                    [ids_copy = std::move(ids_copy), d](Node<Real>& n) {
                        auto& tab = *n.parents[0];
                        if (!tab.requires_grad) return;
                        tab.ensure_grad();
                        for (size_t i = 0; i < ids_copy.size(); ++i) {
                            const Real* g = n.grad.row_ptr(static_cast<int>(i));
                            Real* dst = tab.grad.row_ptr(ids_copy[i]);
                            for (int j = 0; j < d; ++j) dst[j] += g[j];
                        }
                    });
    }

    NodePtr<Real> slice_cols(NodePtr<Real> x, int c0, int w) {
        if (x->value.rank() != 2) throw dim_error("slice_cols wants matrix");
        const int rows = x->value.shape[0], cols = x->value.shape[1];
        if (c0 < 0 || w <= 0 || c0 + w > cols) throw dim_error("slice_cols range");
        Tensor<Real> out = Tensor<Real>::zeros({rows, w});
        for (int i = 0; i < rows; ++i)
            std::copy(x->value.row_ptr(i) + c0, x->value.row_ptr(i) + c0 + w, out.row_ptr(i));
        return make(std::move(out), {x}, "slice_cols", [c0, w, rows](Node<Real>& n) {
            auto& x = *n.parents[0];
            if (!x.requires_grad) return;
            x.ensure_grad();
            for (int i = 0; i < rows; ++i) {
                const Real* g = n.grad.row_ptr(i);
                Real* dst = x.grad.row_ptr(i) + c0;
                for (int j = 0; j < w; ++j) dst[j] += g[j];
            }
        });
    }

    NodePtr<Real> concat_cols(const std::vector<NodePtr<Real>>& parts) {
        if (parts.empty()) throw dim_error("concat_cols of nothing");
        const int rows = parts[0]->value.shape[0];
        int total = 0;
        for (auto& p : parts) {
            if (p->value.rank() != 2 || p->value.shape[0] != rows)
                throw dim_error("concat_cols row mismatch");
            total += p->value.shape[1];
        }
        Tensor<Real> out = Tensor<Real>::zeros({rows, total});
        int off = 0;
        for (auto& p : parts) {
            const int w = p->value.shape[1];
            for (int i = 0; i < rows; ++i)
                std::copy(p->value.row_ptr(i), p->value.row_ptr(i) + w, out.row_ptr(i) + off);
            off += w;
        }
        return make(std::move(out), parts, "concat_cols", [rows](Node<Real>& n) {
            int off = 0;
            for (auto& pp : n.parents) {
                auto& p = *pp;
                const int w = p.value.shape[1];
                if (p.requires_grad) {
                    p.ensure_grad();
                    for (int i = 0; i < rows; ++i) {
                        const Real* g = n.grad.row_ptr(i) + off;
                        Real* dst = p.grad.row_ptr(i);
                        for (int j = 0; j < w; ++j) dst[j] += g[j];
                    }
                }
                off += w;
            }
        });
    }

    // Rotary position embedding over a per-head slice [T, head_dim]; position
    // of row t is pos0 + t. Linear orthogonal map, so backward is the inverse
    // rotation applied to the gradient.
    NodePtr<Real> rope(NodePtr<Real> x, int pos0, Real base = Real(10000)) {
        if (x->value.rank() != 2) throw dim_error("rope wants [T,head_dim]");
        const int t = x->value.shape[0], d = x->value.shape[1];
        if (d % 2 != 0) throw dim_error("rope head_dim must be even");
        Tensor<Real> out = x->value;
        rope_rotate(out, pos0, base, false);
        return make(std::move(out), {x}, "rope", [pos0, base](Node<Real>& n) {
            auto& x = *n.parents[0];
            if (!x.requires_grad) return;
            x.ensure_grad();
            Tensor<Real> g = n.grad;
            rope_rotate(g, pos0, base, true);
            for (size_t i = 0; i < g.data.size(); ++i) x.grad.data[i] += g.data[i];
        });
    }

    static void rope_rotate(Tensor<Real>& m, int pos0, Real base, bool inverse) {
        const int t = m.shape[0], d = m.shape[1];
        for (int i = 0; i < t; ++i) {
            Real* row = m.row_ptr(i);
            const double pos = pos0 + i;
            for (int j = 0; j < d; j += 2) {
                const double theta = pos * std::pow(static_cast<double>(base),
                                                    -static_cast<double>(j) / d);
                const Real c = static_cast<Real>(std::cos(theta));
                const Real s = static_cast<Real>(inverse ? -std::sin(theta) : std::sin(theta));
                const Real a = row[j], b = row[j + 1];
                row[j] = a * c - b * s;
                row[j + 1] = a * s + b * c;
            }
        }
    }

    // Per-position negative log-likelihood, not reduced. A target id of -1
    // means "no loss at this position" and yields exactly 0.
    NodePtr<Real> cross_entropy_per_token(NodePtr<Real> logits, std::span<const int32_t> targets) {
        if (logits->value.rank() != 2) throw dim_error("cross_entropy wants [T,V] logits");
        const int t = logits->value.shape[0], v = logits->value.shape[1];
        if (static_cast<int>(targets.size()) != t)
            throw dim_error("cross_entropy targets length != T");
        Tensor<Real> out = Tensor<Real>::zeros({t});
        for (int i = 0; i < t; ++i) {
            if (targets[i] == -1) continue;
            if (targets[i] < 0 || targets[i] >= v)
                throw dim_error("cross_entropy target id out of vocab");
            const Real* row = logits->value.row_ptr(i);
            out.data[i] = log_sum_exp_row(row, v) - row[targets[i]];
        }
        std::vector<int32_t> tgt(targets.begin(), targets.end());
        return make(std::move(out), {logits}, "cross_entropy",
                    [tgt = std::move(tgt), v](Node<Real>& n) {
                        auto& logits = *n.parents[0];
                        if (!logits.requires_grad) return;
                        logits.ensure_grad();
                        const int t = static_cast<int>(tgt.size());
                        for (int i = 0; i < t; ++i) {
                            if (tgt[i] == -1) continue;
                            const Real g = n.grad.data[i];
                            if (g == Real(0)) continue;
                            const Real* row = logits.value.row_ptr(i);
                            Real* grow = logits.grad.row_ptr(i);
                            Real mx = row[0];
                            for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
                            Real sum = Real(0);
                            for (int j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
                            const Real inv = Real(1) / sum;
                            for (int j = 0; j < v; ++j)
                                grow[j] += g * std::exp(row[j] - mx) * inv;
                            grow[tgt[i]] -= g;
                        }
                    });
    }

    // Weighted mean over the positions with weight > 0 (scalar output).
    NodePtr<Real> masked_mean(NodePtr<Real> x, std::span<const Real> weights) {
        if (x->value.rank() != 1) throw dim_error("masked_mean wants vector");
        const int t = x->value.shape[0];
        if (static_cast<int>(weights.size()) != t) throw dim_error("masked_mean weights length");
        Real wsum = Real(0), acc = Real(0);
        for (int i = 0; i < t; ++i) {
            wsum += weights[i];
            acc += weights[i] * x->value.data[i];
        }
        if (wsum == Real(0)) throw contract_error("masked_mean with empty mask");
        Tensor<Real> out = Tensor<Real>::full({1}, acc / wsum);
        std::vector<Real> w(weights.begin(), weights.end());
        return make(std::move(out), {x}, "masked_mean", [w = std::move(w), wsum](Node<Real>& n) {
            auto& x = *n.parents[0];
            if (!x.requires_grad) return;
            x.ensure_grad();
            const Real g = n.grad.data[0] / wsum;
            for (size_t i = 0; i < w.size(); ++i) x.grad.data[i] += g * w[i];
        });
    }

    NodePtr<Real> sum(NodePtr<Real> x) {
        Real acc = Real(0);
        for (Real v : x->value.data) acc += v;
        Tensor<Real> out = Tensor<Real>::full({1}, acc);
        return make(std::move(out), {x}, "sum", [](Node<Real>& n) {
            auto& x = *n.parents[0];
            if (!x.requires_grad) return;
            x.ensure_grad();
            const Real g = n.grad.data[0];
            for (auto& v : x.grad.data) v += g;
        });
    }

private:
    NodePtr<Real> make(Tensor<Real> value, std::vector<NodePtr<Real>> parents, const char* op,
                       std::function<void(Node<Real>&)> bwd) {
        if (check_finite) assert_all_finite(value, op);
        auto n = std::make_shared<Node<Real>>();
        n->value = std::move(value);
        n->op = op;
        for (auto& p : parents)
            if (p->requires_grad) n->requires_grad = true;
        n->parents = std::move(parents);
        if (n->requires_grad) n->backward_fn = std::move(bwd);
        return n;
    }
};

// Accumulated reverse-mode gradients from a scalar root into every leaf that
// requires them.
template <class Real>
void backward(const NodePtr<Real>& root) {
    if (!root->value.is_scalar()) throw contract_error("backward root must be scalar");
    // iterative post-order topological sort
    std::vector<Node<Real>*> order;
    std::unordered_set<Node<Real>*> visited;
    std::vector<std::pair<Node<Real>*, size_t>> stack;
    stack.push_back({root.get(), 0});
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<Real>* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad.data[0] = Real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<Real>* n = *it;
        if (n->backward_fn && n->requires_grad) {
            n->ensure_grad();
            n->backward_fn(*n);
        }
    }
}

}  // namespace icft
