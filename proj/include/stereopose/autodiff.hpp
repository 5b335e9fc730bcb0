#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "stereopose/tensor.hpp"

namespace stereopose {

// Eager reverse-mode differentiation over a tape of tensor ops.
//
// Values are computed immediately when an op is recorded, so callers can
// inspect intermediate results (used e.g. for the discrete top-K selection
// between recovery passes). backward() replays the tape in reverse and
// accumulates gradients into every node that (transitively) requires them.
//
// The op set is exactly what the models in this repository need; it is not a
// general-purpose autodiff system. Custom ops can be appended through
// add_node() (see the stereo-volume op).

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

class Tape {
  public:
    struct Node {
        Tensor value;
        Tensor grad; // allocated on demand
        std::vector<int> parents;
        std::function<void(Tape&, int)> backward;
        bool requires_grad = false;
    };

    Var constant(Tensor v) { return push(std::move(v), {}, nullptr, false); }

    Var leaf(Tensor v) { return push(std::move(v), {}, nullptr, true); }

    const Tensor& value(Var x) const { return node(x).value; }

    // Gradient of the last backward() target w.r.t. x (zeros if untouched).
    const Tensor& grad(Var x) {
        Node& n = node(x);
        if (n.grad.empty()) n.grad = Tensor(n.value.shape());
        return n.grad;
    }

    std::size_t node_count() const { return nodes_.size(); }

    void backward(Var loss) {
        Node& ln = node(loss);
        if (ln.value.size() != 1)
            throw std::invalid_argument("backward: loss must be a scalar");
        touch_grad(loss)[0] = 1.0;
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[std::size_t(i)];
            if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
            n.backward(*this, i);
        }
    }

    // --- extension point -------------------------------------------------

    Var add_node(Tensor value, std::vector<int> parents, std::function<void(Tape&, int)> bwd) {
        bool rg = false;
        for (int p : parents) rg = rg || node(Var{p}).requires_grad;
        return push(std::move(value), std::move(parents), rg ? std::move(bwd) : nullptr, rg);
    }

    Node& node(Var x) { return nodes_.at(std::size_t(x.id)); }
    const Node& node(Var x) const { return nodes_.at(std::size_t(x.id)); }

    // Gradient buffer of a node, allocated on first use (backward helpers).
    Tensor& touch_grad(Var x) {
        Node& n = node(x);
        if (n.grad.empty()) n.grad = Tensor(n.value.shape());
        return n.grad;
    }

    // --- elementwise -----------------------------------------------------

    Var add(Var a, Var b) {
        const Tensor &ta = value(a), &tb = value(b);
        require(ta.same_shape(tb), "add: shape mismatch");
        Tensor out(ta.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] + tb[i];
        return add_node(std::move(out), {a.id, b.id}, [](Tape& t, int id) {
            const Tensor& g = t.nodes_[std::size_t(id)].grad;
            auto& n = t.nodes_[std::size_t(id)];
            t.accumulate(n.parents[0], g);
            t.accumulate(n.parents[1], g);
        });
    }

    Var sub(Var a, Var b) {
        const Tensor &ta = value(a), &tb = value(b);
        require(ta.same_shape(tb), "sub: shape mismatch");
        Tensor out(ta.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] - tb[i];
        return add_node(std::move(out), {a.id, b.id}, [](Tape& t, int id) {
            auto& n = t.nodes_[std::size_t(id)];
            const Tensor& g = n.grad;
            t.accumulate(n.parents[0], g);
            if (t.nodes_[std::size_t(n.parents[1])].requires_grad) {
                Tensor& gb = t.touch_grad(Var{n.parents[1]});
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }

    Var mul(Var a, Var b) {
        const Tensor &ta = value(a), &tb = value(b);
        require(ta.same_shape(tb), "mul: shape mismatch");
        Tensor out(ta.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] * tb[i];
        return add_node(std::move(out), {a.id, b.id}, [](Tape& t, int id) {
            auto& n = t.nodes_[std::size_t(id)];
            const Tensor& g = n.grad;
            const Tensor& va = t.nodes_[std::size_t(n.parents[0])].value;
            const Tensor& vb = t.nodes_[std::size_t(n.parents[1])].value;
            if (t.nodes_[std::size_t(n.parents[0])].requires_grad) {
                Tensor& ga = t.touch_grad(Var{n.parents[0]});
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
            }
            if (t.nodes_[std::size_t(n.parents[1])].requires_grad) {
                Tensor& gb = t.touch_grad(Var{n.parents[1]});
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
            }
        });
    }

    // k*x + c, elementwise with scalar k, c
    Var affine(Var x, double k, double c) {
        const Tensor& tx = value(x);
        Tensor out(tx.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = k * tx[i] + c;
        return add_node(std::move(out), {x.id}, [k](Tape& t, int id) {
            auto& n = t.nodes_[std::size_t(id)];
            Tensor& gx = t.touch_grad(Var{n.parents[0]});
            const Tensor& g = n.grad;
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += k * g[i];
        });
    }

    Var scale(Var x, double k) { return affine(x, k, 0.0); }
    Var neg(Var x) { return affine(x, -1.0, 0.0); }

    Var softplus(Var x) {
        const Tensor& tx = value(x);
        Tensor out(tx.shape());
        for (std::size_t i = 0; i < out.size(); ++i) {
            double v = tx[i];
            out[i] = v > 30.0 ? v : std::log1p(std::exp(v));
        }
        return add_node(std::move(out), {x.id}, [](Tape& t, int id) {
            auto& n = t.nodes_[std::size_t(id)];
            const Tensor& vx = t.nodes_[std::size_t(n.parents[0])].value;
            Tensor& gx = t.touch_grad(Var{n.parents[0]});
            const Tensor& g = n.grad;
            for (std::size_t i = 0; i < g.size(); ++i)
                gx[i] += g[i] / (1.0 + std::exp(-vx[i]));
        });
    }

    Var logistic(Var x) {
        const Tensor& tx = value(x);
        Tensor out(tx.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-tx[i]));
        return add_node(std::move(out), {x.id}, [](Tape& t, int id) {
            auto& n = t.nodes_[std::size_t(id)];
            const Tensor& y = n.value;
            Tensor& gx = t.touch_grad(Var{n.parents[0]});
            const Tensor& g = n.grad;
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
        });
    }

    Var log(Var x) {
        const Tensor& tx = value(x);
        Tensor out(tx.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(tx[i]);
        return add_node(std::move(out), {x.id}, [](Tape& t, int id) {
            auto& n = t.nodes_[std::size_t(id)];
            const Tensor& vx = t.nodes_[std::size_t(n.parents[0])].value;
            Tensor& gx = t.touch_grad(Var{n.parents[0]});
            const Tensor& g = n.grad;
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / vx[i];
        });
    }

    Var sqrt(Var x) {
        const Tensor& tx = value(x);
        Tensor out(tx.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(tx[i]);
        return add_node(std::move(out), {x.id}, [](Tape& t, int id) {
            auto& n = t.nodes_[std::size_t(id)];
            const Tensor& y = n.value;
            Tensor& gx = t.touch_grad(Var{n.parents[0]});
            const Tensor& g = n.grad;
            for (std::size_t i = 0; i < g.size(); ++i)
                if (y[i] > 0.0) gx[i] += 0.5 * g[i] / y[i];
        });
    }

    Var abs(Var x) {
        const Tensor& tx = value(x);
        Tensor out(tx.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(tx[i]);
        return add_node(std::move(out), {x.id}, [](Tape& t, int id) {
            auto& n = t.nodes_[std::size_t(id)];
            const Tensor& vx = t.nodes_[std::size_t(n.parents[0])].value;
            Tensor& gx = t.touch_grad(Var{n.parents[0]});
            const Tensor& g = n.grad;
            for (std::size_t i = 0; i < g.size(); ++i)
                gx[i] += g[i] * (vx[i] > 0.0 ? 1.0 : (vx[i] < 0.0 ? -1.0 : 0.0));
        });
    }

    Var square(Var x) { return mul(x, x); }

    Var reciprocal(Var x) {
        const Tensor& tx = value(x);
        Tensor out(tx.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / tx[i];
        return add_node(std::move(out), {x.id}, [](Tape& t, int id) {
            auto& n = t.nodes_[std::size_t(id)];
            const Tensor& y = n.value;
            Tensor& gx = t.touch_grad(Var{n.parents[0]});
            const Tensor& g = n.grad;
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= g[i] * y[i] * y[i];
        });
    }

    // clamp from below, smoothly: lo + s*softplus((x-lo)/s). For x a few
    // multiples of s above lo this is x to machine precision; the gradient
    // stays positive everywhere.
    Var smooth_floor(Var x, double lo, double s) {
        Var shifted = affine(x, 1.0 / s, -lo / s);
        return affine(softplus(shifted), s, lo);
    }

    // --- shape ops --------------------------------------------------------

    Var reshape(Var x, std::vector<int> shape) {
        Tensor out = value(x).reshaped(std::move(shape));
        return add_node(std::move(out), {x.id}, [](Tape& t, int id) {
            auto& n = t.nodes_[std::size_t(id)];
            Tensor& gx = t.touch_grad(Var{n.parents[0]});
            const Tensor& g = n.grad;
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }

    Var permute(Var x, std::vector<int> axes) {
        const Tensor& tx = value(x);
        int r = tx.rank();
        require(int(axes.size()) == r, "permute: axes rank mismatch");
        std::vector<int> oshape(std::size_t(r));
        for (int i = 0; i < r; ++i) oshape[std::size_t(i)] = tx.dim(axes[std::size_t(i)]);
        Tensor out(oshape);
        permute_copy(tx, out, axes, false);
        return add_node(std::move(out), {x.id}, [axes](Tape& t, int id) {
            auto& n = t.nodes_[std::size_t(id)];
            Tensor& gx = t.touch_grad(Var{n.parents[0]});
            permute_copy(n.grad, gx, axes, true);
        });
    }

    // x[row, :] of a 2D tensor -> [C]
    Var take_row(Var x, int row) {
        const Tensor& tx = value(x);
        require(tx.rank() == 2, "take_row: rank 2 expected");
        int C = tx.dim(1);
        Tensor out({C});
        std::memcpy(out.data(), tx.data() + std::size_t(row) * std::size_t(C),
                    std::size_t(C) * sizeof(double));
        return add_node(std::move(out), {x.id}, [row, C](Tape& t, int id) {
            auto& n = t.nodes_[std::size_t(id)];
            Tensor& gx = t.touch_grad(Var{n.parents[0]});
            const Tensor& g = n.grad;
            for (int c = 0; c < C; ++c) gx[std::size_t(row) * std::size_t(C) + std::size_t(c)] += g[std::size_t(c)];
        });
    }

    // x[:, col] of a 2D tensor -> [R]
    Var take_column(Var x, int col) {
        const Tensor& tx = value(x);
        require(tx.rank() == 2, "take_column: rank 2 expected");
        int R = tx.dim(0), C = tx.dim(1);
        Tensor out({R});
        for (int r = 0; r < R; ++r) out[std::size_t(r)] = tx[std::size_t(r) * std::size_t(C) + std::size_t(col)];
        return add_node(std::move(out), {x.id}, [col, R, C](Tape& t, int id) {
            auto& n = t.nodes_[std::size_t(id)];
            Tensor& gx = t.touch_grad(Var{n.parents[0]});
            const Tensor& g = n.grad;
            for (int r = 0; r < R; ++r)
                gx[std::size_t(r) * std::size_t(C) + std::size_t(col)] += g[std::size_t(r)];
        });
    }

    // columns, each [R], stacked into [R, n]
    Var stack_columns(const std::vector<Var>& cols) {
        require(!cols.empty(), "stack_columns: empty");
        int R = value(cols[0]).dim(0);
        int n = int(cols.size());
        Tensor out({R, n});
        std::vector<int> parents;
        for (int c = 0; c < n; ++c) {
            const Tensor& tc = value(cols[std::size_t(c)]);
            require(tc.rank() == 1 && tc.dim(0) == R, "stack_columns: shape mismatch");
            for (int r = 0; r < R; ++r) out[std::size_t(r) * std::size_t(n) + std::size_t(c)] = tc[std::size_t(r)];
            parents.push_back(cols[std::size_t(c)].id);
        }
        return add_node(std::move(out), std::move(parents), [R, n](Tape& t, int id) {
            auto& nd = t.nodes_[std::size_t(id)];
            const Tensor& g = nd.grad;
            for (int c = 0; c < n; ++c) {
                if (!t.nodes_[std::size_t(nd.parents[std::size_t(c)])].requires_grad) continue;
                Tensor& gc = t.touch_grad(Var{nd.parents[std::size_t(c)]});
                for (int r = 0; r < R; ++r) gc[std::size_t(r)] += g[std::size_t(r) * std::size_t(n) + std::size_t(c)];
            }
        });
    }

    // --- reductions ---------------------------------------------------------

    Var sum(Var x) {
        const Tensor& tx = value(x);
        Tensor out({1});
        out[0] = tx.sum();
        return add_node(std::move(out), {x.id}, [](Tape& t, int id) {
            auto& n = t.nodes_[std::size_t(id)];
            Tensor& gx = t.touch_grad(Var{n.parents[0]});
            double g = n.grad[0];
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        });
    }

    Var mean(Var x) { return scale(sum(x), 1.0 / double(value(x).size())); }

    Var sum_lastdim(Var x) {
        const Tensor& tx = value(x);
        require(tx.rank() >= 1, "sum_lastdim: rank >= 1");
        int C = tx.dim(tx.rank() - 1);
        std::vector<int> oshape(tx.shape().begin(), tx.shape().end() - 1);
        if (oshape.empty()) oshape = {1};
        Tensor out(oshape);
        std::size_t rows = out.size();
        for (std::size_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (int c = 0; c < C; ++c) s += tx[r * std::size_t(C) + std::size_t(c)];
            out[r] = s;
        }
        return add_node(std::move(out), {x.id}, [C](Tape& t, int id) {
            auto& n = t.nodes_[std::size_t(id)];
            Tensor& gx = t.touch_grad(Var{n.parents[0]});
            const Tensor& g = n.grad;
            for (std::size_t r = 0; r < g.size(); ++r)
                for (int c = 0; c < C; ++c) gx[r * std::size_t(C) + std::size_t(c)] += g[r];
        });
    }

    // --- linear algebra -----------------------------------------------------

    Var matmul(Var a, Var b) {
        const Tensor &ta = value(a), &tb = value(b);
        require(ta.rank() == 2 && tb.rank() == 2 && ta.dim(1) == tb.dim(0), "matmul: shape mismatch");
        int R = ta.dim(0), K = ta.dim(1), C = tb.dim(1);
        Tensor out({R, C});
        matmul_kernel(ta.data(), tb.data(), out.data(), R, K, C);
        return add_node(std::move(out), {a.id, b.id}, [R, K, C](Tape& t, int id) {
            auto& n = t.nodes_[std::size_t(id)];
            const Tensor& g = n.grad;
            const Tensor& va = t.nodes_[std::size_t(n.parents[0])].value;
            const Tensor& vb = t.nodes_[std::size_t(n.parents[1])].value;
            if (t.nodes_[std::size_t(n.parents[0])].requires_grad) {
                Tensor& ga = t.touch_grad(Var{n.parents[0]});
                matmul_nt_kernel(g.data(), vb.data(), ga.data(), R, C, K);
            }
            if (t.nodes_[std::size_t(n.parents[1])].requires_grad) {
                Tensor& gb = t.touch_grad(Var{n.parents[1]});
                matmul_tn_kernel(va.data(), g.data(), gb.data(), R, K, C);
            }
        });
    }

    // batched matmul: [N,R,K] x [N,K,C] -> [N,R,C]
    Var bmm(Var a, Var b) {
        const Tensor &ta = value(a), &tb = value(b);
        require(ta.rank() == 3 && tb.rank() == 3 && ta.dim(0) == tb.dim(0) && ta.dim(2) == tb.dim(1),
                "bmm: shape mismatch");
        int N = ta.dim(0), R = ta.dim(1), K = ta.dim(2), C = tb.dim(2);
        Tensor out({N, R, C});
        for (int i = 0; i < N; ++i)
            matmul_kernel(ta.data() + std::size_t(i) * std::size_t(R * K),
                          tb.data() + std::size_t(i) * std::size_t(K * C),
                          out.data() + std::size_t(i) * std::size_t(R * C), R, K, C);
        return add_node(std::move(out), {a.id, b.id}, [N, R, K, C](Tape& t, int id) {
            auto& n = t.nodes_[std::size_t(id)];
            const Tensor& g = n.grad;
            const Tensor& va = t.nodes_[std::size_t(n.parents[0])].value;
            const Tensor& vb = t.nodes_[std::size_t(n.parents[1])].value;
            for (int i = 0; i < N; ++i) {
                const double* gi = g.data() + std::size_t(i) * std::size_t(R * C);
                if (t.nodes_[std::size_t(n.parents[0])].requires_grad)
                    matmul_nt_kernel(gi, vb.data() + std::size_t(i) * std::size_t(K * C),
                                     t.touch_grad(Var{n.parents[0]}).data() + std::size_t(i) * std::size_t(R * K),
                                     R, C, K);
                if (t.nodes_[std::size_t(n.parents[1])].requires_grad)
                    matmul_tn_kernel(va.data() + std::size_t(i) * std::size_t(R * K), gi,
                                     t.touch_grad(Var{n.parents[1]}).data() + std::size_t(i) * std::size_t(K * C),
                                     R, K, C);
            }
        });
    }

    // bias [C] added to every row of x [..., C]
    Var add_bias(Var x, Var b) {
        const Tensor &tx = value(x), &tb = value(b);
        int C = tx.dim(tx.rank() - 1);
        require(tb.rank() == 1 && tb.dim(0) == C, "add_bias: bias shape mismatch");
        Tensor out(tx.shape());
        std::size_t rows = tx.size() / std::size_t(C);
        for (std::size_t r = 0; r < rows; ++r)
            for (int c = 0; c < C; ++c)
                out[r * std::size_t(C) + std::size_t(c)] = tx[r * std::size_t(C) + std::size_t(c)] + tb[std::size_t(c)];
        return add_node(std::move(out), {x.id, b.id}, [C](Tape& t, int id) {
            auto& n = t.nodes_[std::size_t(id)];
            const Tensor& g = n.grad;
            std::size_t rows = g.size() / std::size_t(C);
            if (t.nodes_[std::size_t(n.parents[0])].requires_grad) t.accumulate(n.parents[0], g);
            if (t.nodes_[std::size_t(n.parents[1])].requires_grad) {
                Tensor& gb = t.touch_grad(Var{n.parents[1]});
                for (std::size_t r = 0; r < rows; ++r)
                    for (int c = 0; c < C; ++c) gb[std::size_t(c)] += g[r * std::size_t(C) + std::size_t(c)];
            }
        });
    }

    // --- normalization / attention -------------------------------------------

    Var softmax_lastdim(Var x) {
        const Tensor& tx = value(x);
        int C = tx.dim(tx.rank() - 1);
        Tensor out(tx.shape());
        std::size_t rows = tx.size() / std::size_t(C);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* xi = tx.data() + r * std::size_t(C);
            double* oi = out.data() + r * std::size_t(C);
            double m = xi[0];
            for (int c = 1; c < C; ++c) m = std::max(m, xi[c]);
            double s = 0.0;
            for (int c = 0; c < C; ++c) s += (oi[c] = std::exp(xi[c] - m));
            double inv = 1.0 / s;
            for (int c = 0; c < C; ++c) oi[c] *= inv;
        }
        return add_node(std::move(out), {x.id}, [C](Tape& t, int id) {
            auto& n = t.nodes_[std::size_t(id)];
            const Tensor& p = n.value;
            const Tensor& g = n.grad;
            Tensor& gx = t.touch_grad(Var{n.parents[0]});
            std::size_t rows = g.size() / std::size_t(C);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* pi = p.data() + r * std::size_t(C);
                const double* gi = g.data() + r * std::size_t(C);
                double dot = 0.0;
                for (int c = 0; c < C; ++c) dot += pi[c] * gi[c];
                double* go = gx.data() + r * std::size_t(C);
                for (int c = 0; c < C; ++c) go[c] += pi[c] * (gi[c] - dot);
            }
        });
    }

    // layer normalization over the last dim with affine parameters
    Var layernorm(Var x, Var gamma, Var beta, double eps = 1e-6) {
        const Tensor& tx = value(x);
        int C = tx.dim(tx.rank() - 1);
        const Tensor &tg = value(gamma), &tb = value(beta);
        require(tg.rank() == 1 && tg.dim(0) == C && tb.rank() == 1 && tb.dim(0) == C,
                "layernorm: parameter shape mismatch");
        Tensor out(tx.shape());
        std::size_t rows = tx.size() / std::size_t(C);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* xi = tx.data() + r * std::size_t(C);
            double* oi = out.data() + r * std::size_t(C);
            double mu = 0.0;
            for (int c = 0; c < C; ++c) mu += xi[c];
            mu /= C;
            double var = 0.0;
            for (int c = 0; c < C; ++c) var += (xi[c] - mu) * (xi[c] - mu);
            var /= C;
            double inv = 1.0 / std::sqrt(var + eps);
            for (int c = 0; c < C; ++c) oi[c] = tg[std::size_t(c)] * (xi[c] - mu) * inv + tb[std::size_t(c)];
        }
        return add_node(std::move(out), {x.id, gamma.id, beta.id}, [C, eps](Tape& t, int id) {
            auto& n = t.nodes_[std::size_t(id)];
            const Tensor& g = n.grad;
            const Tensor& vx = t.nodes_[std::size_t(n.parents[0])].value;
            const Tensor& vg = t.nodes_[std::size_t(n.parents[1])].value;
            std::size_t rows = g.size() / std::size_t(C);
            bool need_x = t.nodes_[std::size_t(n.parents[0])].requires_grad;
            bool need_g = t.nodes_[std::size_t(n.parents[1])].requires_grad;
            bool need_b = t.nodes_[std::size_t(n.parents[2])].requires_grad;
            Tensor* gx = need_x ? &t.touch_grad(Var{n.parents[0]}) : nullptr;
            Tensor* gg = need_g ? &t.touch_grad(Var{n.parents[1]}) : nullptr;
            Tensor* gb = need_b ? &t.touch_grad(Var{n.parents[2]}) : nullptr;
            std::vector<double> xhat(std::size_t(C));
            for (std::size_t r = 0; r < rows; ++r) {
                const double* xi = vx.data() + r * std::size_t(C);
                const double* gi = g.data() + r * std::size_t(C);
                double mu = 0.0;
                for (int c = 0; c < C; ++c) mu += xi[c];
                mu /= C;
                double var = 0.0;
                for (int c = 0; c < C; ++c) var += (xi[c] - mu) * (xi[c] - mu);
                var /= C;
                double inv = 1.0 / std::sqrt(var + eps);
                for (int c = 0; c < C; ++c) xhat[std::size_t(c)] = (xi[c] - mu) * inv;
                if (gg || gb)
                    for (int c = 0; c < C; ++c) {
                        if (gg) (*gg)[std::size_t(c)] += gi[c] * xhat[std::size_t(c)];
                        if (gb) (*gb)[std::size_t(c)] += gi[c];
                    }
                if (gx) {
                    double sum_gh = 0.0, sum_ghx = 0.0;
                    for (int c = 0; c < C; ++c) {
                        double gh = gi[c] * vg[std::size_t(c)];
                        sum_gh += gh;
                        sum_ghx += gh * xhat[std::size_t(c)];
                    }
                    double* gxo = gx->data() + r * std::size_t(C);
                    for (int c = 0; c < C; ++c) {
                        double gh = gi[c] * vg[std::size_t(c)];
                        gxo[c] += inv * (gh - (sum_gh + xhat[std::size_t(c)] * sum_ghx) / C);
                    }
                }
            }
        });
    }

    // --- helpers ---------------------------------------------------------

    void accumulate(int parent, const Tensor& g) {
        if (!nodes_[std::size_t(parent)].requires_grad) return;
        Tensor& gp = touch_grad(Var{parent});
        for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
    }

    static void require(bool ok, const char* what) {
        if (!ok) throw std::invalid_argument(what);
    }

    // C += A(RxK) * B(KxC), accumulating into zeroed out
    static void matmul_kernel(const double* A, const double* B, double* C_, int R, int K, int C) {
        for (int r = 0; r < R; ++r) {
            double* co = C_ + std::size_t(r) * std::size_t(C);
            for (int k = 0; k < K; ++k) {
                double a = A[std::size_t(r) * std::size_t(K) + std::size_t(k)];
                const double* bo = B + std::size_t(k) * std::size_t(C);
                for (int c = 0; c < C; ++c) co[c] += a * bo[c];
            }
        }
    }

    // out(RxK) += G(RxC) * B(KxC)^T
    static void matmul_nt_kernel(const double* G, const double* B, double* out, int R, int C, int K) {
        for (int r = 0; r < R; ++r) {
            const double* gi = G + std::size_t(r) * std::size_t(C);
            double* oi = out + std::size_t(r) * std::size_t(K);
            for (int k = 0; k < K; ++k) {
                const double* bi = B + std::size_t(k) * std::size_t(C);
                double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
                int c = 0;
                for (; c + 4 <= C; c += 4) {
                    s0 += gi[c] * bi[c];
                    s1 += gi[c + 1] * bi[c + 1];
                    s2 += gi[c + 2] * bi[c + 2];
                    s3 += gi[c + 3] * bi[c + 3];
                }
                double s = (s0 + s1) + (s2 + s3);
                for (; c < C; ++c) s += gi[c] * bi[c];
                oi[k] += s;
            }
        }
    }

    // out(KxC) += A(RxK)^T * G(RxC)
    static void matmul_tn_kernel(const double* A, const double* G, double* out, int R, int K, int C) {
        for (int r = 0; r < R; ++r) {
            const double* gi = G + std::size_t(r) * std::size_t(C);
            const double* ai = A + std::size_t(r) * std::size_t(K);
            for (int k = 0; k < K; ++k) {
                double a = ai[k];
                double* oi = out + std::size_t(k) * std::size_t(C);
                for (int c = 0; c < C; ++c) oi[c] += a * gi[c];
            }
        }
    }

  private:
    static void permute_copy(const Tensor& src, Tensor& dst, const std::vector<int>& axes, bool invert) {
        // dst[i_axes] (+)= src[i] in forward; in invert mode dst is the
        // parent grad and accumulates.
        int r = src.rank();
        const std::vector<int>& in_shape = invert ? dst.shape() : src.shape();
        std::vector<std::size_t> in_strides(std::size_t(r), 1), out_strides_for_in(std::size_t(r), 0);
        for (int i = r - 2; i >= 0; --i)
            in_strides[std::size_t(i)] = in_strides[std::size_t(i + 1)] * std::size_t(in_shape[std::size_t(i + 1)]);
        // strides of the permuted tensor, indexed by input axis
        std::vector<std::size_t> pstr(std::size_t(r), 1);
        for (int i = r - 2; i >= 0; --i)
            pstr[std::size_t(i)] = pstr[std::size_t(i + 1)] * std::size_t(in_shape[std::size_t(axes[std::size_t(i + 1)])]);
        for (int i = 0; i < r; ++i) out_strides_for_in[std::size_t(axes[std::size_t(i)])] = pstr[std::size_t(i)];

        std::size_t n = invert ? dst.size() : src.size();
        std::vector<int> idx(std::size_t(r), 0);
        for (std::size_t lin = 0; lin < n; ++lin) {
            std::size_t off = 0;
            for (int i = 0; i < r; ++i) off += std::size_t(idx[std::size_t(i)]) * out_strides_for_in[std::size_t(i)];
            if (invert)
                dst[lin] += src[off];
            else
                dst[off] = src[lin];
            for (int i = r - 1; i >= 0; --i) {
                if (++idx[std::size_t(i)] < in_shape[std::size_t(i)]) break;
                idx[std::size_t(i)] = 0;
            }
        }
    }

    Var push(Tensor value, std::vector<int> parents, std::function<void(Tape&, int)> bwd, bool rg) {
        nodes_.push_back(Node{std::move(value), Tensor(), std::move(parents), std::move(bwd), rg});
        return Var{int(nodes_.size()) - 1};
    }

    std::vector<Node> nodes_;
};

} // namespace stereopose
