#include "dcglr/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace dcglr::ad {

namespace {

void require(bool cond, const char* msg) {
    if (!cond) throw DimensionError(msg);
}

// C += A * B, row-major, ikj order.
void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        double* crow = c + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A^T * B where A is [m x k]: result [k x n].
void matmul_at_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        const double* brow = b + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A * B^T where B is [n x k]: A [m x k], result [m x n].
void matmul_bt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        double* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + static_cast<size_t>(j) * k;
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
            crow[j] += s;
        }
    }
}

}  // namespace

Var Tape::leaf(Tensor value) { return record(std::move(value), nullptr); }

Var Tape::record(Tensor value, PullFn pull) {
    nodes_.push_back(Node{std::move(value), std::move(pull)});
    return Var{static_cast<int>(nodes_.size()) - 1};
}

const Tensor& Tape::grad(Var v) const {
    static const Tensor empty;
    if (v.id < 0 || static_cast<size_t>(v.id) >= grads_.size()) return empty;
    return grads_[v.id];
}

void Tape::accumulate(Var v, const Tensor& g) {
    Tensor& dst = grads_[v.id];
    if (!touched_[v.id]) {
        dst = g;
        touched_[v.id] = 1;
        return;
    }
    require(dst.same_shape(g), "gradient shape mismatch in accumulate");
    double* d = dst.data();
    const double* s = g.data();
    for (long long i = 0; i < g.numel(); ++i) d[i] += s[i];
}

void Tape::backward(Var root) {
    if (!root.valid() || !nodes_[root.id].value.is_scalar())
        throw ParameterError("backward requires a scalar root node");
    grads_.assign(nodes_.size(), Tensor());
    touched_.assign(nodes_.size(), 0);
    grads_[root.id] = Tensor::scalar(1.0);
    touched_[root.id] = 1;
    for (int id = root.id; id >= 0; --id) {
        if (!touched_[id] || !nodes_[id].pull) continue;
        nodes_[id].pull(*this, grads_[id]);
    }
    // Untouched nodes report zero gradients of the right shape.
    for (size_t id = 0; id < nodes_.size(); ++id)
        if (!touched_[id]) grads_[id] = Tensor::zeros(nodes_[id].value.shape());
}

Var add(Tape& t, Var a, Var b) {
    const Tensor& va = t.value(a);
    const Tensor& vb = t.value(b);
    require(va.same_shape(vb), "add: shape mismatch");
    Tensor out = va;
    for (long long i = 0; i < out.numel(); ++i) out[i] += vb[i];
    return t.record(std::move(out), [a, b](Tape& tp, const Tensor& g) {
        tp.accumulate(a, g);
        tp.accumulate(b, g);
    });
}

Var subtract(Tape& t, Var a, Var b) {
    const Tensor& va = t.value(a);
    const Tensor& vb = t.value(b);
    require(va.same_shape(vb), "subtract: shape mismatch");
    Tensor out = va;
    for (long long i = 0; i < out.numel(); ++i) out[i] -= vb[i];
    return t.record(std::move(out), [a, b](Tape& tp, const Tensor& g) {
        tp.accumulate(a, g);
        Tensor ng = g;
        for (long long i = 0; i < ng.numel(); ++i) ng[i] = -ng[i];
        tp.accumulate(b, ng);
    });
}

Var elementwise_multiply(Tape& t, Var a, Var b) {
    const Tensor& va = t.value(a);
    const Tensor& vb = t.value(b);
    require(va.same_shape(vb), "elementwise_multiply: shape mismatch");
    Tensor out = va;
    for (long long i = 0; i < out.numel(); ++i) out[i] *= vb[i];
    return t.record(std::move(out), [a, b](Tape& tp, const Tensor& g) {
        const Tensor& va2 = tp.value(a);
        const Tensor& vb2 = tp.value(b);
        Tensor ga = g, gb = g;
        for (long long i = 0; i < g.numel(); ++i) {
            ga[i] *= vb2[i];
            gb[i] *= va2[i];
        }
        tp.accumulate(a, ga);
        tp.accumulate(b, gb);
    });
}

Var scalar_multiply(Tape& t, Var a, double s) {
    Tensor out = t.value(a);
    for (long long i = 0; i < out.numel(); ++i) out[i] *= s;
    return t.record(std::move(out), [a, s](Tape& tp, const Tensor& g) {
        Tensor ga = g;
        for (long long i = 0; i < ga.numel(); ++i) ga[i] *= s;
        tp.accumulate(a, ga);
    });
}

Var add_rowvec(Tape& t, Var a, Var b) {
    const Tensor& va = t.value(a);
    const Tensor& vb = t.value(b);
    require(va.shape().size() == 2 && vb.numel() == va.cols(), "add_rowvec: shape mismatch");
    Tensor out = va;
    const int m = va.rows(), n = va.cols();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(i, j) += vb[j];
    return t.record(std::move(out), [a, b, m, n](Tape& tp, const Tensor& g) {
        tp.accumulate(a, g);
        Tensor gb = Tensor::zeros(tp.value(b).shape());
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) gb[j] += g.at(i, j);
        tp.accumulate(b, gb);
    });
}

Var matmul(Tape& t, Var a, Var b) {
    const Tensor& va = t.value(a);
    const Tensor& vb = t.value(b);
    require(va.shape().size() == 2 && vb.shape().size() == 2, "matmul: operands must be 2-D");
    require(va.cols() == vb.rows(), "matmul: inner dimensions disagree");
    const int m = va.rows(), k = va.cols(), n = vb.cols();
    Tensor out({m, n});
    matmul_acc(va.data(), vb.data(), out.data(), m, k, n);
    return t.record(std::move(out), [a, b, m, k, n](Tape& tp, const Tensor& g) {
        Tensor ga({m, k});
        Tensor gb({k, n});
        matmul_bt_acc(g.data(), tp.value(b).data(), ga.data(), m, n, k);
        matmul_at_acc(tp.value(a).data(), g.data(), gb.data(), m, k, n);
        tp.accumulate(a, ga);
        tp.accumulate(b, gb);
    });
}

Var transpose(Tape& t, Var a) {
    const Tensor& va = t.value(a);
    require(va.shape().size() == 2, "transpose: 2-D only");
    const int m = va.rows(), n = va.cols();
    Tensor out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(j, i) = va.at(i, j);
    return t.record(std::move(out), [a, m, n](Tape& tp, const Tensor& g) {
        Tensor ga({m, n});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) ga.at(i, j) = g.at(j, i);
        tp.accumulate(a, ga);
    });
}

Var reshape(Tape& t, Var a, std::vector<int> shape) {
    const Tensor& va = t.value(a);
    Tensor out(std::move(shape), va.vec());
    std::vector<int> old_shape = va.shape();
    return t.record(std::move(out), [a, old_shape](Tape& tp, const Tensor& g) {
        tp.accumulate(a, Tensor(old_shape, g.vec()));
    });
}

Var concat_rows(Tape& t, const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_rows: empty input");
    const int n = t.value(parts[0]).cols();
    int m = 0;
    for (Var p : parts) {
        require(t.value(p).shape().size() == 2 && t.value(p).cols() == n,
                "concat_rows: column mismatch");
        m += t.value(p).rows();
    }
    Tensor out({m, n});
    int r = 0;
    for (Var p : parts) {
        const Tensor& vp = t.value(p);
        std::copy(vp.data(), vp.data() + vp.numel(), out.data() + static_cast<size_t>(r) * n);
        r += vp.rows();
    }
    std::vector<Var> ps = parts;
    return t.record(std::move(out), [ps, n](Tape& tp, const Tensor& g) {
        int r2 = 0;
        for (Var p : ps) {
            const int pr = tp.value(p).rows();
            Tensor gp({pr, n});
            std::copy(g.data() + static_cast<size_t>(r2) * n,
                      g.data() + static_cast<size_t>(r2 + pr) * n, gp.data());
            tp.accumulate(p, gp);
            r2 += pr;
        }
    });
}

Var concat_cols(Tape& t, const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_cols: empty input");
    const int m = t.value(parts[0]).rows();
    int n = 0;
    for (Var p : parts) {
        require(t.value(p).shape().size() == 2 && t.value(p).rows() == m,
                "concat_cols: row mismatch");
        n += t.value(p).cols();
    }
    Tensor out({m, n});
    int c = 0;
    for (Var p : parts) {
        const Tensor& vp = t.value(p);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < vp.cols(); ++j) out.at(i, c + j) = vp.at(i, j);
        c += vp.cols();
    }
    std::vector<Var> ps = parts;
    return t.record(std::move(out), [ps, m](Tape& tp, const Tensor& g) {
        int c2 = 0;
        for (Var p : ps) {
            const int pc = tp.value(p).cols();
            Tensor gp({m, pc});
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < pc; ++j) gp.at(i, j) = g.at(i, c2 + j);
            tp.accumulate(p, gp);
            c2 += pc;
        }
    });
}

Var slice_rows(Tape& t, Var a, int r0, int r1) {
    const Tensor& va = t.value(a);
    require(va.shape().size() == 2 && 0 <= r0 && r0 < r1 && r1 <= va.rows(),
            "slice_rows: bad range");
    const int n = va.cols();
    Tensor out({r1 - r0, n});
    std::copy(va.data() + static_cast<size_t>(r0) * n, va.data() + static_cast<size_t>(r1) * n,
              out.data());
    return t.record(std::move(out), [a, r0, n](Tape& tp, const Tensor& g) {
        Tensor ga = Tensor::zeros(tp.value(a).shape());
        std::copy(g.data(), g.data() + g.numel(), ga.data() + static_cast<size_t>(r0) * n);
        tp.accumulate(a, ga);
    });
}

Var slice_cols(Tape& t, Var a, int c0, int c1) {
    const Tensor& va = t.value(a);
    require(va.shape().size() == 2 && 0 <= c0 && c0 < c1 && c1 <= va.cols(),
            "slice_cols: bad range");
    const int m = va.rows();
    Tensor out({m, c1 - c0});
    for (int i = 0; i < m; ++i)
        for (int j = c0; j < c1; ++j) out.at(i, j - c0) = va.at(i, j);
    return t.record(std::move(out), [a, c0, m](Tape& tp, const Tensor& g) {
        Tensor ga = Tensor::zeros(tp.value(a).shape());
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < g.cols(); ++j) ga.at(i, c0 + j) = g.at(i, j);
        tp.accumulate(a, ga);
    });
}

Var sum_all(Tape& t, Var a) {
    const Tensor& va = t.value(a);
    double s = 0.0;
    for (long long i = 0; i < va.numel(); ++i) s += va[i];
    return t.record(Tensor::scalar(s), [a](Tape& tp, const Tensor& g) {
        Tensor ga = Tensor::full(tp.value(a).shape(), g[0]);
        tp.accumulate(a, ga);
    });
}

Var mean_over_axis(Tape& t, Var a) {
    const Tensor& va = t.value(a);
    require(va.shape().size() == 2 && va.rows() >= 1, "mean_over_axis: 2-D with rows required");
    const int m = va.rows(), n = va.cols();
    Tensor out({n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[j] += va.at(i, j);
    for (int j = 0; j < n; ++j) out[j] /= m;
    return t.record(std::move(out), [a, m, n](Tape& tp, const Tensor& g) {
        Tensor ga({m, n});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) ga.at(i, j) = g[j] / m;
        tp.accumulate(a, ga);
    });
}

Var max_over_axis(Tape& t, Var a) {
    const Tensor& va = t.value(a);
    require(va.shape().size() == 2 && va.rows() >= 1, "max_over_axis: empty axis");
    const int m = va.rows(), n = va.cols();
    Tensor out({n});
    // Ties go to the first (lowest) row index.
    std::vector<int> argmax(n, 0);
    for (int j = 0; j < n; ++j) out[j] = va.at(0, j);
    for (int i = 1; i < m; ++i)
        for (int j = 0; j < n; ++j)
            if (va.at(i, j) > out[j]) {
                out[j] = va.at(i, j);
                argmax[j] = i;
            }
    return t.record(std::move(out), [a, m, n, argmax](Tape& tp, const Tensor& g) {
        Tensor ga({m, n});
        for (int j = 0; j < n; ++j) ga.at(argmax[j], j) = g[j];
        tp.accumulate(a, ga);
    });
}

Var gelu(Tape& t, Var a) {
    // tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    static constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    static constexpr double kA = 0.044715;
    const Tensor& va = t.value(a);
    Tensor out = va;
    for (long long i = 0; i < out.numel(); ++i) {
        const double x = va[i];
        out[i] = 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x)));
    }
    return t.record(std::move(out), [a](Tape& tp, const Tensor& g) {
        const Tensor& vx = tp.value(a);
        Tensor ga = g;
        for (long long i = 0; i < g.numel(); ++i) {
            const double x = vx[i];
            const double u = kC * (x + kA * x * x * x);
            const double th = std::tanh(u);
            const double du = kC * (1.0 + 3.0 * kA * x * x);
            ga[i] = g[i] * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
        }
        tp.accumulate(a, ga);
    });
}

Var layer_norm(Tape& t, Var a, Var gain, Var bias) {
    static constexpr double kEps = 1e-5;
    const Tensor& va = t.value(a);
    require(va.shape().size() == 2, "layer_norm: 2-D input required");
    const int m = va.rows(), n = va.cols();
    require(t.value(gain).numel() == n && t.value(bias).numel() == n,
            "layer_norm: affine length mismatch");
    const Tensor& vg = t.value(gain);
    const Tensor& vb = t.value(bias);
    Tensor out({m, n});
    std::vector<double> mu(m), istd(m);
    for (int i = 0; i < m; ++i) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += va.at(i, j);
        mu[i] = s / n;
        double v = 0.0;
        for (int j = 0; j < n; ++j) {
            const double d = va.at(i, j) - mu[i];
            v += d * d;
        }
        istd[i] = 1.0 / std::sqrt(v / n + kEps);
        for (int j = 0; j < n; ++j)
            out.at(i, j) = (va.at(i, j) - mu[i]) * istd[i] * vg[j] + vb[j];
    }
    return t.record(std::move(out),
                    [a, gain, bias, m, n, mu, istd](Tape& tp, const Tensor& g) {
                        const Tensor& vx = tp.value(a);
                        const Tensor& vg2 = tp.value(gain);
                        Tensor ga({m, n});
                        Tensor gg = Tensor::zeros(tp.value(gain).shape());
                        Tensor gb = Tensor::zeros(tp.value(bias).shape());
                        for (int i = 0; i < m; ++i) {
                            // xhat = (x - mu) * istd; dxhat = g * gain
                            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                            std::vector<double> xhat(n), dxhat(n);
                            for (int j = 0; j < n; ++j) {
                                xhat[j] = (vx.at(i, j) - mu[i]) * istd[i];
                                dxhat[j] = g.at(i, j) * vg2[j];
                                sum_dxhat += dxhat[j];
                                sum_dxhat_xhat += dxhat[j] * xhat[j];
                                gg[j] += g.at(i, j) * xhat[j];
                                gb[j] += g.at(i, j);
                            }
                            for (int j = 0; j < n; ++j)
                                ga.at(i, j) = istd[i] * (dxhat[j] - sum_dxhat / n -
                                                         xhat[j] * sum_dxhat_xhat / n);
                        }
                        tp.accumulate(a, ga);
                        tp.accumulate(gain, gg);
                        tp.accumulate(bias, gb);
                    });
}

Var softmax(Tape& t, Var a, double temperature) {
    if (!(temperature > 0.0)) throw ParameterError("softmax: temperature must be positive");
    const Tensor& va = t.value(a);
    const auto& shape = va.shape();
    require(shape.size() == 1 || shape.size() == 2, "softmax: 1-D or 2-D input required");
    const int n = shape.back();
    const int m = static_cast<int>(va.numel() / n);
    Tensor out(shape);
    for (int i = 0; i < m; ++i) {
        const double* row = va.data() + static_cast<size_t>(i) * n;
        double* orow = out.data() + static_cast<size_t>(i) * n;
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            orow[j] = std::exp((row[j] - mx) / temperature);
            z += orow[j];
        }
        for (int j = 0; j < n; ++j) orow[j] /= z;
    }
    Tensor out_copy = out;
    return t.record(std::move(out),
                    [a, m, n, temperature, out_copy](Tape& tp, const Tensor& g) {
                        Tensor ga(out_copy.shape());
                        for (int i = 0; i < m; ++i) {
                            const double* y = out_copy.data() + static_cast<size_t>(i) * n;
                            const double* gr = g.data() + static_cast<size_t>(i) * n;
                            double dot = 0.0;
                            for (int j = 0; j < n; ++j) dot += y[j] * gr[j];
                            double* garow = ga.data() + static_cast<size_t>(i) * n;
                            for (int j = 0; j < n; ++j)
                                garow[j] = y[j] * (gr[j] - dot) / temperature;
                        }
                        tp.accumulate(a, ga);
                    });
}

Var cross_entropy(Tape& t, const Tensor& p, Var q) {
    const Tensor& vq = t.value(q);
    if (p.numel() != vq.numel())
        throw DimensionError("cross_entropy: distribution lengths disagree");
    double loss = 0.0;
    for (long long i = 0; i < p.numel(); ++i)
        loss -= p[i] * std::log(std::max(vq[i], kLogClamp));
    Tensor pc = p;
    return t.record(Tensor::scalar(loss), [q, pc](Tape& tp, const Tensor& g) {
        const Tensor& vq2 = tp.value(q);
        Tensor gq(vq2.shape());
        for (long long i = 0; i < gq.numel(); ++i)
            gq[i] = (vq2[i] > kLogClamp) ? -g[0] * pc[i] / vq2[i] : 0.0;
        tp.accumulate(q, gq);
    });
}

}  // namespace dcglr::ad
