#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "embedkit/error.hpp"
#include "embedkit/tensor.hpp"

namespace embedkit {

// Handle to a value recorded on a tape. Only meaningful for the tape that
// created it.
struct Val {
    std::int32_t id = -1;
};

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        std::int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        std::int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da == db || db == 1)
            out[i] = da;
        else if (da == 1)
            out[i] = db;
        else
            throw DimensionError("cannot broadcast shapes " + shape_string(a) + " and " +
                                 shape_string(b));
    }
    return out;
}

// Strides of `shape` viewed through broadcasting as `out`; broadcast axes get
// stride zero.
inline std::vector<std::int64_t> aligned_strides(const Shape& shape, const Shape& out) {
    std::vector<std::int64_t> strides(out.size(), 0);
    std::int64_t s = 1;
    for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
        std::size_t oi = out.size() - shape.size() + static_cast<std::size_t>(i);
        if (shape[static_cast<std::size_t>(i)] != 1) strides[oi] = s;
        s *= shape[static_cast<std::size_t>(i)];
    }
    return strides;
}

template <typename T, typename F>
TensorT<T> broadcast_apply(const TensorT<T>& a, const TensorT<T>& b, F&& f) {
    if (a.same_shape(b)) {
        TensorT<T> out(a.shape());
        for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
        return out;
    }
    Shape os = broadcast_shape(a.shape(), b.shape());
    auto sa = aligned_strides(a.shape(), os);
    auto sb = aligned_strides(b.shape(), os);
    TensorT<T> out(os);
    std::vector<std::int64_t> coord(os.size(), 0);
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        std::int64_t ia = 0, ib = 0;
        for (std::size_t d = 0; d < os.size(); ++d) {
            ia += coord[d] * sa[d];
            ib += coord[d] * sb[d];
        }
        out[i] = f(a[ia], b[ib]);
        for (int d = static_cast<int>(os.size()) - 1; d >= 0; --d) {
            if (++coord[static_cast<std::size_t>(d)] < os[static_cast<std::size_t>(d)]) break;
            coord[static_cast<std::size_t>(d)] = 0;
        }
    }
    return out;
}

// Sum `g` down to `target` shape (reverse of broadcasting).
template <typename T>
TensorT<T> reduce_to_shape(const TensorT<T>& g, const Shape& target) {
    if (g.shape() == target) return g;
    auto st = aligned_strides(target, g.shape());
    TensorT<T> out(target);
    std::vector<std::int64_t> coord(g.shape().size(), 0);
    for (std::int64_t i = 0; i < g.numel(); ++i) {
        std::int64_t it = 0;
        for (std::size_t d = 0; d < g.shape().size(); ++d) it += coord[d] * st[d];
        out[it] += g[i];
        for (int d = static_cast<int>(g.shape().size()) - 1; d >= 0; --d) {
            if (++coord[static_cast<std::size_t>(d)] < g.shape()[static_cast<std::size_t>(d)]) break;
            coord[static_cast<std::size_t>(d)] = 0;
        }
    }
    return out;
}

template <typename T>
TensorT<T> matmul_values(const TensorT<T>& a, const TensorT<T>& b) {
    std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    TensorT<T> out({m, n});
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.data().data();
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t kk = 0; kk < k; ++kk) {
            T av = pa[i * k + kk];
            const T* brow = pb + kk * n;
            T* orow = po + i * n;
            for (std::int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

// a[m x n] * b^T where b is [p x n] -> [m x p]
template <typename T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& b) {
    std::int64_t m = a.dim(0), n = a.dim(1), p = b.dim(0);
    TensorT<T> out({m, p});
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < p; ++j) {
            T acc = 0;
            const T* ra = a.data().data() + i * n;
            const T* rb = b.data().data() + j * n;
            for (std::int64_t q = 0; q < n; ++q) acc += ra[q] * rb[q];
            out.at(i, j) = acc;
        }
    }
    return out;
}

// a^T * b where a is [m x k], b is [m x n] -> [k x n]
template <typename T>
TensorT<T> matmul_tn(const TensorT<T>& a, const TensorT<T>& b) {
    std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    TensorT<T> out({k, n});
    for (std::int64_t i = 0; i < m; ++i) {
        const T* ra = a.data().data() + i * k;
        const T* rb = b.data().data() + i * n;
        for (std::int64_t q = 0; q < k; ++q) {
            T av = ra[q];
            T* ro = out.data().data() + q * n;
            for (std::int64_t j = 0; j < n; ++j) ro[j] += av * rb[j];
        }
    }
    return out;
}

template <typename T>
TensorT<T> transpose_values(const TensorT<T>& a) {
    std::int64_t m = a.dim(0), n = a.dim(1);
    TensorT<T> out({n, m});
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
    return out;
}

template <typename T>
T gelu_scalar(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(0.70710678118654752440)));
}

template <typename T>
T gelu_grad_scalar(T x) {
    T cdf = T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
    T pdf = std::exp(T(-0.5) * x * x) * T(0.39894228040143267794);
    return cdf + x * pdf;
}

inline Shape reduced_shape(const Shape& in, int axis, bool keepdim) {
    Shape out;
    for (std::size_t d = 0; d < in.size(); ++d) {
        if (static_cast<int>(d) == axis) {
            if (keepdim) out.push_back(1);
        } else {
            out.push_back(in[d]);
        }
    }
    return out;
}

}  // namespace detail

// Reverse-mode gradient tape over the exported op set. Append-only: node ids
// are already a topological order, so backward is a single reverse sweep.
// Single-threaded per instance; independent tapes may run in parallel.
template <typename T>
class Tape {
public:
    Val leaf(TensorT<T> v) { return push(std::move(v), {}, nullptr); }

    Val param(const std::string& name, TensorT<T> v) {
        if (params_.count(name)) throw ContractError("parameter registered twice: " + name);
        Val id = push(std::move(v), {}, nullptr);
        params_[name] = id.id;
        return id;
    }

    const TensorT<T>& value(Val v) const { return node(v).value; }

    std::size_t size() const { return nodes_.size(); }

    bool has_param(const std::string& name) const { return params_.count(name) != 0; }

    // ---- elementwise (numpy-style broadcasting) ----

    Val add(Val a, Val b) {
        auto out = detail::broadcast_apply(node(a).value, node(b).value,
                                           [](T x, T y) { return x + y; });
        return push(std::move(out), {a.id, b.id},
                    [](Tape& t, const Node& self, const TensorT<T>& gout, GradSlots& grads) {
                        t.accum(grads, self.parents[0],
                                detail::reduce_to_shape(gout, t.nodes_[self.parents[0]].value.shape()));
                        t.accum(grads, self.parents[1],
                                detail::reduce_to_shape(gout, t.nodes_[self.parents[1]].value.shape()));
                    });
    }

    Val sub(Val a, Val b) {
        auto out = detail::broadcast_apply(node(a).value, node(b).value,
                                           [](T x, T y) { return x - y; });
        return push(std::move(out), {a.id, b.id},
                    [](Tape& t, const Node& self, const TensorT<T>& gout, GradSlots& grads) {
                        t.accum(grads, self.parents[0],
                                detail::reduce_to_shape(gout, t.nodes_[self.parents[0]].value.shape()));
                        TensorT<T> neg(gout.shape());
                        for (std::int64_t i = 0; i < gout.numel(); ++i) neg[i] = -gout[i];
                        t.accum(grads, self.parents[1],
                                detail::reduce_to_shape(neg, t.nodes_[self.parents[1]].value.shape()));
                    });
    }

    Val mul(Val a, Val b) {
        auto out = detail::broadcast_apply(node(a).value, node(b).value,
                                           [](T x, T y) { return x * y; });
        return push(std::move(out), {a.id, b.id},
                    [](Tape& t, const Node& self, const TensorT<T>& gout, GradSlots& grads) {
                        const auto& av = t.nodes_[self.parents[0]].value;
                        const auto& bv = t.nodes_[self.parents[1]].value;
                        auto ga = detail::broadcast_apply(gout, bv, [](T g, T y) { return g * y; });
                        auto gb = detail::broadcast_apply(gout, av, [](T g, T x) { return g * x; });
                        t.accum(grads, self.parents[0], detail::reduce_to_shape(ga, av.shape()));
                        t.accum(grads, self.parents[1], detail::reduce_to_shape(gb, bv.shape()));
                    });
    }

    Val div(Val a, Val b) {
        auto out = detail::broadcast_apply(node(a).value, node(b).value,
                                           [](T x, T y) { return x / y; });
        return push(std::move(out), {a.id, b.id},
                    [](Tape& t, const Node& self, const TensorT<T>& gout, GradSlots& grads) {
                        const auto& av = t.nodes_[self.parents[0]].value;
                        const auto& bv = t.nodes_[self.parents[1]].value;
                        auto ga = detail::broadcast_apply(gout, bv, [](T g, T y) { return g / y; });
                        auto axb = detail::broadcast_apply(av, bv, [](T x, T y) { return -x / (y * y); });
                        auto gb = detail::broadcast_apply(gout, axb, [](T g, T d) { return g * d; });
                        t.accum(grads, self.parents[0], detail::reduce_to_shape(ga, av.shape()));
                        t.accum(grads, self.parents[1], detail::reduce_to_shape(gb, bv.shape()));
                    });
    }

    Val log(Val a) {
        const auto& av = node(a).value;
        TensorT<T> out(av.shape());
        for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = std::log(av[i]);
        return push(std::move(out), {a.id},
                    [](Tape& t, const Node& self, const TensorT<T>& gout, GradSlots& grads) {
                        const auto& av = t.nodes_[self.parents[0]].value;
                        TensorT<T> g(av.shape());
                        for (std::int64_t i = 0; i < av.numel(); ++i) g[i] = gout[i] / av[i];
                        t.accum(grads, self.parents[0], std::move(g));
                    });
    }

    Val gelu(Val a) {
        const auto& av = node(a).value;
        TensorT<T> out(av.shape());
        for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = detail::gelu_scalar(av[i]);
        return push(std::move(out), {a.id},
                    [](Tape& t, const Node& self, const TensorT<T>& gout, GradSlots& grads) {
                        const auto& av = t.nodes_[self.parents[0]].value;
                        TensorT<T> g(av.shape());
                        for (std::int64_t i = 0; i < av.numel(); ++i)
                            g[i] = gout[i] * detail::gelu_grad_scalar(av[i]);
                        t.accum(grads, self.parents[0], std::move(g));
                    });
    }

    // ---- linear algebra ----

    Val matmul(Val a, Val b) {
        const auto& av = node(a).value;
        const auto& bv = node(b).value;
        if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
            throw DimensionError("matmul shape mismatch: " + shape_string(av.shape()) + " x " +
                                 shape_string(bv.shape()));
        return push(detail::matmul_values(av, bv), {a.id, b.id},
                    [](Tape& t, const Node& self, const TensorT<T>& gout, GradSlots& grads) {
                        const auto& av = t.nodes_[self.parents[0]].value;
                        const auto& bv = t.nodes_[self.parents[1]].value;
                        t.accum(grads, self.parents[0], detail::matmul_nt(gout, bv));
                        t.accum(grads, self.parents[1], detail::matmul_tn(av, gout));
                    });
    }

    Val transpose(Val a) {
        const auto& av = node(a).value;
        if (av.rank() != 2)
            throw DimensionError("transpose expects rank-2 tensor, got " + shape_string(av.shape()));
        return push(detail::transpose_values(av), {a.id},
                    [](Tape& t, const Node& self, const TensorT<T>& gout, GradSlots& grads) {
                        t.accum(grads, self.parents[0], detail::transpose_values(gout));
                    });
    }

    // Embedding lookup: rows of `table` selected by index.
    Val gather_rows(Val table, const std::vector<std::int64_t>& ids) {
        const auto& tv = node(table).value;
        if (tv.rank() != 2)
            throw DimensionError("gather_rows expects rank-2 table, got " + shape_string(tv.shape()));
        if (ids.empty()) throw EmptyInputError("gather_rows: empty index list");
        std::int64_t v = tv.dim(0), d = tv.dim(1);
        TensorT<T> out({static_cast<std::int64_t>(ids.size()), d});
        for (std::size_t r = 0; r < ids.size(); ++r) {
            if (ids[r] < 0 || ids[r] >= v)
                throw DimensionError("gather_rows: index " + std::to_string(ids[r]) +
                                     " out of range for table " + shape_string(tv.shape()));
            std::copy_n(tv.data().data() + ids[r] * d, d,
                        out.data().data() + static_cast<std::int64_t>(r) * d);
        }
        return push(std::move(out), {table.id},
                    [ids](Tape& t, const Node& self, const TensorT<T>& gout, GradSlots& grads) {
                        const auto& tv = t.nodes_[self.parents[0]].value;
                        TensorT<T> g(tv.shape());
                        std::int64_t d = tv.dim(1);
                        for (std::size_t r = 0; r < ids.size(); ++r)
                            for (std::int64_t j = 0; j < d; ++j)
                                g[ids[r] * d + j] += gout[static_cast<std::int64_t>(r) * d + j];
                        t.accum(grads, self.parents[0], std::move(g));
                    });
    }

    // ---- normalization / activation over the last axis ----

    Val softmax(Val a) {
        const auto& av = node(a).value;
        if (av.rank() < 1) throw DimensionError("softmax requires rank >= 1");
        std::int64_t n = av.shape().back();
        std::int64_t rows = av.numel() / n;
        TensorT<T> out(av.shape());
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* x = av.data().data() + r * n;
            T* p = out.data().data() + r * n;
            T mx = x[0];
            for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
            T s = 0;
            for (std::int64_t j = 0; j < n; ++j) {
                p[j] = std::exp(x[j] - mx);
                s += p[j];
            }
            for (std::int64_t j = 0; j < n; ++j) p[j] /= s;
        }
        return push(std::move(out), {a.id},
                    [n, rows](Tape& t, const Node& self, const TensorT<T>& gout, GradSlots& grads) {
                        const auto& p = self.value;
                        TensorT<T> g(p.shape());
                        for (std::int64_t r = 0; r < rows; ++r) {
                            const T* pr = p.data().data() + r * n;
                            const T* gr = gout.data().data() + r * n;
                            T dot = 0;
                            for (std::int64_t j = 0; j < n; ++j) dot += gr[j] * pr[j];
                            T* go = g.data().data() + r * n;
                            for (std::int64_t j = 0; j < n; ++j) go[j] = pr[j] * (gr[j] - dot);
                        }
                        t.accum(grads, self.parents[0], std::move(g));
                    });
    }

    Val layer_norm(Val x, Val gain, Val bias) {
        const auto& xv = node(x).value;
        const auto& gv = node(gain).value;
        const auto& bv = node(bias).value;
        if (xv.rank() < 1) throw DimensionError("layer_norm requires rank >= 1");
        std::int64_t n = xv.shape().back();
        if (gv.numel() != n || bv.numel() != n)
            throw DimensionError("layer_norm gain/bias must match last axis " + std::to_string(n));
        std::int64_t rows = xv.numel() / n;
        TensorT<T> out(xv.shape());
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* xr = xv.data().data() + r * n;
            T* yr = out.data().data() + r * n;
            T mu = 0;
            for (std::int64_t j = 0; j < n; ++j) mu += xr[j];
            mu /= static_cast<T>(n);
            T var = 0;
            for (std::int64_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
            var /= static_cast<T>(n);
            T inv = T(1) / std::sqrt(var + kLayerNormEps);
            for (std::int64_t j = 0; j < n; ++j) yr[j] = (xr[j] - mu) * inv * gv[j] + bv[j];
        }
        return push(
            std::move(out), {x.id, gain.id, bias.id},
            [n, rows](Tape& t, const Node& self, const TensorT<T>& gout, GradSlots& grads) {
                const auto& xv = t.nodes_[self.parents[0]].value;
                const auto& gv = t.nodes_[self.parents[1]].value;
                TensorT<T> gx(xv.shape());
                TensorT<T> gg(gv.shape());
                TensorT<T> gb(gv.shape());
                for (std::int64_t r = 0; r < rows; ++r) {
                    const T* xr = xv.data().data() + r * n;
                    const T* go = gout.data().data() + r * n;
                    T mu = 0;
                    for (std::int64_t j = 0; j < n; ++j) mu += xr[j];
                    mu /= static_cast<T>(n);
                    T var = 0;
                    for (std::int64_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
                    var /= static_cast<T>(n);
                    T inv = T(1) / std::sqrt(var + kLayerNormEps);
                    T dvar = 0, dmu = 0, sum_xc = 0;
                    for (std::int64_t j = 0; j < n; ++j) {
                        T xc = xr[j] - mu;
                        T dxhat = go[j] * gv[j];
                        dvar += dxhat * xc;
                        dmu += dxhat;
                        sum_xc += xc;
                        gg[j] += go[j] * xc * inv;
                        gb[j] += go[j];
                    }
                    dvar *= T(-0.5) * inv * inv * inv;
                    dmu = -dmu * inv + dvar * (T(-2) / static_cast<T>(n)) * sum_xc;
                    T* gx_r = gx.data().data() + r * n;
                    for (std::int64_t j = 0; j < n; ++j) {
                        T xc = xr[j] - mu;
                        gx_r[j] = go[j] * gv[j] * inv + dvar * T(2) * xc / static_cast<T>(n) +
                                  dmu / static_cast<T>(n);
                    }
                }
                t.accum(grads, self.parents[0], std::move(gx));
                t.accum(grads, self.parents[1], std::move(gg));
                t.accum(grads, self.parents[2], std::move(gb));
            });
    }

    // ---- reductions ----

    Val sum(Val a, int axis, bool keepdim = false) { return reduce(a, axis, keepdim, false); }
    Val mean(Val a, int axis, bool keepdim = false) { return reduce(a, axis, keepdim, true); }

    Val l2_norm(Val a, int axis, bool keepdim = true) {
        const auto& av = node(a).value;
        check_axis(av, axis, "l2_norm");
        Shape os = detail::reduced_shape(av.shape(), axis, keepdim);
        TensorT<T> out(os);
        auto [outer, len, inner] = axis_split(av.shape(), axis);
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t in = 0; in < inner; ++in) {
                T acc = 0;
                for (std::int64_t j = 0; j < len; ++j) {
                    T v = av[(o * len + j) * inner + in];
                    acc += v * v;
                }
                out[o * inner + in] = std::sqrt(acc);
            }
        return push(std::move(out), {a.id},
                    [axis](Tape& t, const Node& self, const TensorT<T>& gout, GradSlots& grads) {
                        const auto& av = t.nodes_[self.parents[0]].value;
                        auto [outer, len, inner] = axis_split(av.shape(), axis);
                        TensorT<T> g(av.shape());
                        for (std::int64_t o = 0; o < outer; ++o)
                            for (std::int64_t in = 0; in < inner; ++in) {
                                T norm = self.value[o * inner + in];
                                if (norm == T(0)) continue;  // subgradient 0 at the kink
                                T go = gout[o * inner + in] / norm;
                                for (std::int64_t j = 0; j < len; ++j) {
                                    std::int64_t idx = (o * len + j) * inner + in;
                                    g[idx] = go * av[idx];
                                }
                            }
                        t.accum(grads, self.parents[0], std::move(g));
                    });
    }

    // ---- shape surgery ----

    Val concat(Val a, Val b, int axis) {
        const auto& av = node(a).value;
        const auto& bv = node(b).value;
        if (av.rank() != bv.rank()) throw DimensionError("concat rank mismatch");
        check_axis(av, axis, "concat");
        for (int d = 0; d < av.rank(); ++d)
            if (d != axis && av.dim(d) != bv.dim(d))
                throw DimensionError("concat shape mismatch: " + shape_string(av.shape()) + " vs " +
                                     shape_string(bv.shape()));
        Shape os = av.shape();
        os[static_cast<std::size_t>(axis)] += bv.dim(axis);
        TensorT<T> out(os);
        auto [outer, alen, inner] = axis_split(av.shape(), axis);
        std::int64_t blen = bv.dim(axis);
        for (std::int64_t o = 0; o < outer; ++o) {
            std::copy_n(av.data().data() + o * alen * inner, alen * inner,
                        out.data().data() + o * (alen + blen) * inner);
            std::copy_n(bv.data().data() + o * blen * inner, blen * inner,
                        out.data().data() + o * (alen + blen) * inner + alen * inner);
        }
        return push(std::move(out), {a.id, b.id},
                    [axis](Tape& t, const Node& self, const TensorT<T>& gout, GradSlots& grads) {
                        const auto& av = t.nodes_[self.parents[0]].value;
                        const auto& bv = t.nodes_[self.parents[1]].value;
                        auto [outer, alen, inner] = axis_split(av.shape(), axis);
                        std::int64_t blen = bv.dim(axis);
                        TensorT<T> ga(av.shape());
                        TensorT<T> gb(bv.shape());
                        for (std::int64_t o = 0; o < outer; ++o) {
                            std::copy_n(gout.data().data() + o * (alen + blen) * inner, alen * inner,
                                        ga.data().data() + o * alen * inner);
                            std::copy_n(gout.data().data() + o * (alen + blen) * inner + alen * inner,
                                        blen * inner, gb.data().data() + o * blen * inner);
                        }
                        t.accum(grads, self.parents[0], std::move(ga));
                        t.accum(grads, self.parents[1], std::move(gb));
                    });
    }

    // n-ary concat of row vectors ([n] or [1 x n]) into a [k x n] matrix.
    Val stack_rows(const std::vector<Val>& rows) {
        if (rows.empty()) throw EmptyInputError("stack_rows: no rows");
        std::int64_t n = node(rows[0]).value.numel();
        TensorT<T> out({static_cast<std::int64_t>(rows.size()), n});
        std::vector<std::int32_t> parents;
        parents.reserve(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const auto& rv = node(rows[r]).value;
            if (rv.numel() != n || rv.rank() > 2 ||
                (rv.rank() == 2 && rv.dim(0) != 1))
                throw DimensionError("stack_rows: row " + std::to_string(r) + " has shape " +
                                     shape_string(rv.shape()));
            std::copy_n(rv.data().data(), n, out.data().data() + static_cast<std::int64_t>(r) * n);
            parents.push_back(rows[r].id);
        }
        return push(std::move(out), std::move(parents),
                    [n](Tape& t, const Node& self, const TensorT<T>& gout, GradSlots& grads) {
                        for (std::size_t r = 0; r < self.parents.size(); ++r) {
                            const auto& rv = t.nodes_[self.parents[r]].value;
                            TensorT<T> g(rv.shape());
                            std::copy_n(gout.data().data() + static_cast<std::int64_t>(r) * n, n,
                                        g.data().data());
                            t.accum(grads, self.parents[r], std::move(g));
                        }
                    });
    }

    Val slice(Val a, int axis, std::int64_t start, std::int64_t len) {
        const auto& av = node(a).value;
        check_axis(av, axis, "slice");
        if (start < 0 || len < 1 || start + len > av.dim(axis))
            throw DimensionError("slice [" + std::to_string(start) + ", " +
                                 std::to_string(start + len) + ") out of range for axis " +
                                 std::to_string(axis) + " of " + shape_string(av.shape()));
        Shape os = av.shape();
        os[static_cast<std::size_t>(axis)] = len;
        TensorT<T> out(os);
        auto [outer, alen, inner] = axis_split(av.shape(), axis);
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy_n(av.data().data() + (o * alen + start) * inner, len * inner,
                        out.data().data() + o * len * inner);
        return push(std::move(out), {a.id},
                    [axis, start, len](Tape& t, const Node& self, const TensorT<T>& gout,
                                       GradSlots& grads) {
                        const auto& av = t.nodes_[self.parents[0]].value;
                        auto [outer, alen, inner] = axis_split(av.shape(), axis);
                        TensorT<T> g(av.shape());
                        for (std::int64_t o = 0; o < outer; ++o)
                            std::copy_n(gout.data().data() + o * len * inner, len * inner,
                                        g.data().data() + (o * alen + start) * inner);
                        t.accum(grads, self.parents[0], std::move(g));
                    });
    }

    // ---- gradients ----

    // Reverse-mode gradients of a recorded scalar w.r.t. every parameter.
    std::map<std::string, TensorT<T>> grad(Val output) {
        std::vector<std::string> names;
        names.reserve(params_.size());
        for (const auto& [name, id] : params_) names.push_back(name);
        return grad(output, names);
    }

    std::map<std::string, TensorT<T>> grad(Val output, const std::vector<std::string>& names) {
        const Node& out = node(output);
        if (out.value.numel() != 1)
            throw ContractError("grad requires a scalar output, got shape " +
                                shape_string(out.value.shape()));
        if (!out.backward)
            throw ContractError("grad output was not produced by recorded operations");
        for (const auto& name : names)
            if (!params_.count(name)) throw UnknownParameterError("parameter not on tape: " + name);

        GradSlots grads(nodes_.size());
        grads[static_cast<std::size_t>(output.id)] = TensorT<T>::full(out.value.shape(), T(1));
        for (std::int32_t id = output.id; id >= 0; --id) {
            auto& slot = grads[static_cast<std::size_t>(id)];
            if (!slot || !nodes_[static_cast<std::size_t>(id)].backward) continue;
            const Node& nd = nodes_[static_cast<std::size_t>(id)];
            nd.backward(*this, nd, *slot, grads);
        }
        std::map<std::string, TensorT<T>> result;
        for (const auto& name : names) {
            std::int32_t id = params_.at(name);
            auto& slot = grads[static_cast<std::size_t>(id)];
            result[name] = slot ? std::move(*slot) : TensorT<T>(nodes_[static_cast<std::size_t>(id)].value.shape());
        }
        return result;
    }

private:
    struct Node;
    using GradSlots = std::vector<std::optional<TensorT<T>>>;
    using BackwardFn = std::function<void(Tape&, const Node&, const TensorT<T>&, GradSlots&)>;

    struct Node {
        TensorT<T> value;
        std::vector<std::int32_t> parents;
        BackwardFn backward;
    };

    static constexpr T kLayerNormEps = T(1e-5);

    Val push(TensorT<T> value, std::vector<std::int32_t> parents, BackwardFn backward) {
        nodes_.push_back(Node{std::move(value), std::move(parents), std::move(backward)});
        return Val{static_cast<std::int32_t>(nodes_.size() - 1)};
    }

    const Node& node(Val v) const {
        if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
            throw ContractError("value handle does not belong to this tape");
        return nodes_[static_cast<std::size_t>(v.id)];
    }

    void accum(GradSlots& grads, std::int32_t id, TensorT<T> g) {
        auto& slot = grads[static_cast<std::size_t>(id)];
        if (!slot) {
            slot = std::move(g);
        } else {
            for (std::int64_t i = 0; i < g.numel(); ++i) (*slot)[i] += g[i];
        }
    }

    static void check_axis(const TensorT<T>& t, int axis, const char* op) {
        if (axis < 0 || axis >= t.rank())
            throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                                 " out of range for " + shape_string(t.shape()));
    }

    // (product of dims before axis, dim at axis, product after)
    static std::tuple<std::int64_t, std::int64_t, std::int64_t> axis_split(const Shape& s, int axis) {
        std::int64_t outer = 1, inner = 1;
        for (int d = 0; d < axis; ++d) outer *= s[static_cast<std::size_t>(d)];
        for (int d = axis + 1; d < static_cast<int>(s.size()); ++d)
            inner *= s[static_cast<std::size_t>(d)];
        return {outer, s[static_cast<std::size_t>(axis)], inner};
    }

    Val reduce(Val a, int axis, bool keepdim, bool is_mean) {
        const auto& av = node(a).value;
        check_axis(av, axis, is_mean ? "mean" : "sum");
        Shape os = detail::reduced_shape(av.shape(), axis, keepdim);
        TensorT<T> out(os);
        auto [outer, len, inner] = axis_split(av.shape(), axis);
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t j = 0; j < len; ++j)
                for (std::int64_t in = 0; in < inner; ++in)
                    out[o * inner + in] += av[(o * len + j) * inner + in];
        if (is_mean)
            for (std::int64_t i = 0; i < out.numel(); ++i) out[i] /= static_cast<T>(len);
        T scale = is_mean ? T(1) / static_cast<T>(len) : T(1);
        return push(std::move(out), {a.id},
                    [axis, scale](Tape& t, const Node& self, const TensorT<T>& gout,
                                  GradSlots& grads) {
                        const auto& av = t.nodes_[self.parents[0]].value;
                        auto [outer, len, inner] = axis_split(av.shape(), axis);
                        TensorT<T> g(av.shape());
                        for (std::int64_t o = 0; o < outer; ++o)
                            for (std::int64_t j = 0; j < len; ++j)
                                for (std::int64_t in = 0; in < inner; ++in)
                                    g[(o * len + j) * inner + in] = gout[o * inner + in] * scale;
                        t.accum(grads, self.parents[0], std::move(g));
                    });
    }

    std::vector<Node> nodes_;
    std::map<std::string, std::int32_t> params_;
};

using ParamMapD = std::map<std::string, TensorD>;

// Central-difference gradient oracle, evaluated in 64-bit. Independent of the
// tape's reverse sweep; used by tests to cross-check every differentiable op.
inline ParamMapD finite_difference_gradient(const std::function<TensorD(const ParamMapD&)>& f,
                                            ParamMapD params, double eps) {
    if (!(eps > 0.0)) throw ContractError("finite_difference_gradient: eps must be positive");
    TensorD probe = f(params);
    if (probe.numel() != 1)
        throw ContractError("finite_difference_gradient requires a scalar function, got shape " +
                            shape_string(probe.shape()));
    ParamMapD out;
    for (auto& [name, p] : params) {
        TensorD g(p.shape());
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            double orig = p[i];
            p[i] = orig + eps;
            double fp = f(params).item();
            p[i] = orig - eps;
            double fm = f(params).item();
            p[i] = orig;
            g[i] = (fp - fm) / (2.0 * eps);
        }
        out.emplace(name, std::move(g));
    }
    return out;
}

}  // namespace embedkit
