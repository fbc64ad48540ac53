#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <sstream>
#include <unordered_set>
#include <utility>
#include <vector>

#include "avrnet/blas.hpp"
#include "avrnet/common.hpp"
#include "avrnet/parallel.hpp"

namespace avrnet {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

// Grad recording is on by default and suppressed during evaluation.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
};

inline std::atomic<uint64_t>& node_counter() {
    static std::atomic<uint64_t> c{0};
    return c;
}

// One tape node: holds the forward value and, when recording, the parents and
// the rule that scatters this node's grad into theirs. Nodes are created in
// topological order, so descending sequence number is a valid backward order.
template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // lazily allocated, same extent as value
    bool requires_grad = false;
    const char* op = "leaf";
    uint64_t seq;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Node() : seq(node_counter().fetch_add(1, std::memory_order_relaxed)) {}

    int64_t numel() const { return int64_t(value.size()); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
    }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        return from_data(std::move(shape), {});
    }

    static Tensor full(Shape shape, T v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.node_->value.begin(), t.node_->value.end(), v);
        return t;
    }

    static Tensor scalar(T v) { return full({1}, v); }

    static Tensor from_data(Shape shape, std::vector<T> data) {
        for (int64_t d : shape)
            if (d <= 0) fail("tensor: extents must be positive, got " + shape_str(shape));
        auto n = std::make_shared<Node<T>>();
        int64_t count = numel_of(shape);
        if (data.empty())
            data.assign(size_t(count), T(0));
        else if (int64_t(data.size()) != count)
            fail("tensor: " + shape_str(shape) + " needs " + std::to_string(count) +
                 " values, got " + std::to_string(data.size()));
        n->shape = std::move(shape);
        n->value = std::move(data);
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t dim(size_t i) const { return node_->shape[i]; }
    size_t rank() const { return node_->shape.size(); }
    int64_t numel() const { return node_->numel(); }

    const std::vector<T>& data() const { return node_->value; }
    std::vector<T>& mut_data() { return node_->value; }
    const std::vector<T>& grad() const { return node_->grad; }
    std::vector<T>& mut_grad() { return node_->grad; }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool v = true) {
        node_->requires_grad = v;
        return *this;
    }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    T item() const {
        if (numel() != 1) fail("item: tensor has " + std::to_string(numel()) + " elements");
        return node_->value[0];
    }

    std::shared_ptr<Node<T>> node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

namespace detail {

// Builds the result node of an op; parents and the backward rule are attached
// only while grad recording is on and some input needs gradients.
template <typename T>
Tensor<T> op_result(Shape shape, std::vector<T> value, const char* op,
                    std::initializer_list<Tensor<T>> inputs,
                    std::function<void(Node<T>&)> backward_fn) {
    Tensor<T> out = Tensor<T>::from_data(std::move(shape), std::move(value));
    bool need = false;
    if (grad_mode())
        for (const auto& in : inputs) need = need || in.requires_grad();
    if (need) {
        auto n = out.node();
        n->requires_grad = true;
        n->op = op;
        n->parents.reserve(inputs.size());
        for (const auto& in : inputs) n->parents.push_back(in.node());
        n->backward_fn = std::move(backward_fn);
    }
    return out;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
    Shape out(r);
    for (size_t i = 0; i < r; ++i) {
        int64_t da = i < ra ? a[ra - 1 - i] : 1;
        int64_t db = i < rb ? b[rb - 1 - i] : 1;
        if (da != db && da != 1 && db != 1)
            fail(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                 " do not broadcast (trailing-dimension rule)");
        out[r - 1 - i] = std::max(da, db);
    }
    return out;
}

// Row-major strides with 0 on broadcast axes, aligned to out rank.
inline void broadcast_strides(const Shape& in, const Shape& out, int64_t* strides) {
    size_t r = out.size(), ri = in.size();
    int64_t acc = 1;
    std::vector<int64_t> nat(ri);
    for (size_t i = ri; i-- > 0;) {
        nat[i] = acc;
        acc *= in[i];
    }
    for (size_t i = 0; i < r; ++i) {
        if (i < r - ri) {
            strides[i] = 0;
        } else {
            size_t j = i - (r - ri);
            strides[i] = (in[j] == 1 && out[i] != 1) ? 0 : nat[j];
        }
    }
}

// Applies fn(out_index, a_index, b_index) over every output coordinate.
template <typename Fn>
void for_each_broadcast(const Shape& out, const Shape& sa, const Shape& sb, Fn&& fn) {
    size_t r = out.size();
    std::vector<int64_t> stra(r), strb(r), coord(r, 0);
    broadcast_strides(sa, out, stra.data());
    broadcast_strides(sb, out, strb.data());
    int64_t n = numel_of(out);
    int64_t ia = 0, ib = 0;
    for (int64_t io = 0; io < n; ++io) {
        fn(io, ia, ib);
        for (size_t d = r; d-- > 0;) {
            ++coord[d];
            ia += stra[d];
            ib += strb[d];
            if (coord[d] < out[d]) break;
            ia -= stra[d] * out[d];
            ib -= strb[d] * out[d];
            coord[d] = 0;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

enum class BinKind { Add, Sub, Mul };

template <typename T>
Tensor<T> binary_op(BinKind kind, const Tensor<T>& a, const Tensor<T>& b, const char* name) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    auto fwd = [kind](T x, T y) {
        switch (kind) {
            case BinKind::Add: return x + y;
            case BinKind::Sub: return x - y;
            default: return x * y;
        }
    };
    if (sa == sb) {
        const auto& xa = a.data();
        const auto& xb = b.data();
        std::vector<T> v(xa.size());
        int64_t n = int64_t(v.size());
        for (int64_t i = 0; i < n; ++i) v[i] = fwd(xa[i], xb[i]);
        return op_result<T>(sa, std::move(v), name, {a, b}, [kind](Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            int64_t n = self.numel();
            if (pa.requires_grad) {
                pa.ensure_grad();
                if (kind == BinKind::Mul)
                    for (int64_t i = 0; i < n; ++i) pa.grad[i] += self.grad[i] * pb.value[i];
                else
                    for (int64_t i = 0; i < n; ++i) pa.grad[i] += self.grad[i];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                if (kind == BinKind::Mul)
                    for (int64_t i = 0; i < n; ++i) pb.grad[i] += self.grad[i] * pa.value[i];
                else if (kind == BinKind::Sub)
                    for (int64_t i = 0; i < n; ++i) pb.grad[i] -= self.grad[i];
                else
                    for (int64_t i = 0; i < n; ++i) pb.grad[i] += self.grad[i];
            }
        });
    }
    Shape so = broadcast_shape(sa, sb, name);
    std::vector<T> v(size_t(numel_of(so)));
    const auto& xa = a.data();
    const auto& xb = b.data();
    for_each_broadcast(so, sa, sb,
                       [&](int64_t io, int64_t ia, int64_t ib) { v[io] = fwd(xa[ia], xb[ib]); });
    return op_result<T>(so, std::move(v), name, {a, b}, [kind, sa, sb, so](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for_each_broadcast(so, sa, sb, [&](int64_t io, int64_t ia, int64_t ib) {
            T g = self.grad[io];
            switch (kind) {
                case BinKind::Add:
                    if (pa.requires_grad) pa.grad[ia] += g;
                    if (pb.requires_grad) pb.grad[ib] += g;
                    break;
                case BinKind::Sub:
                    if (pa.requires_grad) pa.grad[ia] += g;
                    if (pb.requires_grad) pb.grad[ib] -= g;
                    break;
                case BinKind::Mul:
                    if (pa.requires_grad) pa.grad[ia] += g * pb.value[ib];
                    if (pb.requires_grad) pb.grad[ib] += g * pa.value[ia];
                    break;
            }
        });
    });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(detail::BinKind::Add, a, b, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(detail::BinKind::Sub, a, b, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(detail::BinKind::Mul, a, b, "mul");
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    const auto& x = a.data();
    std::vector<T> v(x.size());
    for (size_t i = 0; i < x.size(); ++i) v[i] = x[i] * c;
    return detail::op_result<T>(a.shape(), std::move(v), "scale", {a}, [c](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int64_t i = 0; i < self.numel(); ++i) p.grad[i] += self.grad[i] * c;
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    const auto& x = a.data();
    std::vector<T> v(x.size());
    int64_t n = int64_t(x.size());
    for (int64_t i = 0; i < n; ++i) v[i] = x[i] > T(0) ? x[i] : T(0);
    return detail::op_result<T>(a.shape(), std::move(v), "relu", {a}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int64_t i = 0; i < self.numel(); ++i)
            if (p.value[i] > T(0)) p.grad[i] += self.grad[i];
    });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    const auto& x = a.data();
    std::vector<T> v(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        T z = x[i];
        v[i] = z >= T(0) ? T(1) / (T(1) + std::exp(-z))
                         : std::exp(z) / (T(1) + std::exp(z));
    }
    return detail::op_result<T>(a.shape(), std::move(v), "sigmoid", {a}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int64_t i = 0; i < self.numel(); ++i) {
            T s = self.value[i];
            p.grad[i] += self.grad[i] * s * (T(1) - s);
        }
    });
}

template <typename T>
Tensor<T> exp_op(const Tensor<T>& a) {
    const auto& x = a.data();
    std::vector<T> v(x.size());
    for (size_t i = 0; i < x.size(); ++i) v[i] = std::exp(x[i]);
    return detail::op_result<T>(a.shape(), std::move(v), "exp", {a}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int64_t i = 0; i < self.numel(); ++i) p.grad[i] += self.grad[i] * self.value[i];
    });
}

template <typename T>
Tensor<T> log_op(const Tensor<T>& a) {
    const auto& x = a.data();
    std::vector<T> v(x.size());
    for (size_t i = 0; i < x.size(); ++i) v[i] = std::log(x[i]);
    return detail::op_result<T>(a.shape(), std::move(v), "log", {a}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int64_t i = 0; i < self.numel(); ++i) p.grad[i] += self.grad[i] / p.value[i];
    });
}

// ---------------------------------------------------------------------------
// matmul / linear
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        fail("matmul: expects rank-2 tensors, got " + shape_str(a.shape()) + " and " +
             shape_str(b.shape()));
    int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        fail("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
             shape_str(b.shape()));
    std::vector<T> v(size_t(m * n));
    gemm(false, false, m, n, k, T(1), a.data().data(), k, b.data().data(), n, T(0), v.data(), n);
    return detail::op_result<T>({m, n}, std::move(v), "matmul", {a, b}, [m, n, k](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            gemm(false, true, m, k, n, T(1), self.grad.data(), n, pb.value.data(), n, T(1),
                 pa.grad.data(), k);
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            gemm(true, false, k, n, m, T(1), pa.value.data(), k, self.grad.data(), n, T(1),
                 pb.grad.data(), n);
        }
    });
}

// y = x * w^T + bias; x: [N, in], w: [out, in], bias: [out] (optional).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    if (x.rank() != 2 || w.rank() != 2) fail("linear: expects rank-2 input and weight");
    int64_t n_rows = x.dim(0), in = x.dim(1), out = w.dim(0);
    if (w.dim(1) != in)
        fail("linear: weight " + shape_str(w.shape()) + " does not match input " +
             shape_str(x.shape()));
    bool has_bias = bias.defined();
    if (has_bias && bias.numel() != out) fail("linear: bias length mismatch");
    std::vector<T> v(size_t(n_rows * out));
    constexpr int64_t kRowChunk = 128;
    int64_t chunks = (n_rows + kRowChunk - 1) / kRowChunk;
    parallel_chunks(n_rows, chunks, [&](int64_t lo, int64_t hi, int64_t) {
        gemm(false, true, hi - lo, out, in, T(1), x.data().data() + lo * in, in, w.data().data(),
             in, T(0), v.data() + lo * out, out);
    });
    if (has_bias) {
        const auto& bv = bias.data();
        parallel_for(n_rows, [&](int64_t r) {
            T* row = v.data() + r * out;
            for (int64_t j = 0; j < out; ++j) row[j] += bv[j];
        });
    }
    auto bw = [n_rows, in, out, has_bias](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        int64_t chunks = (n_rows + kRowChunk - 1) / kRowChunk;
        if (px.requires_grad) {
            px.ensure_grad();
            parallel_chunks(n_rows, chunks, [&](int64_t lo, int64_t hi, int64_t) {
                gemm(false, false, hi - lo, in, out, T(1), self.grad.data() + lo * out, out,
                     pw.value.data(), in, T(1), px.grad.data() + lo * in, in);
            });
        }
        if (pw.requires_grad) {
            pw.ensure_grad();
            gemm(true, false, out, in, n_rows, T(1), self.grad.data(), out, px.value.data(), in,
                 T(1), pw.grad.data(), in);
        }
        if (has_bias) {
            auto& pb = *self.parents[2];
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (int64_t r = 0; r < n_rows; ++r) {
                    const T* row = self.grad.data() + r * out;
                    for (int64_t j = 0; j < out; ++j) pb.grad[j] += row[j];
                }
            }
        }
    };
    if (has_bias)
        return detail::op_result<T>({n_rows, out}, std::move(v), "linear", {x, w, bias}, bw);
    return detail::op_result<T>({n_rows, out}, std::move(v), "linear", {x, w}, bw);
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
    return linear(x, w, Tensor<T>());
}

// ---------------------------------------------------------------------------
// reductions / shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    const auto& x = a.data();
    T acc = 0;
    for (T v : x) acc += v;
    return detail::op_result<T>({1}, {acc}, "sum", {a}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        T g = self.grad[0];
        for (auto& gv : p.grad) gv += g;
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    const auto& x = a.data();
    T acc = 0;
    for (T v : x) acc += v;
    T inv = T(1) / T(x.size());
    return detail::op_result<T>({1}, {acc * inv}, "mean", {a}, [inv](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        T g = self.grad[0] * inv;
        for (auto& gv : p.grad) gv += g;
    });
}

// Sums away one axis: [d0, ..., axis, ..., dk] -> shape without `axis`.
template <typename T>
Tensor<T> sum_axis(const Tensor<T>& a, size_t axis) {
    if (axis >= a.rank()) fail("sum_axis: axis out of range");
    const Shape& s = a.shape();
    int64_t outer = 1, inner = 1, len = s[axis];
    for (size_t i = 0; i < axis; ++i) outer *= s[i];
    for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    Shape so;
    for (size_t i = 0; i < s.size(); ++i)
        if (i != axis) so.push_back(s[i]);
    if (so.empty()) so = {1};
    std::vector<T> v(size_t(outer * inner), T(0));
    const T* x = a.data().data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t l = 0; l < len; ++l) {
            const T* src = x + (o * len + l) * inner;
            T* dst = v.data() + o * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    return detail::op_result<T>(so, std::move(v), "sum_axis", {a},
                                [outer, inner, len](Node<T>& self) {
                                    auto& p = *self.parents[0];
                                    if (!p.requires_grad) return;
                                    p.ensure_grad();
                                    for (int64_t o = 0; o < outer; ++o)
                                        for (int64_t l = 0; l < len; ++l) {
                                            T* dst = p.grad.data() + (o * len + l) * inner;
                                            const T* src = self.grad.data() + o * inner;
                                            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
                                        }
                                });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (numel_of(shape) != a.numel())
        fail("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    std::vector<T> v = a.data();
    return detail::op_result<T>(std::move(shape), std::move(v), "reshape", {a}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int64_t i = 0; i < self.numel(); ++i) p.grad[i] += self.grad[i];
    });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, size_t axis) {
    if (parts.empty()) fail("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) fail("concat: axis out of range");
    int64_t outer = 1, inner = 1;
    for (size_t i = 0; i < axis; ++i) outer *= s0[i];
    for (size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
    int64_t total_axis = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != s0.size()) fail("concat: rank mismatch");
        for (size_t i = 0; i < s.size(); ++i)
            if (i != axis && s[i] != s0[i])
                fail("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(s0));
        total_axis += s[axis];
    }
    Shape so = s0;
    so[axis] = total_axis;
    std::vector<T> v(size_t(outer * total_axis * inner));
    std::vector<int64_t> offsets(parts.size()), lengths(parts.size());
    int64_t off = 0;
    for (size_t pi = 0; pi < parts.size(); ++pi) {
        offsets[pi] = off;
        lengths[pi] = parts[pi].dim(axis);
        int64_t len = lengths[pi];
        const T* src = parts[pi].data().data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(v.data() + (o * total_axis + off) * inner, src + o * len * inner,
                        size_t(len * inner) * sizeof(T));
        off += len;
    }
    Tensor<T> out = Tensor<T>::from_data(so, std::move(v));
    bool need = false;
    if (grad_mode())
        for (const auto& p : parts) need = need || p.requires_grad();
    if (need) {
        auto n = out.node();
        n->requires_grad = true;
        n->op = "concat";
        for (const auto& p : parts) n->parents.push_back(p.node());
        n->backward_fn = [outer, inner, total_axis, offsets, lengths](Node<T>& self) {
            for (size_t pi = 0; pi < self.parents.size(); ++pi) {
                auto& p = *self.parents[pi];
                if (!p.requires_grad) continue;
                p.ensure_grad();
                int64_t len = lengths[pi];
                for (int64_t o = 0; o < outer; ++o) {
                    const T* src = self.grad.data() + (o * total_axis + offsets[pi]) * inner;
                    T* dst = p.grad.data() + o * len * inner;
                    for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                }
            }
        };
    }
    return out;
}

// Selects rows of a rank-2 tensor: out[i, :] = x[idx[i], :].
template <typename T>
Tensor<T> rows_gather(const Tensor<T>& x, const std::vector<int64_t>& idx) {
    if (x.rank() != 2) fail("rows_gather: expects rank-2 input");
    int64_t rows = x.dim(0), width = x.dim(1);
    for (int64_t i : idx)
        if (i < 0 || i >= rows) fail("rows_gather: index out of range");
    std::vector<T> v(idx.size() * size_t(width));
    const T* src = x.data().data();
    for (size_t i = 0; i < idx.size(); ++i)
        std::memcpy(v.data() + i * size_t(width), src + idx[i] * width, size_t(width) * sizeof(T));
    return detail::op_result<T>({int64_t(idx.size()), width}, std::move(v), "rows_gather", {x},
                                [idx, width](Node<T>& self) {
                                    auto& p = *self.parents[0];
                                    if (!p.requires_grad) return;
                                    p.ensure_grad();
                                    for (size_t i = 0; i < idx.size(); ++i) {
                                        const T* src = self.grad.data() + i * size_t(width);
                                        T* dst = p.grad.data() + idx[i] * width;
                                        for (int64_t j = 0; j < width; ++j) dst[j] += src[j];
                                    }
                                });
}

// ---------------------------------------------------------------------------
// softmax / losses
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& a) {
    if (a.rank() < 1) fail("softmax: needs at least rank 1");
    int64_t k = a.shape().back();
    int64_t rows = a.numel() / k;
    std::vector<T> v(a.data().size());
    const T* x = a.data().data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x + r * k;
        T* vr = v.data() + r * k;
        T mx = xr[0];
        for (int64_t i = 1; i < k; ++i) mx = std::max(mx, xr[i]);
        T z = 0;
        for (int64_t i = 0; i < k; ++i) {
            vr[i] = std::exp(xr[i] - mx);
            z += vr[i];
        }
        for (int64_t i = 0; i < k; ++i) vr[i] /= z;
    }
    return detail::op_result<T>(a.shape(), std::move(v), "softmax", {a}, [k, rows](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const T* y = self.value.data() + r * k;
            const T* g = self.grad.data() + r * k;
            T dot = 0;
            for (int64_t i = 0; i < k; ++i) dot += y[i] * g[i];
            T* dst = p.grad.data() + r * k;
            for (int64_t i = 0; i < k; ++i) dst[i] += y[i] * (g[i] - dot);
        }
    });
}

// Mean over rows of -log softmax(logits)[target]; logits: [B, K].
template <typename T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, const std::vector<int64_t>& targets) {
    if (logits.rank() != 2) fail("cross_entropy: expects rank-2 logits");
    int64_t b = logits.dim(0), k = logits.dim(1);
    if (int64_t(targets.size()) != b) fail("cross_entropy: target count mismatch");
    for (int64_t t : targets)
        if (t < 0 || t >= k) fail("cross_entropy: target index out of range");
    const T* x = logits.data().data();
    std::vector<T> probs(size_t(b * k));
    T loss = 0;
    for (int64_t r = 0; r < b; ++r) {
        const T* xr = x + r * k;
        T* pr = probs.data() + r * k;
        T mx = xr[0];
        for (int64_t i = 1; i < k; ++i) mx = std::max(mx, xr[i]);
        T z = 0;
        for (int64_t i = 0; i < k; ++i) {
            pr[i] = std::exp(xr[i] - mx);
            z += pr[i];
        }
        for (int64_t i = 0; i < k; ++i) pr[i] /= z;
        loss -= std::log(pr[targets[size_t(r)]]);
    }
    loss /= T(b);
    return detail::op_result<T>({1}, {loss}, "cross_entropy", {logits},
                                [b, k, targets, probs](Node<T>& self) {
                                    auto& p = *self.parents[0];
                                    if (!p.requires_grad) return;
                                    p.ensure_grad();
                                    T g = self.grad[0] / T(b);
                                    for (int64_t r = 0; r < b; ++r) {
                                        const T* pr = probs.data() + r * k;
                                        T* dst = p.grad.data() + r * k;
                                        for (int64_t i = 0; i < k; ++i) dst[i] += g * pr[i];
                                        dst[targets[size_t(r)]] -= g;
                                    }
                                });
}

// Mean over all coordinates of the stable binary cross-entropy with logits.
template <typename T>
Tensor<T> bce_logits_mean(const Tensor<T>& logits, const std::vector<T>& targets) {
    if (int64_t(targets.size()) != logits.numel()) fail("bce: target size mismatch");
    const auto& x = logits.data();
    T loss = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        T z = x[i], r = targets[i];
        loss += std::max(z, T(0)) - z * r + std::log1p(std::exp(-std::abs(z)));
    }
    T inv = T(1) / T(x.size());
    loss *= inv;
    return detail::op_result<T>({1}, {loss}, "bce_logits", {logits},
                                [targets, inv](Node<T>& self) {
                                    auto& p = *self.parents[0];
                                    if (!p.requires_grad) return;
                                    p.ensure_grad();
                                    T g = self.grad[0] * inv;
                                    for (size_t i = 0; i < targets.size(); ++i) {
                                        T z = p.value[i];
                                        T s = z >= T(0) ? T(1) / (T(1) + std::exp(-z))
                                                        : std::exp(z) / (T(1) + std::exp(z));
                                        p.grad[i] += g * (s - targets[i]);
                                    }
                                });
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Parameter (leaf) gradients accumulate
// across calls; intermediate gradient buffers are released as soon as consumed.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1)
        fail("backward: loss must be a connected scalar tensor");
    auto root = loss.node();
    if (!root->requires_grad) return;  // nothing reachable needs gradients

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<Node<T>*> stack{root.get()};
    seen.insert(root.get());
    while (!stack.empty()) {
        Node<T>* nd = stack.back();
        stack.pop_back();
        order.push_back(nd);
        for (auto& p : nd->parents)
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(),
              [](const Node<T>* a, const Node<T>* b) { return a->seq > b->seq; });

    root->ensure_grad();
    root->grad[0] += T(1);
    for (Node<T>* nd : order) {
        if (!nd->backward_fn) continue;
        if (!nd->grad.empty()) nd->backward_fn(*nd);
        nd->grad = std::vector<T>();  // release; leaves keep theirs
    }
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// fn must be deterministic and map a tensor to a scalar.
template <typename T>
T grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& fn, Tensor<T> x, T step) {
    if (step <= T(0)) fail("grad_check: step must be positive");
    x.set_requires_grad(true);
    T f1, f2;
    {
        NoGradGuard ng;
        f1 = fn(x).item();
        f2 = fn(x).item();
    }
    if (f1 != f2) fail("grad_check: fn is not deterministic (two evaluations differ)");
    x.zero_grad();
    Tensor<T> y = fn(x);
    if (y.numel() != 1) fail("grad_check: fn must produce a scalar");
    backward(y);
    std::vector<T> analytic = x.grad();
    if (analytic.empty()) analytic.assign(size_t(x.numel()), T(0));

    T worst = 0;
    auto& data = x.mut_data();
    NoGradGuard ng;
    for (size_t i = 0; i < data.size(); ++i) {
        T keep = data[i];
        data[i] = keep + step;
        T fp = fn(x).item();
        data[i] = keep - step;
        T fm = fn(x).item();
        data[i] = keep;
        T fd = (fp - fm) / (2 * step);
        T err = std::abs(analytic[i] - fd) / std::max(T(1), std::abs(analytic[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

// Spot-checks n_samples randomly chosen parameter coordinates of an arbitrary
// scalar-valued computation against central differences.
template <typename T>
T sampled_grad_check(const std::function<Tensor<T>()>& loss_fn, std::vector<Tensor<T>> params,
                     int n_samples, T step, uint64_t seed) {
    T f1, f2;
    {
        NoGradGuard ng;
        f1 = loss_fn().item();
        f2 = loss_fn().item();
    }
    if (f1 != f2) fail("sampled_grad_check: loss is not deterministic");
    for (auto& p : params) p.zero_grad();
    Tensor<T> loss = loss_fn();
    backward(loss);
    std::vector<std::vector<T>> analytic;
    analytic.reserve(params.size());
    int64_t total = 0;
    for (auto& p : params) {
        analytic.push_back(p.grad().empty() ? std::vector<T>(size_t(p.numel()), T(0)) : p.grad());
        total += p.numel();
    }
    Rng rng(seed);
    T worst = 0;
    NoGradGuard ng;
    for (int s = 0; s < n_samples; ++s) {
        int64_t flat = rng.uniform_int(0, total - 1);
        size_t pi = 0;
        while (flat >= params[pi].numel()) flat -= params[pi++].numel();
        auto& data = params[pi].mut_data();
        T keep = data[size_t(flat)];
        data[size_t(flat)] = keep + step;
        T fp = loss_fn().item();
        data[size_t(flat)] = keep - step;
        T fm = loss_fn().item();
        data[size_t(flat)] = keep;
        T fd = (fp - fm) / (2 * step);
        T a = analytic[pi][size_t(flat)];
        worst = std::max(worst, std::abs(a - fd) / std::max(T(1), std::abs(a)));
    }
    return worst;
}

}  // namespace avrnet
