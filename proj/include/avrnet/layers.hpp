#pragma once

#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include "avrnet/tensor.hpp"

namespace avrnet {

// ---------------------------------------------------------------------------
// convolution (cross-correlation, zero padding)
// ---------------------------------------------------------------------------

inline int64_t conv_out_len(int64_t in, int64_t k, int64_t stride, int64_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

// Samples per GEMM chunk; a function of the layer geometry only, so results
// do not depend on the worker count.
inline int64_t conv_chunk_samples(int64_t k_rows, int64_t out_spatial, size_t elem_size) {
    constexpr int64_t kColBudget = 16 << 20;
    int64_t per_sample = k_rows * out_spatial * int64_t(elem_size);
    return std::clamp<int64_t>(kColBudget / std::max<int64_t>(per_sample, 1), 1, 64);
}

template <typename T>
void im2col_1d(const T* x, int64_t cin, int64_t d, int64_t k, int64_t stride, int64_t pad,
               int64_t d_out, int64_t n_samples, int64_t sample_stride, T* col) {
    int64_t krows = cin * k;
    int64_t cols = n_samples * d_out;
    for (int64_t r = 0; r < krows; ++r) {
        int64_t c = r / k, ki = r % k;
        T* dst = col + r * cols;
        for (int64_t p = 0; p < n_samples; ++p) {
            const T* xc = x + p * sample_stride + c * d;
            for (int64_t s = 0; s < d_out; ++s) {
                int64_t pos = s * stride + ki - pad;
                dst[p * d_out + s] = (pos >= 0 && pos < d) ? xc[pos] : T(0);
            }
        }
    }
}

template <typename T>
void col2im_1d(const T* col, int64_t cin, int64_t d, int64_t k, int64_t stride, int64_t pad,
               int64_t d_out, int64_t n_samples, int64_t sample_stride, T* dx) {
    int64_t krows = cin * k;
    int64_t cols = n_samples * d_out;
    for (int64_t r = 0; r < krows; ++r) {
        int64_t c = r / k, ki = r % k;
        const T* src = col + r * cols;
        for (int64_t p = 0; p < n_samples; ++p) {
            T* xc = dx + p * sample_stride + c * d;
            for (int64_t s = 0; s < d_out; ++s) {
                int64_t pos = s * stride + ki - pad;
                if (pos >= 0 && pos < d) xc[pos] += src[p * d_out + s];
            }
        }
    }
}

template <typename T>
void im2col_2d(const T* x, int64_t cin, int64_t h, int64_t w, int64_t k, int64_t stride,
               int64_t pad, int64_t ho, int64_t wo, int64_t n_samples, int64_t sample_stride,
               T* col) {
    int64_t krows = cin * k * k;
    int64_t spatial = ho * wo;
    int64_t cols = n_samples * spatial;
    for (int64_t r = 0; r < krows; ++r) {
        int64_t c = r / (k * k), ki = (r / k) % k, kj = r % k;
        T* dst = col + r * cols;
        for (int64_t p = 0; p < n_samples; ++p) {
            const T* xc = x + p * sample_stride + c * h * w;
            T* dp = dst + p * spatial;
            for (int64_t oy = 0; oy < ho; ++oy) {
                int64_t iy = oy * stride + ki - pad;
                if (iy < 0 || iy >= h) {
                    std::memset(dp + oy * wo, 0, size_t(wo) * sizeof(T));
                    continue;
                }
                const T* row = xc + iy * w;
                for (int64_t ox = 0; ox < wo; ++ox) {
                    int64_t ix = ox * stride + kj - pad;
                    dp[oy * wo + ox] = (ix >= 0 && ix < w) ? row[ix] : T(0);
                }
            }
        }
    }
}

template <typename T>
void col2im_2d(const T* col, int64_t cin, int64_t h, int64_t w, int64_t k, int64_t stride,
               int64_t pad, int64_t ho, int64_t wo, int64_t n_samples, int64_t sample_stride,
               T* dx) {
    int64_t krows = cin * k * k;
    int64_t spatial = ho * wo;
    int64_t cols = n_samples * spatial;
    for (int64_t r = 0; r < krows; ++r) {
        int64_t c = r / (k * k), ki = (r / k) % k, kj = r % k;
        const T* src = col + r * cols;
        for (int64_t p = 0; p < n_samples; ++p) {
            T* xc = dx + p * sample_stride + c * h * w;
            const T* sp = src + p * spatial;
            for (int64_t oy = 0; oy < ho; ++oy) {
                int64_t iy = oy * stride + ki - pad;
                if (iy < 0 || iy >= h) continue;
                T* row = xc + iy * w;
                for (int64_t ox = 0; ox < wo; ++ox) {
                    int64_t ix = ox * stride + kj - pad;
                    if (ix >= 0 && ix < w) row[ix] += sp[oy * wo + ox];
                }
            }
        }
    }
}

// Shared conv engine. dims = 1: x [B, Cin, D], w [Cout, Cin, k].
// dims = 2: x [B, Cin, H, W], w [Cout, Cin, k, k]. Chunked im2col + GEMM; the
// column buffer is rebuilt in backward instead of being kept on the tape.
template <typename T>
Tensor<T> conv_nd(int dims, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                  int64_t stride, int64_t pad) {
    const char* name = dims == 1 ? "conv1d" : "conv2d";
    if (int(x.rank()) != dims + 2 || int(w.rank()) != dims + 2)
        fail(std::string(name) + ": bad ranks " + shape_str(x.shape()) + ", " +
             shape_str(w.shape()));
    int64_t batch = x.dim(0), cin = x.dim(1);
    int64_t cout = w.dim(0), k = w.dim(2);
    if (w.dim(1) != cin)
        fail(std::string(name) + ": input has " + std::to_string(cin) +
             " channels but weights expect " + std::to_string(w.dim(1)));
    if (stride < 1 || pad < 0) fail(std::string(name) + ": bad stride/pad");
    bool has_bias = bias.defined();
    if (has_bias && bias.numel() != cout) fail(std::string(name) + ": bias length mismatch");

    int64_t h = dims == 2 ? x.dim(2) : 1, d = dims == 2 ? x.dim(3) : x.dim(2);
    int64_t ho = dims == 2 ? conv_out_len(h, k, stride, pad) : 1;
    int64_t wo = conv_out_len(d, k, stride, pad);
    if (ho < 1 || wo < 1) fail(std::string(name) + ": kernel larger than padded input");
    int64_t spatial = ho * wo;
    int64_t in_spatial = h * d;
    int64_t krows = cin * (dims == 2 ? k * k : k);
    int64_t sample_stride = cin * in_spatial;
    int64_t chunk = conv_chunk_samples(krows, spatial, sizeof(T));
    int64_t n_chunks = (batch + chunk - 1) / chunk;

    Shape so = dims == 2 ? Shape{batch, cout, ho, wo} : Shape{batch, cout, wo};
    std::vector<T> out(size_t(batch * cout * spatial));
    const T* xp = x.data().data();
    const T* wp = w.data().data();
    const T* bp = has_bias ? bias.data().data() : nullptr;

    parallel_chunks(batch, n_chunks, [&](int64_t b0, int64_t b1, int64_t) {
        int64_t nb = b1 - b0;
        std::vector<T> col(size_t(krows * nb * spatial));
        std::vector<T> res(size_t(cout * nb * spatial));
        if (dims == 2)
            im2col_2d(xp + b0 * sample_stride, cin, h, d, k, stride, pad, ho, wo, nb,
                      sample_stride, col.data());
        else
            im2col_1d(xp + b0 * sample_stride, cin, d, k, stride, pad, wo, nb, sample_stride,
                      col.data());
        gemm(false, false, cout, nb * spatial, krows, T(1), wp, krows, col.data(), nb * spatial,
             T(0), res.data(), nb * spatial);
        for (int64_t co = 0; co < cout; ++co)
            for (int64_t p = 0; p < nb; ++p) {
                const T* src = res.data() + (co * nb + p) * spatial;
                T* dst = out.data() + ((b0 + p) * cout + co) * spatial;
                if (has_bias) {
                    T bv = bp[co];
                    for (int64_t s = 0; s < spatial; ++s) dst[s] = src[s] + bv;
                } else {
                    std::memcpy(dst, src, size_t(spatial) * sizeof(T));
                }
            }
    });

    auto bw = [dims, batch, cin, cout, k, stride, pad, h, d, ho, wo, spatial, in_spatial, krows,
               sample_stride, chunk, n_chunks, has_bias](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        bool need_dx = px.requires_grad;
        bool need_dw = pw.requires_grad;
        if (need_dx) px.ensure_grad();
        if (need_dw) pw.ensure_grad();
        std::vector<std::vector<T>> dw_parts;
        if (need_dw) dw_parts.assign(size_t(n_chunks), {});
        const T* wp = pw.value.data();
        const T* xp = px.value.data();

        parallel_chunks(batch, n_chunks, [&](int64_t b0, int64_t b1, int64_t ci) {
            int64_t nb = b1 - b0;
            // gather dOut rows into [cout x nb*spatial]
            std::vector<T> gout(size_t(cout * nb * spatial));
            for (int64_t co = 0; co < cout; ++co)
                for (int64_t p = 0; p < nb; ++p)
                    std::memcpy(gout.data() + (co * nb + p) * spatial,
                                self.grad.data() + ((b0 + p) * cout + co) * spatial,
                                size_t(spatial) * sizeof(T));
            if (need_dw) {
                std::vector<T> col(size_t(krows * nb * spatial));
                if (dims == 2)
                    im2col_2d(xp + b0 * sample_stride, cin, h, d, k, stride, pad, ho, wo, nb,
                              sample_stride, col.data());
                else
                    im2col_1d(xp + b0 * sample_stride, cin, d, k, stride, pad, wo, nb,
                              sample_stride, col.data());
                dw_parts[size_t(ci)].assign(size_t(cout * krows), T(0));
                gemm(false, true, cout, krows, nb * spatial, T(1), gout.data(), nb * spatial,
                     col.data(), nb * spatial, T(0), dw_parts[size_t(ci)].data(), krows);
            }
            if (need_dx) {
                std::vector<T> dcol(size_t(krows * nb * spatial));
                gemm(true, false, krows, nb * spatial, cout, T(1), wp, krows, gout.data(),
                     nb * spatial, T(0), dcol.data(), nb * spatial);
                if (dims == 2)
                    col2im_2d(dcol.data(), cin, h, d, k, stride, pad, ho, wo, nb, sample_stride,
                              px.grad.data() + b0 * sample_stride);
                else
                    col2im_1d(dcol.data(), cin, d, k, stride, pad, wo, nb, sample_stride,
                              px.grad.data() + b0 * sample_stride);
            }
        });
        if (need_dw)
            for (auto& part : dw_parts)
                for (size_t i = 0; i < part.size(); ++i) pw.grad[i] += part[i];
        if (has_bias) {
            auto& pb = *self.parents[2];
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (int64_t b = 0; b < batch; ++b)
                    for (int64_t co = 0; co < cout; ++co) {
                        const T* g = self.grad.data() + (b * cout + co) * spatial;
                        T acc = 0;
                        for (int64_t s = 0; s < spatial; ++s) acc += g[s];
                        pb.grad[co] += acc;
                    }
            }
        }
    };
    if (has_bias) return op_result<T>(so, std::move(out), name, {x, w, bias}, bw);
    return op_result<T>(so, std::move(out), name, {x, w}, bw);
}

}  // namespace detail

template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int64_t stride,
                 int64_t pad) {
    return detail::conv_nd(1, x, w, bias, stride, pad);
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int64_t stride,
                 int64_t pad) {
    return detail::conv_nd(2, x, w, bias, stride, pad);
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

// Window maximum; padding acts as -inf and is never selected. Ties go to the
// first position in row-major window order.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int64_t k, int64_t stride, int64_t pad) {
    if (x.rank() != 4) fail("maxpool2d: expects [B, C, H, W]");
    if (pad >= k) fail("maxpool2d: pad must be smaller than kernel");
    int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    int64_t ho = conv_out_len(h, k, stride, pad), wo = conv_out_len(w, k, stride, pad);
    if (ho < 1 || wo < 1) fail("maxpool2d: kernel larger than padded input");
    int64_t planes = b * c, spatial = ho * wo;
    std::vector<T> out(size_t(planes * spatial));
    auto argmax = std::make_shared<std::vector<int64_t>>(size_t(planes * spatial));
    const T* xp = x.data().data();
    parallel_for(planes, [&](int64_t pl) {
        const T* src = xp + pl * h * w;
        T* dst = out.data() + pl * spatial;
        int64_t* am = argmax->data() + pl * spatial;
        for (int64_t oy = 0; oy < ho; ++oy)
            for (int64_t ox = 0; ox < wo; ++ox) {
                T best = T(0);
                int64_t best_idx = -1;
                for (int64_t i = 0; i < k; ++i) {
                    int64_t iy = oy * stride + i - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (int64_t j = 0; j < k; ++j) {
                        int64_t ix = ox * stride + j - pad;
                        if (ix < 0 || ix >= w) continue;
                        T v = src[iy * w + ix];
                        if (best_idx < 0 || v > best) {
                            best = v;
                            best_idx = iy * w + ix;
                        }
                    }
                }
                dst[oy * wo + ox] = best;
                am[oy * wo + ox] = best_idx;
            }
    });
    return detail::op_result<T>({b, c, ho, wo}, std::move(out), "maxpool2d", {x},
                                [planes, spatial, h, w, argmax](Node<T>& self) {
                                    auto& p = *self.parents[0];
                                    if (!p.requires_grad) return;
                                    p.ensure_grad();
                                    parallel_for(planes, [&](int64_t pl) {
                                        const T* g = self.grad.data() + pl * spatial;
                                        const int64_t* am = argmax->data() + pl * spatial;
                                        T* dst = p.grad.data() + pl * h * w;
                                        for (int64_t s = 0; s < spatial; ++s)
                                            if (am[s] >= 0) dst[am[s]] += g[s];
                                    });
                                });
}

// Fixed 1D average pooling; zero padding participates in the average (the
// divisor is always the kernel size).
template <typename T>
Tensor<T> avgpool1d(const Tensor<T>& x, int64_t k, int64_t stride, int64_t pad) {
    if (x.rank() != 3) fail("avgpool1d: expects [B, C, D]");
    if (pad >= k) fail("avgpool1d: pad must be smaller than kernel");
    int64_t b = x.dim(0), c = x.dim(1), d = x.dim(2);
    int64_t dout = conv_out_len(d, k, stride, pad);
    if (dout < 1) fail("avgpool1d: kernel larger than padded input");
    int64_t rows = b * c;
    std::vector<T> out(size_t(rows * dout));
    const T* xp = x.data().data();
    T inv = T(1) / T(k);
    parallel_for(rows, [&](int64_t r) {
        const T* src = xp + r * d;
        T* dst = out.data() + r * dout;
        for (int64_t o = 0; o < dout; ++o) {
            T acc = 0;
            for (int64_t i = 0; i < k; ++i) {
                int64_t pos = o * stride + i - pad;
                if (pos >= 0 && pos < d) acc += src[pos];
            }
            dst[o] = acc * inv;
        }
    });
    return detail::op_result<T>({b, c, dout}, std::move(out), "avgpool1d", {x},
                                [rows, d, dout, k, stride, pad, inv](Node<T>& self) {
                                    auto& p = *self.parents[0];
                                    if (!p.requires_grad) return;
                                    p.ensure_grad();
                                    parallel_for(rows, [&](int64_t r) {
                                        const T* g = self.grad.data() + r * dout;
                                        T* dst = p.grad.data() + r * d;
                                        for (int64_t o = 0; o < dout; ++o)
                                            for (int64_t i = 0; i < k; ++i) {
                                                int64_t pos = o * stride + i - pad;
                                                if (pos >= 0 && pos < d) dst[pos] += g[o] * inv;
                                            }
                                    });
                                });
}

// Adaptive 1D average pooling: window i covers [floor(i*D/T), ceil((i+1)*D/T)).
template <typename T>
Tensor<T> adaptive_avgpool1d(const Tensor<T>& x, int64_t target) {
    if (x.rank() != 3) fail("adaptive_avgpool1d: expects [B, C, D]");
    if (target <= 0) fail("adaptive_avgpool1d: target length must be positive");
    int64_t b = x.dim(0), c = x.dim(1), d = x.dim(2);
    if (target > d) fail("adaptive_avgpool1d: target length exceeds input length");
    int64_t rows = b * c;
    std::vector<T> out(size_t(rows * target));
    const T* xp = x.data().data();
    parallel_for(rows, [&](int64_t r) {
        const T* src = xp + r * d;
        T* dst = out.data() + r * target;
        for (int64_t o = 0; o < target; ++o) {
            int64_t lo = o * d / target;
            int64_t hi = ((o + 1) * d + target - 1) / target;
            T acc = 0;
            for (int64_t i = lo; i < hi; ++i) acc += src[i];
            dst[o] = acc / T(hi - lo);
        }
    });
    return detail::op_result<T>({b, c, target}, std::move(out), "adaptive_avgpool1d", {x},
                                [rows, d, target](Node<T>& self) {
                                    auto& p = *self.parents[0];
                                    if (!p.requires_grad) return;
                                    p.ensure_grad();
                                    parallel_for(rows, [&](int64_t r) {
                                        const T* g = self.grad.data() + r * target;
                                        T* dst = p.grad.data() + r * d;
                                        for (int64_t o = 0; o < target; ++o) {
                                            int64_t lo = o * d / target;
                                            int64_t hi = ((o + 1) * d + target - 1) / target;
                                            T gv = g[o] / T(hi - lo);
                                            for (int64_t i = lo; i < hi; ++i) dst[i] += gv;
                                        }
                                    });
                                });
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

// Batch normalization over the channel axis (axis 1). Accepts [B, C], [B, C, D]
// or [B, C, H, W]. In train mode batch statistics are used and running stats
// updated in place; in eval mode the output is an affine map using running stats.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift,
                    std::vector<T>& running_mean, std::vector<T>& running_var, T momentum, T eps,
                    bool training) {
    if (x.rank() < 2 || x.rank() > 4) fail("batchnorm: expects rank 2..4 input");
    int64_t b = x.dim(0), c = x.dim(1);
    int64_t spatial = x.numel() / (b * c);
    if (gain.numel() != c || shift.numel() != c) fail("batchnorm: affine size mismatch");
    if (int64_t(running_mean.size()) != c || int64_t(running_var.size()) != c)
        fail("batchnorm: running stats size mismatch");
    if (training && b < 2) fail("batchnorm: train mode needs batch size >= 2 (variance undefined)");

    int64_t m = b * spatial;
    std::vector<T> out(x.data().size());
    const T* xp = x.data().data();
    const T* gp = gain.data().data();
    const T* sp = shift.data().data();
    auto mean_v = std::make_shared<std::vector<T>>(size_t(c));
    auto istd_v = std::make_shared<std::vector<T>>(size_t(c));

    parallel_for(c, [&](int64_t ch) {
        T mu, var;
        if (training) {
            T acc = 0;
            for (int64_t bi = 0; bi < b; ++bi) {
                const T* src = xp + (bi * c + ch) * spatial;
                for (int64_t s = 0; s < spatial; ++s) acc += src[s];
            }
            mu = acc / T(m);
            T acc2 = 0;
            for (int64_t bi = 0; bi < b; ++bi) {
                const T* src = xp + (bi * c + ch) * spatial;
                for (int64_t s = 0; s < spatial; ++s) {
                    T dlt = src[s] - mu;
                    acc2 += dlt * dlt;
                }
            }
            var = acc2 / T(m);
            running_mean[size_t(ch)] = (T(1) - momentum) * running_mean[size_t(ch)] + momentum * mu;
            T var_unbiased = m > 1 ? acc2 / T(m - 1) : var;
            running_var[size_t(ch)] = (T(1) - momentum) * running_var[size_t(ch)] + momentum * var_unbiased;
        } else {
            mu = running_mean[size_t(ch)];
            var = running_var[size_t(ch)];
        }
        T istd = T(1) / std::sqrt(var + eps);
        (*mean_v)[size_t(ch)] = mu;
        (*istd_v)[size_t(ch)] = istd;
        T g = gp[ch], sh = sp[ch];
        for (int64_t bi = 0; bi < b; ++bi) {
            const T* src = xp + (bi * c + ch) * spatial;
            T* dst = out.data() + (bi * c + ch) * spatial;
            for (int64_t s = 0; s < spatial; ++s) dst[s] = (src[s] - mu) * istd * g + sh;
        }
    });

    return detail::op_result<T>(
        x.shape(), std::move(out), "batchnorm", {x, gain, shift},
        [b, c, spatial, m, training, mean_v, istd_v](Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& ps = *self.parents[2];
            bool need_dx = px.requires_grad;
            if (need_dx) px.ensure_grad();
            if (pg.requires_grad) pg.ensure_grad();
            if (ps.requires_grad) ps.ensure_grad();
            parallel_for(c, [&](int64_t ch) {
                T mu = (*mean_v)[size_t(ch)], istd = (*istd_v)[size_t(ch)];
                T g = pg.value[size_t(ch)];
                T sum_dy = 0, sum_dy_xhat = 0;
                for (int64_t bi = 0; bi < b; ++bi) {
                    const T* gy = self.grad.data() + (bi * c + ch) * spatial;
                    const T* xv = px.value.data() + (bi * c + ch) * spatial;
                    for (int64_t s = 0; s < spatial; ++s) {
                        sum_dy += gy[s];
                        sum_dy_xhat += gy[s] * (xv[s] - mu) * istd;
                    }
                }
                if (pg.requires_grad) pg.grad[size_t(ch)] += sum_dy_xhat;
                if (ps.requires_grad) ps.grad[size_t(ch)] += sum_dy;
                if (!need_dx) return;
                if (training) {
                    T inv_m = T(1) / T(m);
                    for (int64_t bi = 0; bi < b; ++bi) {
                        const T* gy = self.grad.data() + (bi * c + ch) * spatial;
                        const T* xv = px.value.data() + (bi * c + ch) * spatial;
                        T* dst = px.grad.data() + (bi * c + ch) * spatial;
                        for (int64_t s = 0; s < spatial; ++s) {
                            T xhat = (xv[s] - mu) * istd;
                            dst[s] += g * istd * (gy[s] - inv_m * (sum_dy + xhat * sum_dy_xhat));
                        }
                    }
                } else {
                    for (int64_t bi = 0; bi < b; ++bi) {
                        const T* gy = self.grad.data() + (bi * c + ch) * spatial;
                        T* dst = px.grad.data() + (bi * c + ch) * spatial;
                        for (int64_t s = 0; s < spatial; ++s) dst[s] += gy[s] * g * istd;
                    }
                }
            });
        });
}

// Layer normalization over the trailing feature axis.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift, T eps) {
    if (x.rank() < 1) fail("layernorm: needs at least rank 1");
    int64_t f = x.shape().back();
    if (f < 2) fail("layernorm: feature length must be >= 2");
    if (gain.numel() != f || shift.numel() != f) fail("layernorm: affine size mismatch");
    int64_t rows = x.numel() / f;
    std::vector<T> out(x.data().size());
    const T* xp = x.data().data();
    const T* gp = gain.data().data();
    const T* sp = shift.data().data();
    auto stats = std::make_shared<std::vector<T>>(size_t(rows * 2));
    parallel_for(rows, [&](int64_t r) {
        const T* src = xp + r * f;
        T mu = 0;
        for (int64_t i = 0; i < f; ++i) mu += src[i];
        mu /= T(f);
        T var = 0;
        for (int64_t i = 0; i < f; ++i) {
            T dlt = src[i] - mu;
            var += dlt * dlt;
        }
        var /= T(f);
        T istd = T(1) / std::sqrt(var + eps);
        (*stats)[size_t(r * 2)] = mu;
        (*stats)[size_t(r * 2 + 1)] = istd;
        T* dst = out.data() + r * f;
        for (int64_t i = 0; i < f; ++i) dst[i] = (src[i] - mu) * istd * gp[i] + sp[i];
    });
    return detail::op_result<T>(
        x.shape(), std::move(out), "layernorm", {x, gain, shift}, [rows, f, stats](Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& ps = *self.parents[2];
            if (px.requires_grad) px.ensure_grad();
            if (pg.requires_grad) pg.ensure_grad();
            if (ps.requires_grad) ps.ensure_grad();
            constexpr int64_t kParts = 8;
            std::vector<std::vector<T>> dg_parts(kParts), db_parts(kParts);
            bool need_affine = pg.requires_grad || ps.requires_grad;
            parallel_chunks(rows, kParts, [&](int64_t lo, int64_t hi, int64_t part) {
                std::vector<T>* dg = nullptr;
                std::vector<T>* db = nullptr;
                if (need_affine) {
                    dg_parts[size_t(part)].assign(size_t(f), T(0));
                    db_parts[size_t(part)].assign(size_t(f), T(0));
                    dg = &dg_parts[size_t(part)];
                    db = &db_parts[size_t(part)];
                }
                for (int64_t r = lo; r < hi; ++r) {
                    const T* gy = self.grad.data() + r * f;
                    const T* xv = px.value.data() + r * f;
                    T mu = (*stats)[size_t(r * 2)], istd = (*stats)[size_t(r * 2 + 1)];
                    T sum_dy = 0, sum_dy_xhat = 0;
                    for (int64_t i = 0; i < f; ++i) {
                        T xhat = (xv[i] - mu) * istd;
                        T dxhat = gy[i] * pg.value[size_t(i)];
                        sum_dy += dxhat;
                        sum_dy_xhat += dxhat * xhat;
                        if (need_affine) {
                            (*dg)[size_t(i)] += gy[i] * xhat;
                            (*db)[size_t(i)] += gy[i];
                        }
                    }
                    if (px.requires_grad) {
                        T* dst = px.grad.data() + r * f;
                        T inv_f = T(1) / T(f);
                        for (int64_t i = 0; i < f; ++i) {
                            T xhat = (xv[i] - mu) * istd;
                            T dxhat = gy[i] * pg.value[size_t(i)];
                            dst[i] += istd * (dxhat - inv_f * (sum_dy + xhat * sum_dy_xhat));
                        }
                    }
                }
            });
            if (need_affine)
                for (int64_t part = 0; part < kParts; ++part) {
                    if (dg_parts[size_t(part)].empty()) continue;
                    for (int64_t i = 0; i < f; ++i) {
                        if (pg.requires_grad) pg.grad[size_t(i)] += dg_parts[size_t(part)][size_t(i)];
                        if (ps.requires_grad) ps.grad[size_t(i)] += db_parts[size_t(part)][size_t(i)];
                    }
                }
        });
}

// Task context normalization: z-scores each (batch, channel, position) feature
// across the group axis of a [B, G, C, D] tensor, then applies a learned
// per-channel affine shared across groups.
template <typename T>
Tensor<T> task_context_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift,
                            T eps) {
    if (x.rank() != 4) fail("task_context_norm: expects [B, G, C, D]");
    int64_t b = x.dim(0), g = x.dim(1), c = x.dim(2), d = x.dim(3);
    if (g < 2) fail("task_context_norm: needs at least 2 groups (context undefined for G=1)");
    if (gain.numel() != c || shift.numel() != c) fail("task_context_norm: affine size mismatch");
    std::vector<T> out(x.data().size());
    const T* xp = x.data().data();
    const T* gp = gain.data().data();
    const T* sp = shift.data().data();
    int64_t cd = c * d, gcd = g * cd;
    auto stats = std::make_shared<std::vector<T>>(size_t(b * cd * 2));
    parallel_for(c, [&](int64_t ch) {
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t di = 0; di < d; ++di) {
                int64_t base = bi * gcd + ch * d + di;
                T mu = 0;
                for (int64_t gi = 0; gi < g; ++gi) mu += xp[base + gi * cd];
                mu /= T(g);
                T var = 0;
                for (int64_t gi = 0; gi < g; ++gi) {
                    T dlt = xp[base + gi * cd] - mu;
                    var += dlt * dlt;
                }
                var /= T(g);
                T istd = T(1) / std::sqrt(var + eps);
                int64_t si = (bi * cd + ch * d + di) * 2;
                (*stats)[size_t(si)] = mu;
                (*stats)[size_t(si + 1)] = istd;
                for (int64_t gi = 0; gi < g; ++gi)
                    out[size_t(base + gi * cd)] =
                        (xp[base + gi * cd] - mu) * istd * gp[ch] + sp[ch];
            }
    });
    return detail::op_result<T>(
        x.shape(), std::move(out), "task_context_norm", {x, gain, shift},
        [b, g, c, d, cd, gcd, stats](Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& ps = *self.parents[2];
            if (px.requires_grad) px.ensure_grad();
            if (pg.requires_grad) pg.ensure_grad();
            if (ps.requires_grad) ps.ensure_grad();
            parallel_for(c, [&](int64_t ch) {
                T gv = pg.value[size_t(ch)];
                T dgain = 0, dshift = 0;
                for (int64_t bi = 0; bi < b; ++bi)
                    for (int64_t di = 0; di < d; ++di) {
                        int64_t base = bi * gcd + ch * d + di;
                        int64_t si = (bi * cd + ch * d + di) * 2;
                        T mu = (*stats)[size_t(si)], istd = (*stats)[size_t(si + 1)];
                        T sum_dy = 0, sum_dy_xhat = 0;
                        for (int64_t gi = 0; gi < g; ++gi) {
                            T xhat = (px.value[size_t(base + gi * cd)] - mu) * istd;
                            T gy = self.grad[size_t(base + gi * cd)];
                            sum_dy += gy * gv;
                            sum_dy_xhat += gy * gv * xhat;
                            dgain += gy * xhat;
                            dshift += gy;
                        }
                        if (px.requires_grad) {
                            T inv_g = T(1) / T(g);
                            for (int64_t gi = 0; gi < g; ++gi) {
                                T xhat = (px.value[size_t(base + gi * cd)] - mu) * istd;
                                T dxhat = self.grad[size_t(base + gi * cd)] * gv;
                                px.grad[size_t(base + gi * cd)] +=
                                    istd * (dxhat - inv_g * (sum_dy + xhat * sum_dy_xhat));
                            }
                        }
                    }
                if (pg.requires_grad) pg.grad[size_t(ch)] += dgain;
                if (ps.requires_grad) ps.grad[size_t(ch)] += dshift;
            });
        });
}

}  // namespace avrnet
