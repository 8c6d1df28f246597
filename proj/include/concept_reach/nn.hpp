#pragma once

// Minimal training-capable NN layers: conv, linear, group norm, activations,
// pooling, nearest upsampling, single-head cross-attention, Adam. Each layer
// instance is used once per forward pass and caches what its backward needs.

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace concept_reach {

struct Param {
    Tensor w;
    Tensor g;
    std::string name;

    explicit Param(std::vector<int> shape, std::string n = "") : w(shape), g(shape), name(std::move(n)) {}

    void init_normal(Rng& rng, real stddev) {
        for (auto& v : w.data) v = rng.normal() * stddev;
    }
};

using ParamRefs = std::vector<Param*>;

inline size_t param_count(const ParamRefs& ps) {
    size_t n = 0;
    for (const auto* p : ps) n += p->w.size();
    return n;
}

// ---------------------------------------------------------------------------

struct Linear {
    int in = 0, out = 0;
    Param W, b;
    Tensor x_cache;

    Linear(int in_, int out_, Rng& rng, const std::string& name)
        : in(in_), out(out_), W({out_, in_}, name + ".W"), b({out_}, name + ".b") {
        W.init_normal(rng, real(1) / std::sqrt(real(in_)));
    }

    void collect(ParamRefs& ps) {
        ps.push_back(&W);
        ps.push_back(&b);
    }

    // x: [N, in] -> [N, out]
    Tensor forward(const Tensor& x) {
        x_cache = x;
        int N = x.dim(0);
        Tensor y({N, out});
        y.mat(N, out).noalias() = x.mat(N, in) * W.w.mat(out, in).transpose();
        auto ym = y.mat(N, out);
        for (int n = 0; n < N; ++n)
            for (int o = 0; o < out; ++o) ym(n, o) += b.w[size_t(o)];
        return y;
    }

    Tensor backward(const Tensor& dy) {
        int N = dy.dim(0);
        W.g.mat(out, in).noalias() += dy.mat(N, out).transpose() * x_cache.mat(N, in);
        auto dym = dy.mat(N, out);
        for (int n = 0; n < N; ++n)
            for (int o = 0; o < out; ++o) b.g[size_t(o)] += dym(n, o);
        Tensor dx({N, in});
        dx.mat(N, in).noalias() = dy.mat(N, out) * W.w.mat(out, in);
        return dx;
    }
};

// ---------------------------------------------------------------------------

namespace detail {
// input [C,H,W] -> col [C*k*k, ho*wo]
inline void im2col(const real* x, int C, int H, int W, int k, int stride, int pad, int ho, int wo,
                   real* col) {
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                real* row = col + (size_t(c) * k * k + size_t(ki) * k + kj) * (size_t(ho) * wo);
                for (int i = 0; i < ho; ++i) {
                    int yi = i * stride + ki - pad;
                    for (int j = 0; j < wo; ++j) {
                        int xj = j * stride + kj - pad;
                        row[size_t(i) * wo + j] =
                            (yi >= 0 && yi < H && xj >= 0 && xj < W)
                                ? x[(size_t(c) * H + yi) * W + xj]
                                : real(0);
                    }
                }
            }
}

inline void col2im_add(const real* col, int C, int H, int W, int k, int stride, int pad, int ho,
                       int wo, real* dx) {
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                const real* row = col + (size_t(c) * k * k + size_t(ki) * k + kj) * (size_t(ho) * wo);
                for (int i = 0; i < ho; ++i) {
                    int yi = i * stride + ki - pad;
                    if (yi < 0 || yi >= H) continue;
                    for (int j = 0; j < wo; ++j) {
                        int xj = j * stride + kj - pad;
                        if (xj < 0 || xj >= W) continue;
                        dx[(size_t(c) * H + yi) * W + xj] += row[size_t(i) * wo + j];
                    }
                }
            }
}
}  // namespace detail

struct Conv2d {
    int cin = 0, cout = 0, k = 3, stride = 1, pad = 1;
    Param W, b;
    Tensor x_cache;
    int H = 0, Wd = 0, ho = 0, wo = 0;

    Conv2d(int cin_, int cout_, int k_, int stride_, int pad_, Rng& rng, const std::string& name)
        : cin(cin_), cout(cout_), k(k_), stride(stride_), pad(pad_),
          W({cout_, cin_ * k_ * k_}, name + ".W"), b({cout_}, name + ".b") {
        W.init_normal(rng, real(1) / std::sqrt(real(cin_ * k_ * k_)));
    }

    void collect(ParamRefs& ps) {
        ps.push_back(&W);
        ps.push_back(&b);
    }

    // x: [N, cin, H, W] -> [N, cout, ho, wo]
    Tensor forward(const Tensor& x) {
        x_cache = x;
        int N = x.dim(0);
        H = x.dim(2);
        Wd = x.dim(3);
        ho = (H + 2 * pad - k) / stride + 1;
        wo = (Wd + 2 * pad - k) / stride + 1;
        int K = cin * k * k, L = ho * wo;
        Tensor y({N, cout, ho, wo});
        Tensor col({K, L});
        for (int n = 0; n < N; ++n) {
            detail::im2col(x.ptr() + size_t(n) * cin * H * Wd, cin, H, Wd, k, stride, pad, ho, wo,
                           col.ptr());
            EMap(y.ptr() + size_t(n) * cout * L, cout, L).noalias() =
                W.w.mat(cout, K) * col.mat(K, L);
        }
        auto* yp = y.ptr();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < cout; ++c) {
                real bc = b.w[size_t(c)];
                real* row = yp + (size_t(n) * cout + c) * L;
                for (int l = 0; l < L; ++l) row[l] += bc;
            }
        return y;
    }

    Tensor backward(const Tensor& dy) {
        int N = dy.dim(0);
        int K = cin * k * k, L = ho * wo;
        Tensor dx({N, cin, H, Wd});
        Tensor col({K, L}), dcol({K, L});
        for (int n = 0; n < N; ++n) {
            ECMap dyn(dy.ptr() + size_t(n) * cout * L, cout, L);
            detail::im2col(x_cache.ptr() + size_t(n) * cin * H * Wd, cin, H, Wd, k, stride, pad, ho,
                           wo, col.ptr());
            W.g.mat(cout, K).noalias() += dyn * col.mat(K, L).transpose();
            dcol.mat(K, L).noalias() = W.w.mat(cout, K).transpose() * dyn;
            detail::col2im_add(dcol.ptr(), cin, H, Wd, k, stride, pad, ho, wo,
                               dx.ptr() + size_t(n) * cin * H * Wd);
            for (int c = 0; c < cout; ++c) {
                real s = 0;
                const real* row = dy.ptr() + (size_t(n) * cout + c) * L;
                for (int l = 0; l < L; ++l) s += row[l];
                b.g[size_t(c)] += s;
            }
        }
        return dx;
    }
};

// ---------------------------------------------------------------------------

struct GroupNorm {
    int groups = 8, ch = 0;
    real eps = real(1e-5);
    Param gamma, beta;
    Tensor xhat_cache;
    std::vector<real> inv_std_cache;  // per (n, group)
    int spatial = 0;

    GroupNorm(int groups_, int ch_, const std::string& name)
        : groups(groups_), ch(ch_), gamma({ch_}, name + ".gamma"), beta({ch_}, name + ".beta") {
        for (auto& v : gamma.w.data) v = real(1);
    }

    void collect(ParamRefs& ps) {
        ps.push_back(&gamma);
        ps.push_back(&beta);
    }

    // x: [N, ch, H, W]
    Tensor forward(const Tensor& x) {
        int N = x.dim(0), Hh = x.dim(2), Ww = x.dim(3);
        spatial = Hh * Ww;
        int cpg = ch / groups;
        size_t m = size_t(cpg) * spatial;
        Tensor y(x.shape);
        xhat_cache = Tensor(x.shape);
        inv_std_cache.assign(size_t(N) * groups, real(0));
        for (int n = 0; n < N; ++n)
            for (int g = 0; g < groups; ++g) {
                const real* xs = x.ptr() + (size_t(n) * ch + size_t(g) * cpg) * spatial;
                real mean = 0;
                for (size_t i = 0; i < m; ++i) mean += xs[i];
                mean /= real(m);
                real var = 0;
                for (size_t i = 0; i < m; ++i) var += (xs[i] - mean) * (xs[i] - mean);
                var /= real(m);
                real inv = real(1) / std::sqrt(var + eps);
                inv_std_cache[size_t(n) * groups + g] = inv;
                real* xh = xhat_cache.ptr() + (size_t(n) * ch + size_t(g) * cpg) * spatial;
                real* ys = y.ptr() + (size_t(n) * ch + size_t(g) * cpg) * spatial;
                for (int c = 0; c < cpg; ++c) {
                    real ga = gamma.w[size_t(g) * cpg + c];
                    real be = beta.w[size_t(g) * cpg + c];
                    for (int s = 0; s < spatial; ++s) {
                        size_t i = size_t(c) * spatial + s;
                        xh[i] = (xs[i] - mean) * inv;
                        ys[i] = ga * xh[i] + be;
                    }
                }
            }
        return y;
    }

    Tensor backward(const Tensor& dy) {
        int N = dy.dim(0);
        int cpg = ch / groups;
        size_t m = size_t(cpg) * spatial;
        Tensor dx(dy.shape);
        for (int n = 0; n < N; ++n)
            for (int g = 0; g < groups; ++g) {
                const real* dys = dy.ptr() + (size_t(n) * ch + size_t(g) * cpg) * spatial;
                const real* xh = xhat_cache.ptr() + (size_t(n) * ch + size_t(g) * cpg) * spatial;
                real inv = inv_std_cache[size_t(n) * groups + g];
                // param grads + dxhat statistics
                real sum_dxh = 0, sum_dxh_xh = 0;
                for (int c = 0; c < cpg; ++c) {
                    real ga = gamma.w[size_t(g) * cpg + c];
                    real dg = 0, db = 0;
                    for (int s = 0; s < spatial; ++s) {
                        size_t i = size_t(c) * spatial + s;
                        dg += dys[i] * xh[i];
                        db += dys[i];
                        real dxh = dys[i] * ga;
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[i];
                    }
                    gamma.g[size_t(g) * cpg + c] += dg;
                    beta.g[size_t(g) * cpg + c] += db;
                }
                real mean_dxh = sum_dxh / real(m);
                real mean_dxh_xh = sum_dxh_xh / real(m);
                real* dxs = dx.ptr() + (size_t(n) * ch + size_t(g) * cpg) * spatial;
                for (int c = 0; c < cpg; ++c) {
                    real ga = gamma.w[size_t(g) * cpg + c];
                    for (int s = 0; s < spatial; ++s) {
                        size_t i = size_t(c) * spatial + s;
                        real dxh = dys[i] * ga;
                        dxs[i] = inv * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
                    }
                }
            }
        return dx;
    }
};

// ---------------------------------------------------------------------------

struct SiLU {
    Tensor x_cache;

    Tensor forward(const Tensor& x) {
        x_cache = x;
        Tensor y(x.shape);
        for (size_t i = 0; i < x.size(); ++i) {
            real s = real(1) / (real(1) + std::exp(-x[i]));
            y[i] = x[i] * s;
        }
        return y;
    }

    Tensor backward(const Tensor& dy) {
        Tensor dx(dy.shape);
        for (size_t i = 0; i < dy.size(); ++i) {
            real s = real(1) / (real(1) + std::exp(-x_cache[i]));
            dx[i] = dy[i] * (s + x_cache[i] * s * (real(1) - s));
        }
        return dx;
    }
};

struct ReLU {
    Tensor x_cache;

    Tensor forward(const Tensor& x) {
        x_cache = x;
        Tensor y(x.shape);
        for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0 ? x[i] : real(0);
        return y;
    }

    Tensor backward(const Tensor& dy) {
        Tensor dx(dy.shape);
        for (size_t i = 0; i < dy.size(); ++i) dx[i] = x_cache[i] > 0 ? dy[i] : real(0);
        return dx;
    }
};

struct MaxPool2 {
    std::vector<int32_t> argmax;
    std::vector<int> in_shape;

    // x: [N, C, H, W] -> [N, C, H/2, W/2]
    Tensor forward(const Tensor& x) {
        in_shape = x.shape;
        int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        int ho = H / 2, wo = W / 2;
        Tensor y({N, C, ho, wo});
        argmax.assign(y.size(), 0);
        for (int nc = 0; nc < N * C; ++nc) {
            const real* xs = x.ptr() + size_t(nc) * H * W;
            real* ys = y.ptr() + size_t(nc) * ho * wo;
            int32_t* am = argmax.data() + size_t(nc) * ho * wo;
            for (int i = 0; i < ho; ++i)
                for (int j = 0; j < wo; ++j) {
                    int best = (2 * i) * W + 2 * j;
                    for (int di = 0; di < 2; ++di)
                        for (int dj = 0; dj < 2; ++dj) {
                            int idx = (2 * i + di) * W + (2 * j + dj);
                            if (xs[idx] > xs[best]) best = idx;
                        }
                    ys[size_t(i) * wo + j] = xs[best];
                    am[size_t(i) * wo + j] = best;
                }
        }
        return y;
    }

    Tensor backward(const Tensor& dy) {
        Tensor dx(in_shape);
        int N = in_shape[0], C = in_shape[1], H = in_shape[2], W = in_shape[3];
        int ho = H / 2, wo = W / 2;
        for (int nc = 0; nc < N * C; ++nc) {
            real* dxs = dx.ptr() + size_t(nc) * H * W;
            const real* dys = dy.ptr() + size_t(nc) * ho * wo;
            const int32_t* am = argmax.data() + size_t(nc) * ho * wo;
            for (int l = 0; l < ho * wo; ++l) dxs[am[l]] += dys[l];
        }
        return dx;
    }
};

struct UpsampleNearest2 {
    std::vector<int> in_shape;

    Tensor forward(const Tensor& x) {
        in_shape = x.shape;
        int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        Tensor y({N, C, H * 2, W * 2});
        for (int nc = 0; nc < N * C; ++nc) {
            const real* xs = x.ptr() + size_t(nc) * H * W;
            real* ys = y.ptr() + size_t(nc) * H * W * 4;
            for (int i = 0; i < H * 2; ++i)
                for (int j = 0; j < W * 2; ++j)
                    ys[size_t(i) * W * 2 + j] = xs[size_t(i / 2) * W + j / 2];
        }
        return y;
    }

    Tensor backward(const Tensor& dy) {
        Tensor dx(in_shape);
        int N = in_shape[0], C = in_shape[1], H = in_shape[2], W = in_shape[3];
        for (int nc = 0; nc < N * C; ++nc) {
            real* dxs = dx.ptr() + size_t(nc) * H * W;
            const real* dys = dy.ptr() + size_t(nc) * H * W * 4;
            for (int i = 0; i < H * 2; ++i)
                for (int j = 0; j < W * 2; ++j)
                    dxs[size_t(i / 2) * W + j / 2] += dys[size_t(i) * W * 2 + j];
        }
        return dx;
    }
};

// ---------------------------------------------------------------------------
// Single-head cross-attention over flattened spatial tokens.
// x: [N, Tq, C] queries; ctx: [N, Tk, D] keys/values. Returns [N, Tq, C] and,
// in backward, the gradient w.r.t. ctx (needed for prompt-space steering).
// ---------------------------------------------------------------------------

struct CrossAttention {
    int C = 0, D = 0, inner = 0;
    Param Wq, Wk, Wv, Wo, bo;
    Tensor x_cache, ctx_cache, Q, K, V, P, O;
    int N = 0, Tq = 0, Tk = 0;

    CrossAttention(int c, int d, int inner_, Rng& rng, const std::string& name)
        : C(c), D(d), inner(inner_), Wq({inner_, c}, name + ".Wq"), Wk({inner_, d}, name + ".Wk"),
          Wv({inner_, d}, name + ".Wv"), Wo({c, inner_}, name + ".Wo"), bo({c}, name + ".bo") {
        Wq.init_normal(rng, real(1) / std::sqrt(real(c)));
        Wk.init_normal(rng, real(1) / std::sqrt(real(d)));
        Wv.init_normal(rng, real(1) / std::sqrt(real(d)));
        Wo.init_normal(rng, real(1) / std::sqrt(real(inner_)));
    }

    void collect(ParamRefs& ps) {
        ps.push_back(&Wq);
        ps.push_back(&Wk);
        ps.push_back(&Wv);
        ps.push_back(&Wo);
        ps.push_back(&bo);
    }

    Tensor forward(const Tensor& x, const Tensor& ctx) {
        x_cache = x;
        ctx_cache = ctx;
        N = x.dim(0);
        Tq = x.dim(1);
        Tk = ctx.dim(1);
        Q = Tensor({N, Tq, inner});
        K = Tensor({N, Tk, inner});
        V = Tensor({N, Tk, inner});
        P = Tensor({N, Tq, Tk});
        O = Tensor({N, Tq, inner});
        Tensor y({N, Tq, C});
        real scale = real(1) / std::sqrt(real(inner));
        for (int n = 0; n < N; ++n) {
            ECMap xn(x.ptr() + size_t(n) * Tq * C, Tq, C);
            ECMap cn(ctx.ptr() + size_t(n) * Tk * D, Tk, D);
            EMap qn(Q.ptr() + size_t(n) * Tq * inner, Tq, inner);
            EMap kn(K.ptr() + size_t(n) * Tk * inner, Tk, inner);
            EMap vn(V.ptr() + size_t(n) * Tk * inner, Tk, inner);
            qn.noalias() = xn * Wq.w.mat(inner, C).transpose();
            kn.noalias() = cn * Wk.w.mat(inner, D).transpose();
            vn.noalias() = cn * Wv.w.mat(inner, D).transpose();
            EMap pn(P.ptr() + size_t(n) * Tq * Tk, Tq, Tk);
            pn.noalias() = qn * kn.transpose() * scale;
            // row-wise softmax
            for (int i = 0; i < Tq; ++i) {
                real mx = pn.row(i).maxCoeff();
                for (int j = 0; j < Tk; ++j) pn(i, j) = std::exp(pn(i, j) - mx);
                pn.row(i) /= pn.row(i).sum();
            }
            EMap on(O.ptr() + size_t(n) * Tq * inner, Tq, inner);
            on.noalias() = pn * vn;
            EMap yn(y.ptr() + size_t(n) * Tq * C, Tq, C);
            yn.noalias() = on * Wo.w.mat(C, inner).transpose();
            for (int i = 0; i < Tq; ++i)
                for (int c = 0; c < C; ++c) yn(i, c) += bo.w[size_t(c)];
        }
        return y;
    }

    // returns dx; accumulates into dctx (allocated and zeroed if not already
    // shaped [N, Tk, D]).
    Tensor backward(const Tensor& dy, Tensor& dctx) {
        if (dctx.shape != std::vector<int>{N, Tk, D}) dctx = Tensor({N, Tk, D});
        Tensor dx({N, Tq, C});
        real scale = real(1) / std::sqrt(real(inner));
        for (int n = 0; n < N; ++n) {
            ECMap dyn(dy.ptr() + size_t(n) * Tq * C, Tq, C);
            ECMap xn(x_cache.ptr() + size_t(n) * Tq * C, Tq, C);
            ECMap cn(ctx_cache.ptr() + size_t(n) * Tk * D, Tk, D);
            ECMap qn(Q.ptr() + size_t(n) * Tq * inner, Tq, inner);
            ECMap kn(K.ptr() + size_t(n) * Tk * inner, Tk, inner);
            ECMap vn(V.ptr() + size_t(n) * Tk * inner, Tk, inner);
            ECMap pn(P.ptr() + size_t(n) * Tq * Tk, Tq, Tk);
            ECMap on(O.ptr() + size_t(n) * Tq * inner, Tq, inner);

            for (int i = 0; i < Tq; ++i)
                for (int c = 0; c < C; ++c) bo.g[size_t(c)] += dyn(i, c);
            Wo.g.mat(C, inner).noalias() += dyn.transpose() * on;
            EMat dO = dyn * Wo.w.mat(C, inner);
            EMat dP = dO * vn.transpose();
            EMat dV = pn.transpose() * dO;
            // softmax backward, row-wise
            EMat dA(Tq, Tk);
            for (int i = 0; i < Tq; ++i) {
                real dot = (dP.row(i).array() * pn.row(i).array()).sum();
                dA.row(i) = pn.row(i).array() * (dP.row(i).array() - dot);
            }
            EMat dQ = dA * kn * scale;
            EMat dK = dA.transpose() * qn * scale;
            Wq.g.mat(inner, C).noalias() += dQ.transpose() * xn;
            Wk.g.mat(inner, D).noalias() += dK.transpose() * cn;
            Wv.g.mat(inner, D).noalias() += dV.transpose() * cn;
            EMap dxn(dx.ptr() + size_t(n) * Tq * C, Tq, C);
            dxn.noalias() = dQ * Wq.w.mat(inner, C);
            EMap dcn(dctx.ptr() + size_t(n) * Tk * D, Tk, D);
            dcn.noalias() += dK * Wk.w.mat(inner, D) + dV * Wv.w.mat(inner, D);
        }
        return dx;
    }
};

// ---------------------------------------------------------------------------

struct Adam {
    real lr = real(1e-3);
    real beta1 = real(0.9), beta2 = real(0.999), eps = real(1e-8);
    long step_count = 0;
    std::vector<Tensor> m_, v_;
    ParamRefs params;

    explicit Adam(ParamRefs ps, real lr_) : lr(lr_), params(std::move(ps)) {
        for (auto* p : params) {
            m_.emplace_back(p->w.shape);
            v_.emplace_back(p->w.shape);
        }
    }

    void zero_grad() {
        for (auto* p : params) p->g.zero();
    }

    void step() {
        ++step_count;
        real bc1 = real(1) - std::pow(beta1, real(step_count));
        real bc2 = real(1) - std::pow(beta2, real(step_count));
        for (size_t i = 0; i < params.size(); ++i) {
            auto& w = params[i]->w;
            auto& g = params[i]->g;
            auto& m = m_[i];
            auto& v = v_[i];
            for (size_t j = 0; j < w.size(); ++j) {
                m[j] = beta1 * m[j] + (real(1) - beta1) * g[j];
                v[j] = beta2 * v[j] + (real(1) - beta2) * g[j] * g[j];
                w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
            }
        }
    }
};

// Sinusoidal timestep embedding, dim must be even.
inline void sinusoidal_embedding(real t, int dim, real* out) {
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        real freq = std::exp(-std::log(real(10000)) * real(i) / real(half));
        out[i] = std::sin(t * freq);
        out[half + i] = std::cos(t * freq);
    }
}

// Softmax cross-entropy over logits [N, K]; returns mean loss, writes dlogits.
inline real softmax_ce(const Tensor& logits, const std::vector<int>& targets, Tensor* dlogits,
                       std::vector<real>* max_prob = nullptr) {
    int N = logits.dim(0), K = logits.dim(1);
    if (dlogits) *dlogits = Tensor(logits.shape);
    if (max_prob) max_prob->assign(size_t(N), real(0));
    real loss = 0;
    for (int n = 0; n < N; ++n) {
        const real* row = logits.ptr() + size_t(n) * K;
        real mx = row[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        real z = 0;
        for (int k = 0; k < K; ++k) z += std::exp(row[k] - mx);
        real logz = std::log(z) + mx;
        loss += logz - row[targets[size_t(n)]];
        for (int k = 0; k < K; ++k) {
            real p = std::exp(row[k] - logz);
            if (max_prob && p > (*max_prob)[size_t(n)]) (*max_prob)[size_t(n)] = p;
            if (dlogits)
                (*dlogits)[size_t(n) * K + k] =
                    (p - (k == targets[size_t(n)] ? real(1) : real(0))) / real(N);
        }
    }
    return loss / real(N);
}

}  // namespace concept_reach
