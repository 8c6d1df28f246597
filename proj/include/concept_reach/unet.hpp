#pragma once

// Conditional U-net noise predictor eps(x_t, t, ctx). Four down/up stages,
// two ResNet blocks per down stage (three per up stage, consuming skips),
// cross-attention on the text encoding in the mid-block only. The mid-block
// output is the h-space; an optional constant vector is added there.

#include <deque>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nn.hpp"
#include "tensor.hpp"

namespace concept_reach {

struct UnetConfig {
    int in_channels = 3;
    int image_size = 64;
    std::vector<int> channels = {16, 32, 64, 128};
    int norm_groups = 8;
    int sin_dim = 64;    // sinusoidal timestep features
    int time_dim = 128;  // time MLP width
    int ctx_len = 10;
    int ctx_dim = 512;

    int bottleneck_channels() const { return channels.back(); }
    int bottleneck_size() const { return image_size >> (int(channels.size()) - 1); }
};

struct ResBlock {
    int cin, cout;
    GroupNorm norm1;
    SiLU act1;
    Conv2d conv1;
    SiLU tact;
    Linear time_proj;
    GroupNorm norm2;
    SiLU act2;
    Conv2d conv2;
    std::unique_ptr<Conv2d> skip;  // 1x1 when cin != cout

    ResBlock(int cin_, int cout_, int groups, int time_dim, Rng& rng, const std::string& name)
        : cin(cin_), cout(cout_), norm1(groups, cin_, name + ".norm1"),
          conv1(cin_, cout_, 3, 1, 1, rng, name + ".conv1"),
          time_proj(time_dim, cout_, rng, name + ".time_proj"),
          norm2(groups, cout_, name + ".norm2"), conv2(cout_, cout_, 3, 1, 1, rng, name + ".conv2") {
        if (cin_ != cout_) skip = std::make_unique<Conv2d>(cin_, cout_, 1, 1, 0, rng, name + ".skip");
    }

    void collect(ParamRefs& ps) {
        norm1.collect(ps);
        conv1.collect(ps);
        time_proj.collect(ps);
        norm2.collect(ps);
        conv2.collect(ps);
        if (skip) skip->collect(ps);
    }

    Tensor forward(const Tensor& x, const Tensor& temb) {
        Tensor h = conv1.forward(act1.forward(norm1.forward(x)));
        Tensor tp = time_proj.forward(tact.forward(temb));  // [N, cout]
        int N = h.dim(0), H = h.dim(2), W = h.dim(3);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < cout; ++c) {
                real add = tp[size_t(n) * cout + c];
                real* hp = h.ptr() + (size_t(n) * cout + c) * H * W;
                for (int s = 0; s < H * W; ++s) hp[s] += add;
            }
        h = conv2.forward(act2.forward(norm2.forward(h)));
        Tensor res = skip ? skip->forward(x) : x;
        for (size_t i = 0; i < h.size(); ++i) h[i] += res[i];
        return h;
    }

    // dtemb accumulates the gradient w.r.t. the (pre-SiLU) time embedding.
    Tensor backward(const Tensor& dy, Tensor& dtemb) {
        Tensor dh = norm2.backward(act2.backward(conv2.backward(dy)));
        // fan out: dh feeds conv1 path and time projection
        int N = dh.dim(0), H = dh.dim(2), W = dh.dim(3);
        Tensor dtp({N, cout});
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < cout; ++c) {
                real s = 0;
                const real* hp = dh.ptr() + (size_t(n) * cout + c) * H * W;
                for (int i = 0; i < H * W; ++i) s += hp[i];
                dtp[size_t(n) * cout + c] = s;
            }
        Tensor dt = tact.backward(time_proj.backward(dtp));
        for (size_t i = 0; i < dt.size(); ++i) dtemb[i] += dt[i];

        Tensor dx = norm1.backward(act1.backward(conv1.backward(dh)));
        // residual branch
        if (skip) {
            Tensor ds = skip->backward(dy);
            for (size_t i = 0; i < dx.size(); ++i) dx[i] += ds[i];
        } else {
            for (size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
        }
        return dx;
    }
};

namespace detail {
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    Tensor y({N, Ca + Cb, H, W});
    size_t plane = size_t(H) * W;
    for (int n = 0; n < N; ++n) {
        std::copy(a.ptr() + size_t(n) * Ca * plane, a.ptr() + size_t(n + 1) * Ca * plane,
                  y.ptr() + size_t(n) * (Ca + Cb) * plane);
        std::copy(b.ptr() + size_t(n) * Cb * plane, b.ptr() + size_t(n + 1) * Cb * plane,
                  y.ptr() + (size_t(n) * (Ca + Cb) + Ca) * plane);
    }
    return y;
}

inline void split_channels(const Tensor& dy, Tensor& da, Tensor& db) {
    int N = da.dim(0), Ca = da.dim(1), Cb = db.dim(1), H = da.dim(2), W = da.dim(3);
    size_t plane = size_t(H) * W;
    for (int n = 0; n < N; ++n) {
        std::copy(dy.ptr() + size_t(n) * (Ca + Cb) * plane,
                  dy.ptr() + (size_t(n) * (Ca + Cb) + Ca) * plane, da.ptr() + size_t(n) * Ca * plane);
        std::copy(dy.ptr() + (size_t(n) * (Ca + Cb) + Ca) * plane,
                  dy.ptr() + size_t(n + 1) * (Ca + Cb) * plane, db.ptr() + size_t(n) * Cb * plane);
    }
}
}  // namespace detail

class CondUnet {
  public:
    UnetConfig cfg;

    explicit CondUnet(const UnetConfig& config, uint64_t init_seed) : cfg(config) {
        Rng rng(hash_combine(init_seed, 0xC0DDu));
        const auto& ch = cfg.channels;
        int stages = int(ch.size());

        conv_in_ = std::make_unique<Conv2d>(cfg.in_channels, ch[0], 3, 1, 1, rng, "conv_in");
        time_fc1_ = std::make_unique<Linear>(cfg.sin_dim, cfg.time_dim, rng, "time.fc1");
        time_fc2_ = std::make_unique<Linear>(cfg.time_dim, cfg.time_dim, rng, "time.fc2");

        int prev = ch[0];
        for (int k = 0; k < stages; ++k) {
            down_res_.push_back(std::make_unique<ResBlock>(prev, ch[size_t(k)], cfg.norm_groups,
                                                           cfg.time_dim, rng,
                                                           "down" + std::to_string(k) + ".res1"));
            down_res_.push_back(std::make_unique<ResBlock>(ch[size_t(k)], ch[size_t(k)],
                                                           cfg.norm_groups, cfg.time_dim, rng,
                                                           "down" + std::to_string(k) + ".res2"));
            prev = ch[size_t(k)];
            if (k + 1 < stages)
                downsample_.push_back(std::make_unique<Conv2d>(prev, prev, 3, 2, 1, rng,
                                                               "down" + std::to_string(k) + ".ds"));
        }

        int cb = ch.back();
        mid_res1_ = std::make_unique<ResBlock>(cb, cb, cfg.norm_groups, cfg.time_dim, rng, "mid.res1");
        mid_attn_norm_ = std::make_unique<GroupNorm>(cfg.norm_groups, cb, "mid.attn_norm");
        mid_attn_ = std::make_unique<CrossAttention>(cb, cfg.ctx_dim, cb, rng, "mid.attn");
        mid_res2_ = std::make_unique<ResBlock>(cb, cb, cfg.norm_groups, cfg.time_dim, rng, "mid.res2");

        // skip channel widths, in push order (see forward)
        std::vector<int> skip_ch;
        skip_ch.push_back(ch[0]);
        for (int k = 0; k < stages; ++k) {
            skip_ch.push_back(ch[size_t(k)]);
            skip_ch.push_back(ch[size_t(k)]);
            if (k + 1 < stages) skip_ch.push_back(ch[size_t(k)]);
        }

        int cur = cb;
        size_t top = skip_ch.size();
        for (int k = stages - 1; k >= 0; --k) {
            for (int r = 0; r < 3; ++r) {
                int sc = skip_ch[--top];
                up_res_.push_back(std::make_unique<ResBlock>(
                    cur + sc, ch[size_t(k)], cfg.norm_groups, cfg.time_dim, rng,
                    "up" + std::to_string(k) + ".res" + std::to_string(r)));
                cur = ch[size_t(k)];
            }
            if (k > 0)
                upsample_.push_back(std::make_unique<Conv2d>(cur, cur, 3, 1, 1, rng,
                                                             "up" + std::to_string(k) + ".us"));
        }

        upsample_nearest_.resize(size_t(stages - 1));
        out_norm_ = std::make_unique<GroupNorm>(cfg.norm_groups, ch[0], "out.norm");
        out_conv_ = std::make_unique<Conv2d>(ch[0], cfg.in_channels, 3, 1, 1, rng, "conv_out");
    }

    ParamRefs params() {
        ParamRefs ps;
        conv_in_->collect(ps);
        time_fc1_->collect(ps);
        time_fc2_->collect(ps);
        for (auto& r : down_res_) r->collect(ps);
        for (auto& d : downsample_) d->collect(ps);
        mid_res1_->collect(ps);
        mid_attn_norm_->collect(ps);
        mid_attn_->collect(ps);
        mid_res2_->collect(ps);
        for (auto& r : up_res_) r->collect(ps);
        for (auto& u : upsample_) u->collect(ps);
        out_norm_->collect(ps);
        out_conv_->collect(ps);
        return ps;
    }

    size_t num_params() { return param_count(params()); }

    // x: [N, C, S, S]; ts: per-sample timesteps in [1, T]; ctx: [N, L, D].
    // v_h (optional): [Cb, s, s] added to the mid-block output for every sample.
    Tensor forward(const Tensor& x, const std::vector<int>& ts, const Tensor& ctx,
                   const Tensor* v_h = nullptr) {
        int N = x.dim(0);
        check_shape(ctx, {N, cfg.ctx_len, cfg.ctx_dim}, "CondUnet::forward ctx");

        // time embedding
        Tensor sine({N, cfg.sin_dim});
        for (int n = 0; n < N; ++n)
            sinusoidal_embedding(real(ts[size_t(n)]), cfg.sin_dim, sine.ptr() + size_t(n) * cfg.sin_dim);
        temb_ = time_fc2_->forward(time_act_.forward(time_fc1_->forward(sine)));

        skips_.clear();
        up_cat_shapes_.clear();
        Tensor h = conv_in_->forward(x);
        skips_.push_back(h);
        int stages = int(cfg.channels.size());
        size_t ri = 0, di = 0;
        for (int k = 0; k < stages; ++k) {
            h = down_res_[ri++]->forward(h, temb_);
            skips_.push_back(h);
            h = down_res_[ri++]->forward(h, temb_);
            skips_.push_back(h);
            if (k + 1 < stages) {
                h = downsample_[di++]->forward(h);
                skips_.push_back(h);
            }
        }

        h = mid_res1_->forward(h, temb_);
        // cross-attention with residual, over flattened spatial tokens
        {
            int C = h.dim(1), S = h.dim(2);
            Tensor normed = mid_attn_norm_->forward(h);
            Tensor tokens = to_tokens(normed);
            Tensor attn_out = mid_attn_->forward(tokens, ctx);
            Tensor spatial = to_spatial(attn_out, C, S);
            for (size_t i = 0; i < h.size(); ++i) h[i] += spatial[i];
        }
        h = mid_res2_->forward(h, temb_);

        if (v_h) {
            int Cb = cfg.bottleneck_channels(), s = h.dim(2);
            check_shape(*v_h, {Cb, s, s}, "CondUnet::forward v_h");
            size_t per = v_h->size();
            for (int n = 0; n < N; ++n) {
                real* hp = h.ptr() + size_t(n) * per;
                for (size_t i = 0; i < per; ++i) hp[i] += (*v_h)[i];
            }
        }
        h_activation_ = h;  // h-space readout (includes any injected vector)

        size_t ui = 0, pi = 0;
        for (int k = stages - 1; k >= 0; --k) {
            for (int r = 0; r < 3; ++r) {
                Tensor skip = skips_.back();
                skips_.pop_back();
                up_cat_shapes_.push_back({h.shape, skip.shape});
                h = up_res_[ui++]->forward(detail::concat_channels(h, skip), temb_);
            }
            if (k > 0) {
                h = upsample_nearest_[pi].forward(h);
                h = upsample_[pi]->forward(h);
                ++pi;
            }
        }

        h = out_conv_->forward(out_act_.forward(out_norm_->forward(h)));
        return h;
    }

    const Tensor& h_activation() const { return h_activation_; }

    // Backward from d(eps). Optionally returns gradients w.r.t. the text
    // encoding (dctx, [N, L, D]) and the h-space injection (dvh, [Cb, s, s],
    // summed over the batch).
    Tensor backward(const Tensor& deps, Tensor* dctx = nullptr, Tensor* dvh = nullptr) {
        int N = deps.dim(0);
        Tensor dtemb({N, cfg.time_dim});
        Tensor dctx_local({N, cfg.ctx_len, cfg.ctx_dim});

        Tensor dh = out_norm_->backward(out_act_.backward(out_conv_->backward(deps)));

        int stages = int(cfg.channels.size());
        size_t ui = up_res_.size(), pi = upsample_.size();
        std::vector<Tensor> dskips;
        for (int k = 0; k <= stages - 1; ++k) {
            // reverse of the up path: iterate k = 0 .. stages-1 (innermost last in fwd)
            if (k > 0) {
                --pi;
                dh = upsample_[pi]->backward(dh);
                dh = upsample_nearest_[pi].backward(dh);
            }
            for (int r = 0; r < 3; ++r) {
                auto [hshape, sshape] = up_cat_shapes_.back();
                up_cat_shapes_.pop_back();
                Tensor dcat = up_res_[--ui]->backward(dh, dtemb);
                Tensor da(hshape), db(sshape);
                detail::split_channels(dcat, da, db);
                dh = std::move(da);
                dskips.push_back(std::move(db));
            }
        }

        if (dvh) {
            *dvh = Tensor({cfg.bottleneck_channels(), dh.dim(2), dh.dim(3)});
            size_t per = dvh->size();
            for (int n = 0; n < N; ++n) {
                const real* p = dh.ptr() + size_t(n) * per;
                for (size_t i = 0; i < per; ++i) (*dvh)[i] += p[i];
            }
        }

        dh = mid_res2_->backward(dh, dtemb);
        {
            int C = dh.dim(1), S = dh.dim(2);
            Tensor dattn_sp = dh;  // residual: gradient flows both ways
            Tensor dtokens = to_tokens(dattn_sp);
            Tensor dattn_in = mid_attn_->backward(dtokens, dctx_local);
            Tensor dnormed = to_spatial(dattn_in, C, S);
            Tensor dpre = mid_attn_norm_->backward(dnormed);
            for (size_t i = 0; i < dh.size(); ++i) dh[i] += dpre[i];
        }
        dh = mid_res1_->backward(dh, dtemb);

        size_t ri = down_res_.size(), di = downsample_.size();
        // dskips were produced while unwinding the up path (outermost first);
        // the down path consumes them in reverse
        size_t si = dskips.size();
        auto pop_skip = [&]() -> Tensor& { return dskips[--si]; };
        for (int k = stages - 1; k >= 0; --k) {
            if (k + 1 < stages) {
                Tensor& ds = pop_skip();
                for (size_t i = 0; i < dh.size(); ++i) dh[i] += ds[i];
                dh = downsample_[--di]->backward(dh);
            }
            {
                Tensor& ds = pop_skip();
                for (size_t i = 0; i < dh.size(); ++i) dh[i] += ds[i];
                dh = down_res_[--ri]->backward(dh, dtemb);
            }
            {
                Tensor& ds = pop_skip();
                for (size_t i = 0; i < dh.size(); ++i) dh[i] += ds[i];
                dh = down_res_[--ri]->backward(dh, dtemb);
            }
        }
        {
            Tensor& ds = pop_skip();
            for (size_t i = 0; i < dh.size(); ++i) dh[i] += ds[i];
        }
        Tensor dx = conv_in_->backward(dh);

        // time MLP backward
        time_fc1_->backward(time_act_.backward(time_fc2_->backward(dtemb)));

        if (dctx) *dctx = std::move(dctx_local);
        return dx;
    }

    // -- persistence ---------------------------------------------------------

    void save_weights(const std::string& path) {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("save_weights: cannot open " + path);
        auto ps = params();
        uint64_t n = ps.size();
        out.write(reinterpret_cast<const char*>(&n), sizeof(n));
        for (auto* p : ps) {
            uint64_t len = p->w.size();
            out.write(reinterpret_cast<const char*>(&len), sizeof(len));
            out.write(reinterpret_cast<const char*>(p->w.ptr()), std::streamsize(len * sizeof(real)));
        }
    }

    void load_weights(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("load_weights: cannot open " + path);
        auto ps = params();
        uint64_t n = 0;
        in.read(reinterpret_cast<char*>(&n), sizeof(n));
        if (n != ps.size()) throw std::runtime_error("load_weights: parameter count mismatch");
        for (auto* p : ps) {
            uint64_t len = 0;
            in.read(reinterpret_cast<char*>(&len), sizeof(len));
            if (len != p->w.size()) throw std::runtime_error("load_weights: tensor size mismatch");
            in.read(reinterpret_cast<char*>(p->w.ptr()), std::streamsize(len * sizeof(real)));
        }
        if (!in) throw std::runtime_error("load_weights: truncated file " + path);
    }

  private:
    static Tensor to_tokens(const Tensor& x) {  // [N,C,S,S] -> [N,S*S,C]
        int N = x.dim(0), C = x.dim(1), S = x.dim(2);
        Tensor y({N, S * S, C});
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int s = 0; s < S * S; ++s)
                    y[(size_t(n) * S * S + s) * C + c] = x[(size_t(n) * C + c) * S * S + s];
        return y;
    }
    static Tensor to_spatial(const Tensor& x, int C, int S) {  // [N,S*S,C] -> [N,C,S,S]
        int N = x.dim(0);
        Tensor y({N, C, S, S});
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int s = 0; s < S * S; ++s)
                    y[(size_t(n) * C + c) * S * S + s] = x[(size_t(n) * S * S + s) * C + c];
        return y;
    }

    std::unique_ptr<Conv2d> conv_in_;
    std::unique_ptr<Linear> time_fc1_, time_fc2_;
    SiLU time_act_;
    std::vector<std::unique_ptr<ResBlock>> down_res_;
    std::vector<std::unique_ptr<Conv2d>> downsample_;
    std::unique_ptr<ResBlock> mid_res1_, mid_res2_;
    std::unique_ptr<GroupNorm> mid_attn_norm_;
    std::unique_ptr<CrossAttention> mid_attn_;
    std::vector<std::unique_ptr<ResBlock>> up_res_;
    std::vector<std::unique_ptr<Conv2d>> upsample_;
    std::vector<UpsampleNearest2> upsample_nearest_;
    std::unique_ptr<GroupNorm> out_norm_;
    SiLU out_act_;
    std::unique_ptr<Conv2d> out_conv_;

    Tensor temb_;
    Tensor h_activation_;
    std::vector<Tensor> skips_;
    std::vector<std::pair<std::vector<int>, std::vector<int>>> up_cat_shapes_;
};

}  // namespace concept_reach
