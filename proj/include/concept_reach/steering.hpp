#pragma once

// Steering-vector optimization against a frozen model: constant vectors in
// the prompt space (added to the text encoding) or the h-space (added to the
// mid-block output), minimizing the noise-matching loss on a set of images
// that contain the target concepts.

#include <deque>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffusion.hpp"
#include "render.hpp"
#include "stats.hpp"

namespace concept_reach {

struct SteeringDiagnostics {
    real final_loss = 0;           // trailing-window mean of the minibatch loss
    real last_minibatch_loss = 0;  // single final minibatch value
    real l2_norm = 0;
    int steps = 0;
};

struct SteeringVector {
    SteeringSpace space;
    Tensor values;
    std::string y_s;
    ConceptTuple target;
    SteeringDiagnostics diagnostics;

    Intervention to_intervention() const { return Intervention{space, values}; }

    nlohmann::json meta_json() const {
        return {{"space", to_string(space)},
                {"y_s", y_s},
                {"target", target.key()},
                {"steps", diagnostics.steps},
                {"final_loss", diagnostics.final_loss},
                {"last_minibatch_loss", diagnostics.last_minibatch_loss},
                {"l2_norm", diagnostics.l2_norm}};
    }

    void save(const std::string& stem) const {
        std::ofstream bin(stem + ".bin", std::ios::binary);
        if (!bin) throw std::runtime_error("SteeringVector::save: cannot open " + stem + ".bin");
        uint64_t n = values.size();
        bin.write(reinterpret_cast<const char*>(&n), sizeof(n));
        bin.write(reinterpret_cast<const char*>(values.ptr()), std::streamsize(n * sizeof(real)));
        nlohmann::json j = meta_json();
        j["shape"] = values.shape;
        std::ofstream meta(stem + ".json");
        meta << j.dump(2) << "\n";
    }

    static SteeringVector load(const std::string& stem) {
        std::ifstream meta(stem + ".json");
        if (!meta) throw std::runtime_error("SteeringVector::load: missing " + stem + ".json");
        nlohmann::json j = nlohmann::json::parse(meta);
        SteeringVector v{j.at("space").get<std::string>() == "h_space" ? SteeringSpace::HSpace
                                                                       : SteeringSpace::PromptSpace,
                         Tensor(j.at("shape").get<std::vector<int>>()),
                         j.at("y_s").get<std::string>(),
                         ConceptTuple::from_key(j.at("target").get<std::string>()),
                         {}};
        v.diagnostics.steps = j.at("steps").get<int>();
        v.diagnostics.final_loss = j.at("final_loss").get<real>();
        v.diagnostics.last_minibatch_loss = j.at("last_minibatch_loss").get<real>();
        v.diagnostics.l2_norm = j.at("l2_norm").get<real>();
        std::ifstream bin(stem + ".bin", std::ios::binary);
        if (!bin) throw std::runtime_error("SteeringVector::load: missing " + stem + ".bin");
        uint64_t n = 0;
        bin.read(reinterpret_cast<char*>(&n), sizeof(n));
        if (n != v.values.size()) throw std::runtime_error("SteeringVector::load: size mismatch");
        bin.read(reinterpret_cast<char*>(v.values.ptr()), std::streamsize(n * sizeof(real)));
        return v;
    }
};

// A concept image set: images sharing one ground-truth concept tuple.
struct ConceptImageSet {
    std::vector<Image> images;
    ConceptTuple target;
    std::string provenance;
};

// Collects k images of `target` from a manifest, rendering fresh ones when
// the dataset lacks them (required for the p = 0 sweeps, where the target is
// absent from training data by construction).
inline ConceptImageSet build_concept_set(const DatasetManifest* source, const ConceptTuple& target,
                                         int k, Rng rng, bool allow_render = true,
                                         const RenderParams& params = {}) {
    if (k <= 0) throw std::invalid_argument("build_concept_set: k must be positive");
    ConceptImageSet set{{}, target, ""};
    if (source) {
        for (const auto& rec : source->records) {
            if (int(set.images.size()) >= k) break;
            if (rec.tuple == target) set.images.push_back(read_png(source->root + "/" + rec.file));
        }
        set.provenance = "manifest:" + source->spec_hash + ";n=" + std::to_string(set.images.size());
    }
    if (int(set.images.size()) < k) {
        if (!allow_render)
            throw std::runtime_error("build_concept_set: insufficient images of " + target.key() +
                                     " and rendering disabled");
        Rng render_rng = rng.substream("fresh:" + target.key());
        long i = 0;
        while (int(set.images.size()) < k) {
            Rng img_rng = render_rng.substream(uint64_t(i++));
            set.images.push_back(render(sample_geometry(target, img_rng, params)));
        }
        set.provenance += ";rendered=" + std::to_string(i);
    }
    return set;
}

struct VectorOptConfig {
    int steps = 5000;
    real lr = real(0.02);
    int batch_size = 64;
    int loss_window = 100;
    std::function<void(int step, real loss)> on_step;
};

// Minimizes L_p or L_h: each step draws a minibatch (x0 in Z, t ~ U[1,T],
// eps) and updates only the vector. Model weights stay frozen.
inline SteeringVector optimize_vector(DiffusionModel& model, SteeringSpace space,
                                      const std::string& y_s, const ConceptImageSet& Z,
                                      const VectorOptConfig& cfg, uint64_t seed) {
    if (Z.images.empty()) throw std::invalid_argument("optimize_vector: empty concept set");
    const int S = model.unet_cfg.image_size;
    const int L = model.unet_cfg.ctx_len, D = model.unet_cfg.ctx_dim;
    const int Cb = model.unet_cfg.bottleneck_channels(), bs = model.unet_cfg.bottleneck_size();

    // initialised at the zero vector
    Param vec(space == SteeringSpace::PromptSpace ? std::vector<int>{L, D}
                                                  : std::vector<int>{Cb, bs, bs},
              "steering_vector");

    Tensor base_ctx = model.encoder.encode(y_s).embedding;  // [L, D]
    std::vector<Tensor> x0s;
    for (const auto& img : Z.images) x0s.push_back(image_to_tensor(img));

    Adam opt({&vec}, cfg.lr);
    Rng rng = Rng(seed).substream("optimize_vector");
    std::deque<real> window;
    real last_loss = 0;

    for (int step = 0; step < cfg.steps; ++step) {
        Rng srng = rng.substream(uint64_t(step));
        int bn = cfg.batch_size;
        Tensor xt({bn, 3, S, S});
        Tensor eps({bn, 3, S, S});
        Tensor ctx({bn, L, D});
        std::vector<int> ts(size_t(bn), 0);
        size_t plane = size_t(3) * S * S;
        for (int b = 0; b < bn; ++b) {
            const Tensor& x0 = x0s[srng.uniform_int(x0s.size())];
            ts[size_t(b)] = int(srng.uniform_int(uint64_t(model.schedule.T))) + 1;
            real abar = model.schedule.abar(ts[size_t(b)]);
            real sa = std::sqrt(abar), sb = std::sqrt(real(1) - abar);
            for (size_t i = 0; i < plane; ++i) {
                real e = srng.normal();
                eps[size_t(b) * plane + i] = e;
                xt[size_t(b) * plane + i] = sa * x0[i] + sb * e;
            }
            real* cp = ctx.ptr() + size_t(b) * size_t(L) * D;
            if (space == SteeringSpace::PromptSpace)
                for (size_t i = 0; i < base_ctx.size(); ++i) cp[i] = base_ctx[i] + vec.w[i];
            else
                std::copy(base_ctx.data.begin(), base_ctx.data.end(), cp);
        }

        const Tensor* v_h = space == SteeringSpace::HSpace ? &vec.w : nullptr;
        Tensor pred = model.unet->forward(xt, ts, ctx, v_h);
        real loss = 0;
        Tensor dpred(pred.shape);
        real scale = real(2) / real(pred.size());
        for (size_t i = 0; i < pred.size(); ++i) {
            real d = pred[i] - eps[i];
            loss += d * d;
            dpred[i] = scale * d;
        }
        loss /= real(pred.size());

        opt.zero_grad();
        if (space == SteeringSpace::PromptSpace) {
            Tensor dctx;
            model.unet->backward(dpred, &dctx);
            for (int b = 0; b < bn; ++b) {
                const real* dp = dctx.ptr() + size_t(b) * vec.w.size();
                for (size_t i = 0; i < vec.w.size(); ++i) vec.g[i] += dp[i];
            }
        } else {
            Tensor dvh;
            model.unet->backward(dpred, nullptr, &dvh);
            for (size_t i = 0; i < vec.w.size(); ++i) vec.g[i] += dvh[i];
        }
        // only the vector moves; the u-net parameter grads are discarded
        for (auto* p : model.unet->params()) p->g.zero();
        opt.step();

        last_loss = loss;
        window.push_back(loss);
        if (int(window.size()) > cfg.loss_window) window.pop_front();
        if (cfg.on_step) cfg.on_step(step, loss);
    }

    SteeringVector out{space, vec.w, y_s, Z.target, {}};
    out.diagnostics.steps = cfg.steps;
    out.diagnostics.last_minibatch_loss = last_loss;
    real wsum = 0;
    for (real l : window) wsum += l;
    out.diagnostics.final_loss = window.empty() ? real(0) : wsum / real(window.size());
    out.diagnostics.l2_norm = vec.w.l2_norm();
    return out;
}

inline std::vector<Image> steered_sample(DiffusionModel& model, const SteeringVector& vec, int n,
                                         uint64_t seed) {
    Intervention iv = vec.to_intervention();
    return sample(model, vec.y_s, n, seed, &iv);
}

// Scatter data behind the norm/loss diagnostics.
struct DiagnosticsRecord {
    SteeringSpace space;
    real final_loss;
    real l2_norm;
    double accuracy;
};

inline std::vector<DiagnosticsRecord> diagnostics_table(const std::vector<SteeringVector>& vectors,
                                                        const std::vector<double>& accuracies) {
    if (vectors.size() != accuracies.size())
        throw std::invalid_argument("diagnostics_table: length mismatch");
    std::vector<DiagnosticsRecord> out;
    for (size_t i = 0; i < vectors.size(); ++i)
        out.push_back({vectors[i].space, vectors[i].diagnostics.final_loss,
                       vectors[i].diagnostics.l2_norm, accuracies[i]});
    return out;
}

}  // namespace concept_reach
