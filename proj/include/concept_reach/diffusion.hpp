#pragma once

// Conditional DDPM: training of the U-net noise predictor on image/caption
// pairs, ancestral sampling with optional steering interventions, h-space
// hook, and checkpoint persistence.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "datagen.hpp"
#include "hash.hpp"
#include "image.hpp"
#include "image_tensor.hpp"
#include "schedule.hpp"
#include "text_encoder.hpp"
#include "unet.hpp"

namespace concept_reach {

enum class SteeringSpace : uint8_t { PromptSpace, HSpace };

inline const char* to_string(SteeringSpace s) {
    return s == SteeringSpace::PromptSpace ? "prompt_space" : "h_space";
}

// A constant additive intervention applied at every denoising step.
struct Intervention {
    SteeringSpace space;
    Tensor values;  // PromptSpace: [L, D]; HSpace: [Cb, s, s]
};

struct TrainProvenance {
    std::string dataset_spec_hash;
    uint64_t seed = 0;
    int epochs = 0;
    real final_loss = 0;
    std::vector<real> epoch_losses;
};

struct TrainConfig {
    int epochs = 70;
    int batch_size = 128;
    real lr = real(1e-3);
    real lr_gamma = real(0.98);  // exponential decay per epoch
    int T = 1000;
    real beta_start = real(1e-4), beta_end = real(0.02);
    UnetConfig unet;
    std::function<void(int epoch, real loss)> on_epoch;
};

class DiffusionModel {
  public:
    UnetConfig unet_cfg;
    NoiseSchedule schedule;
    TextEncoder encoder;
    std::unique_ptr<CondUnet> unet;
    TrainProvenance provenance;

    DiffusionModel(const UnetConfig& cfg, const NoiseSchedule& sched, uint64_t init_seed)
        : unet_cfg(cfg), schedule(sched), unet(std::make_unique<CondUnet>(cfg, init_seed)) {}

    // Encoded prompt replicated across a batch.
    Tensor batch_ctx(const std::string& prompt, int N, const Tensor* v_p = nullptr) const {
        TextEncoding enc = encoder.encode(prompt);
        if (v_p) {
            check_shape(*v_p, enc.embedding.shape, "batch_ctx v_p");
            for (size_t i = 0; i < enc.embedding.size(); ++i) enc.embedding[i] += (*v_p)[i];
        }
        Tensor ctx({N, unet_cfg.ctx_len, unet_cfg.ctx_dim});
        for (int n = 0; n < N; ++n)
            std::copy(enc.embedding.data.begin(), enc.embedding.data.end(),
                      ctx.ptr() + size_t(n) * enc.embedding.size());
        return ctx;
    }

    // Bottleneck activation for (x_t, t, y); the point where v_h is injected.
    Tensor h_activation(const Tensor& x_t, int t, const std::string& prompt,
                        const Tensor* v_h = nullptr) {
        if (t < 1 || t > schedule.T) throw std::out_of_range("h_activation: t out of [1, T]");
        int N = x_t.dim(0);
        Tensor ctx = batch_ctx(prompt, N);
        std::vector<int> ts(size_t(N), t);
        unet->forward(x_t, ts, ctx, v_h);
        return unet->h_activation();
    }

    void save(const std::string& dir) const {
        std::filesystem::create_directories(dir);
        unet->save_weights(dir + "/weights.bin");
        nlohmann::json j;
        j["architecture"] = {{"in_channels", unet_cfg.in_channels},
                             {"image_size", unet_cfg.image_size},
                             {"channels", unet_cfg.channels},
                             {"norm_groups", unet_cfg.norm_groups},
                             {"sin_dim", unet_cfg.sin_dim},
                             {"time_dim", unet_cfg.time_dim},
                             {"ctx_len", unet_cfg.ctx_len},
                             {"ctx_dim", unet_cfg.ctx_dim}};
        j["schedule"] = {{"T", schedule.T}, {"betas", schedule.betas}};
        j["encoder"] = {{"id", encoder.identifier()}, {"seed", encoder.seed()}};
        j["provenance"] = {{"dataset_spec_hash", provenance.dataset_spec_hash},
                           {"seed", provenance.seed},
                           {"epochs", provenance.epochs},
                           {"final_loss", provenance.final_loss},
                           {"epoch_losses", provenance.epoch_losses}};
        j["param_count"] = const_cast<CondUnet&>(*unet).num_params();
        j["weights_sha256"] = sha256_file(dir + "/weights.bin");
        std::ofstream out(dir + "/model.json");
        out << j.dump(2) << "\n";
    }

    static DiffusionModel load(const std::string& dir) {
        std::ifstream in(dir + "/model.json");
        if (!in) throw std::runtime_error("DiffusionModel::load: missing " + dir + "/model.json");
        nlohmann::json j = nlohmann::json::parse(in);
        UnetConfig cfg;
        const auto& a = j.at("architecture");
        cfg.in_channels = a.at("in_channels").get<int>();
        cfg.image_size = a.at("image_size").get<int>();
        cfg.channels = a.at("channels").get<std::vector<int>>();
        cfg.norm_groups = a.at("norm_groups").get<int>();
        cfg.sin_dim = a.at("sin_dim").get<int>();
        cfg.time_dim = a.at("time_dim").get<int>();
        cfg.ctx_len = a.at("ctx_len").get<int>();
        cfg.ctx_dim = a.at("ctx_dim").get<int>();

        NoiseSchedule sched;
        sched.T = j.at("schedule").at("T").get<int>();
        sched.betas = j.at("schedule").at("betas").get<std::vector<real>>();
        sched.alphas_bar.resize(sched.betas.size());
        real abar = 1;
        for (size_t t = 0; t < sched.betas.size(); ++t) {
            abar *= (real(1) - sched.betas[t]);
            sched.alphas_bar[t] = abar;
        }

        std::string stored = j.at("weights_sha256").get<std::string>();
        std::string actual = sha256_file(dir + "/weights.bin");
        if (stored != actual)
            throw std::runtime_error("DiffusionModel::load: weights hash mismatch in " + dir);

        DiffusionModel m(cfg, sched, 0);
        m.unet->load_weights(dir + "/weights.bin");
        const auto& p = j.at("provenance");
        m.provenance.dataset_spec_hash = p.at("dataset_spec_hash").get<std::string>();
        m.provenance.seed = p.at("seed").get<uint64_t>();
        m.provenance.epochs = p.at("epochs").get<int>();
        m.provenance.final_loss = p.at("final_loss").get<real>();
        m.provenance.epoch_losses = p.at("epoch_losses").get<std::vector<real>>();
        return m;
    }
};

// In-memory training set: 8-bit pixels plus caption ids, converted to
// tensors batch by batch.
struct TrainingSet {
    std::vector<std::vector<uint8_t>> pixels;  // per-image raw RGB
    std::vector<int> caption_id;
    std::vector<std::string> captions;  // unique

    static TrainingSet from_manifest(const DatasetManifest& manifest) {
        TrainingSet set;
        std::map<std::string, int> cap_ids;
        set.pixels.reserve(manifest.records.size());
        for (const auto& rec : manifest.records) {
            Image img = read_png(manifest.root + "/" + rec.file);
            set.pixels.push_back(img.pixels);
            auto [it, inserted] = cap_ids.emplace(rec.caption, int(set.captions.size()));
            if (inserted) set.captions.push_back(rec.caption);
            set.caption_id.push_back(it->second);
        }
        return set;
    }

    size_t size() const { return pixels.size(); }
};

inline Tensor pixels_to_tensor(const std::vector<uint8_t>& px, int size) {
    Tensor t({3, size, size});
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int c = 0; c < 3; ++c)
                t[(size_t(c) * size + y) * size + x] =
                    real(px[(size_t(y) * size + x) * 3 + c]) / real(127.5) - real(1);
    return t;
}

// Minimizes E ||eps - eps_theta(x_t, t, y)||^2 over the manifest.
inline DiffusionModel train(const DatasetManifest& manifest, const TrainConfig& cfg, uint64_t seed) {
    if (manifest.records.empty()) throw std::invalid_argument("train: empty manifest");

    NoiseSchedule sched = NoiseSchedule::linear(cfg.T, cfg.beta_start, cfg.beta_end);
    DiffusionModel model(cfg.unet, sched, seed);
    model.provenance.dataset_spec_hash = manifest.spec_hash;
    model.provenance.seed = seed;
    model.provenance.epochs = cfg.epochs;

    TrainingSet set = TrainingSet::from_manifest(manifest);
    std::vector<Tensor> cap_enc;
    for (const auto& c : set.captions) cap_enc.push_back(model.encoder.encode(c).embedding);

    Adam opt(model.unet->params(), cfg.lr);
    Rng rng = Rng(seed).substream("train");
    const int S = cfg.unet.image_size;
    const size_t n_img = set.size();
    std::vector<size_t> order(n_img);
    for (size_t i = 0; i < n_img; ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Fisher-Yates with the run RNG; schedule-independent determinism
        Rng erng = rng.substream(uint64_t(epoch));
        for (size_t i = n_img - 1; i > 0; --i)
            std::swap(order[i], order[erng.uniform_int(i + 1)]);

        real epoch_loss = 0;
        size_t batches = 0;
        for (size_t start = 0; start < n_img; start += size_t(cfg.batch_size)) {
            size_t bn = std::min(size_t(cfg.batch_size), n_img - start);
            Tensor xt({int(bn), 3, S, S});
            Tensor eps({int(bn), 3, S, S});
            Tensor ctx({int(bn), cfg.unet.ctx_len, cfg.unet.ctx_dim});
            std::vector<int> ts(bn);
            Rng brng = erng.substream(start);
            for (size_t b = 0; b < bn; ++b) {
                size_t idx = order[start + b];
                Tensor x0 = pixels_to_tensor(set.pixels[idx], S);
                ts[b] = int(brng.uniform_int(uint64_t(sched.T))) + 1;
                real abar = sched.abar(ts[b]);
                real sa = std::sqrt(abar), sb = std::sqrt(real(1) - abar);
                size_t plane = x0.size();
                for (size_t i = 0; i < plane; ++i) {
                    real e = brng.normal();
                    eps[b * plane + i] = e;
                    xt[b * plane + i] = sa * x0[i] + sb * e;
                }
                const Tensor& ce = cap_enc[size_t(set.caption_id[idx])];
                std::copy(ce.data.begin(), ce.data.end(), ctx.ptr() + b * ce.size());
            }

            Tensor pred = model.unet->forward(xt, ts, ctx);
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
            model.unet->backward(dpred);
            opt.step();
            epoch_loss += loss;
            ++batches;
        }
        epoch_loss /= real(batches);
        model.provenance.epoch_losses.push_back(epoch_loss);
        model.provenance.final_loss = epoch_loss;
        if (cfg.on_epoch) cfg.on_epoch(epoch, epoch_loss);
        opt.lr *= cfg.lr_gamma;
    }
    return model;
}

// Ancestral DDPM sampling over all T steps. Noise is drawn from per-image
// substreams of `seed`, so results are batch-size independent. The optional
// intervention is applied at every step.
inline std::vector<Image> sample(DiffusionModel& model, const std::string& prompt, int n,
                                 uint64_t seed, const Intervention* intervention = nullptr,
                                 int batch_size = 16) {
    const NoiseSchedule& sched = model.schedule;
    const int S = model.unet_cfg.image_size;
    const Tensor* v_h = nullptr;
    const Tensor* v_p = nullptr;
    if (intervention) {
        if (intervention->space == SteeringSpace::HSpace) {
            int Cb = model.unet_cfg.bottleneck_channels(), bs = model.unet_cfg.bottleneck_size();
            check_shape(intervention->values, {Cb, bs, bs}, "sample h-space intervention");
            v_h = &intervention->values;
        } else {
            check_shape(intervention->values, {model.unet_cfg.ctx_len, model.unet_cfg.ctx_dim},
                        "sample prompt-space intervention");
            v_p = &intervention->values;
        }
    }

    std::vector<Image> out;
    out.reserve(size_t(n));
    Rng root(seed);
    for (int start = 0; start < n; start += batch_size) {
        int bn = std::min(batch_size, n - start);
        Tensor x({bn, 3, S, S});
        std::vector<Rng> streams;
        for (int b = 0; b < bn; ++b) streams.push_back(root.substream(uint64_t(start + b)));
        size_t plane = size_t(3) * S * S;
        for (int b = 0; b < bn; ++b)
            for (size_t i = 0; i < plane; ++i) x[size_t(b) * plane + i] = streams[size_t(b)].normal();

        Tensor ctx = model.batch_ctx(prompt, bn, v_p);
        for (int t = sched.T; t >= 1; --t) {
            std::vector<int> ts(size_t(bn), t);
            Tensor pred = model.unet->forward(x, ts, ctx, v_h);

            real abar = sched.abar(t);
            real abar_prev = t > 1 ? sched.abar(t - 1) : real(1);
            real beta = sched.beta(t);
            real alpha = real(1) - beta;
            real sa = std::sqrt(abar), sb = std::sqrt(real(1) - abar);
            // posterior on the clipped x0 estimate
            real c0 = std::sqrt(abar_prev) * beta / (real(1) - abar);
            real c1 = std::sqrt(alpha) * (real(1) - abar_prev) / (real(1) - abar);
            real var = t > 1 ? beta * (real(1) - abar_prev) / (real(1) - abar) : real(0);
            real sigma = std::sqrt(var);
            for (int b = 0; b < bn; ++b)
                for (size_t i = 0; i < plane; ++i) {
                    size_t j = size_t(b) * plane + i;
                    real x0 = (x[j] - sb * pred[j]) / sa;
                    x0 = std::clamp(x0, real(-1), real(1));
                    real mean = c0 * x0 + c1 * x[j];
                    x[j] = t > 1 ? mean + sigma * streams[size_t(b)].normal() : mean;
                }
        }
        for (int b = 0; b < bn; ++b) out.push_back(tensor_to_image(x, size_t(b)));
    }
    return out;
}

}  // namespace concept_reach
