#pragma once

// Concept classifiers and the reachability metric: three small CNNs (back
// shape, front shape, ordered colour pair), the two-colour filter, and the
// per-image verdict assembly.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "concepts.hpp"
#include "datagen.hpp"
#include "image.hpp"
#include "image_tensor.hpp"
#include "nn.hpp"
#include "rng.hpp"

namespace concept_reach {

// Ordered (c1, c2) pairs with c1 != c2, canonical order.
inline int color_pair_index(Color c1, Color c2) {
    if (c1 == c2) throw std::invalid_argument("color_pair_index: equal colours");
    int a = int(c1), b = int(c2);
    return a * 2 + (b > a ? b - 1 : b);
}

inline std::pair<Color, Color> color_pair_from_index(int idx) {
    int a = idx / 2, r = idx % 2;
    int b = r >= a ? r + 1 : r;
    return {static_cast<Color>(a), static_cast<Color>(b)};
}

// conv 16 -> conv 32 (3x3, ReLU, 2x2 max-pool) -> fc 128 -> head.
struct ConceptCnn {
    int num_classes;
    Conv2d conv1;
    ReLU relu1;
    MaxPool2 pool1;
    Conv2d conv2;
    ReLU relu2;
    MaxPool2 pool2;
    Linear fc;
    ReLU relu3;
    Linear head;

    ConceptCnn(int classes, Rng& rng, const std::string& name)
        : num_classes(classes), conv1(3, 16, 3, 1, 1, rng, name + ".conv1"),
          conv2(16, 32, 3, 1, 1, rng, name + ".conv2"),
          fc(32 * 16 * 16, 128, rng, name + ".fc"), head(128, classes, rng, name + ".head") {}

    ParamRefs params() {
        ParamRefs ps;
        conv1.collect(ps);
        conv2.collect(ps);
        fc.collect(ps);
        head.collect(ps);
        return ps;
    }

    // x: [N, 3, 64, 64] -> logits [N, classes]
    Tensor forward(const Tensor& x) {
        Tensor h = pool1.forward(relu1.forward(conv1.forward(x)));
        h = pool2.forward(relu2.forward(conv2.forward(h)));
        h.shape = {h.dim(0), 32 * 16 * 16};
        return head.forward(relu3.forward(fc.forward(h)));
    }

    void backward(const Tensor& dlogits) {
        Tensor dh = relu3.backward(head.backward(dlogits));
        dh = fc.backward(dh);
        dh.shape = {dh.dim(0), 32, 16, 16};
        dh = pool2.backward(dh);
        dh = relu2.backward(dh);
        dh = conv2.backward(dh);
        conv1.backward(relu1.backward(pool1.backward(dh)));
    }
};

struct ClassifierTriple {
    std::unique_ptr<ConceptCnn> back_shape, front_shape, color_pair;
    double validation_accuracy = 0;  // joint (all heads correct) on held-out data
    std::string data_hash;

    explicit ClassifierTriple(uint64_t init_seed) {
        Rng rng(hash_combine(init_seed, 0xC1A55u));
        back_shape = std::make_unique<ConceptCnn>(3, rng, "back_shape");
        front_shape = std::make_unique<ConceptCnn>(3, rng, "front_shape");
        color_pair = std::make_unique<ConceptCnn>(6, rng, "color_pair");
    }

    void save(const std::string& dir) const;
    static ClassifierTriple load(const std::string& dir);
};

// Pixels with max channel > 60 are coloured; a colour counts if it owns at
// least 30 pixels.
struct ColorCountParams {
    int channel_threshold = 60;
    int min_pixels = 30;
};

inline int count_nonblack_colors(const Image& img, const ColorCountParams& p = {}) {
    long counts[3] = {0, 0, 0};
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const uint8_t* px = img.px(x, y);
            int mx = std::max({int(px[0]), int(px[1]), int(px[2])});
            if (mx <= p.channel_threshold) continue;
            int arg = px[0] == mx ? 0 : (px[1] == mx ? 1 : 2);
            ++counts[arg];
        }
    int n = 0;
    for (long c : counts)
        if (c >= p.min_pixels) ++n;
    return n;
}

struct Verdict {
    bool incomplete = false;  // colour filter rejected the image
    std::optional<ConceptTuple> predicted;
    int color_count = 0;
    bool matched_target = false;
    bool low_confidence = false;  // any head with max softmax < 0.5 (logged, not adjudicated)
};

namespace detail {
inline int argmax_row(const Tensor& logits, int n, int K, real* max_softmax) {
    const real* row = logits.ptr() + size_t(n) * K;
    int best = 0;
    for (int k = 1; k < K; ++k)
        if (row[k] > row[best]) best = k;
    real mx = row[best], z = 0;
    for (int k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    *max_softmax = real(1) / z;
    return best;
}
}  // namespace detail

inline Verdict classify_image(ClassifierTriple& clfs, const Image& img, const ConceptTuple& target,
                              const ColorCountParams& cp = {}) {
    Verdict v;
    v.color_count = count_nonblack_colors(img, cp);
    if (v.color_count != 2) {
        v.incomplete = true;
        return v;  // accounted incorrect
    }
    Tensor x({1, 3, img.height, img.width});
    Tensor t = image_to_tensor(img);
    std::copy(t.data.begin(), t.data.end(), x.ptr());

    real p1, p2, p3;
    int s1 = detail::argmax_row(clfs.back_shape->forward(x), 0, 3, &p1);
    int s2 = detail::argmax_row(clfs.front_shape->forward(x), 0, 3, &p2);
    int cp_idx = detail::argmax_row(clfs.color_pair->forward(x), 0, 6, &p3);
    auto [c1, c2] = color_pair_from_index(cp_idx);
    v.predicted = ConceptTuple(c1, static_cast<Shape>(s1), c2, static_cast<Shape>(s2));
    v.low_confidence = p1 < real(0.5) || p2 < real(0.5) || p3 < real(0.5);
    v.matched_target = (*v.predicted == target);
    return v;
}

inline double reachability(ClassifierTriple& clfs, const std::vector<Image>& images,
                           const ConceptTuple& target, std::vector<Verdict>* verdicts = nullptr) {
    if (images.empty()) throw std::invalid_argument("reachability: empty image list");
    long matched = 0;
    for (const auto& img : images) {
        Verdict v = classify_image(clfs, img, target);
        matched += v.matched_target;
        if (verdicts) verdicts->push_back(std::move(v));
    }
    return double(matched) / double(images.size());
}

struct SeedAggregate {
    double mean = 0;
    std::vector<double> per_seed;
};

inline SeedAggregate aggregate_over_seeds(const std::vector<double>& per_seed) {
    if (per_seed.empty()) throw std::invalid_argument("aggregate_over_seeds: empty input");
    SeedAggregate a{0, per_seed};
    for (double v : per_seed) a.mean += v;
    a.mean /= double(per_seed.size());
    return a;
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

struct ClassifierTrainConfig {
    int epochs = 7;
    int batch_size = 64;
    real lr = real(1e-3);
    double holdout_fraction = 0.1;
    bool allow_clean_only = false;  // permit training without generated samples
    std::function<void(int epoch, real loss)> on_epoch;
};

struct LabeledImage {
    Image image;
    ConceptTuple tuple;
};

inline ClassifierTriple train_classifiers(const DatasetManifest& balanced_manifest,
                                          const std::vector<LabeledImage>& model_samples,
                                          const ClassifierTrainConfig& cfg, uint64_t seed) {
    if (model_samples.empty() && !cfg.allow_clean_only)
        throw std::invalid_argument(
            "train_classifiers: no generated samples (set allow_clean_only for rendered-only training)");

    std::vector<LabeledImage> data;
    for (const auto& rec : balanced_manifest.records)
        data.push_back({read_png(balanced_manifest.root + "/" + rec.file), rec.tuple});
    for (const auto& s : model_samples) data.push_back(s);
    if (data.empty()) throw std::invalid_argument("train_classifiers: no training data");

    Rng rng = Rng(seed).substream("classifier_train");
    for (size_t i = data.size() - 1; i > 0; --i) std::swap(data[i], data[rng.uniform_int(i + 1)]);
    size_t holdout = std::min(data.size() - 1, size_t(double(data.size()) * cfg.holdout_fraction));
    size_t n_train = data.size() - holdout;

    ClassifierTriple triple(seed);
    Adam opt_bs(triple.back_shape->params(), cfg.lr);
    Adam opt_fs(triple.front_shape->params(), cfg.lr);
    Adam opt_cp(triple.color_pair->params(), cfg.lr);

    const int S = Image::kSize;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng erng = rng.substream(uint64_t(epoch));
        std::vector<size_t> order(n_train);
        for (size_t i = 0; i < n_train; ++i) order[i] = i;
        for (size_t i = n_train - 1; i > 0; --i) std::swap(order[i], order[erng.uniform_int(i + 1)]);

        real epoch_loss = 0;
        size_t batches = 0;
        for (size_t start = 0; start < n_train; start += size_t(cfg.batch_size)) {
            size_t bn = std::min(size_t(cfg.batch_size), n_train - start);
            Tensor x({int(bn), 3, S, S});
            std::vector<int> y_bs(bn), y_fs(bn), y_cp(bn);
            for (size_t b = 0; b < bn; ++b) {
                const auto& d = data[order[start + b]];
                Tensor t = image_to_tensor(d.image);
                std::copy(t.data.begin(), t.data.end(), x.ptr() + b * t.size());
                y_bs[b] = int(d.tuple.s1);
                y_fs[b] = int(d.tuple.s2);
                y_cp[b] = color_pair_index(d.tuple.c1, d.tuple.c2);
            }
            auto train_one = [&](ConceptCnn& net, Adam& opt, const std::vector<int>& y) {
                Tensor logits = net.forward(x);
                Tensor dlogits;
                real loss = softmax_ce(logits, y, &dlogits);
                opt.zero_grad();
                net.backward(dlogits);
                opt.step();
                return loss;
            };
            epoch_loss += train_one(*triple.back_shape, opt_bs, y_bs);
            epoch_loss += train_one(*triple.front_shape, opt_fs, y_fs);
            epoch_loss += train_one(*triple.color_pair, opt_cp, y_cp);
            ++batches;
        }
        if (cfg.on_epoch && batches) cfg.on_epoch(epoch, epoch_loss / real(batches));
    }

    // joint accuracy on the held-out slice
    long correct = 0;
    for (size_t i = n_train; i < data.size(); ++i) {
        Verdict v = classify_image(triple, data[i].image, data[i].tuple);
        correct += v.matched_target;
    }
    triple.validation_accuracy = holdout ? double(correct) / double(holdout) : 0.0;
    return triple;
}

// ---------------------------------------------------------------------------
// Persistence.
// ---------------------------------------------------------------------------

namespace detail {
inline void save_net(ConceptCnn& net, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_net: cannot open " + path);
    for (auto* p : net.params())
        out.write(reinterpret_cast<const char*>(p->w.ptr()),
                  std::streamsize(p->w.size() * sizeof(real)));
}
inline void load_net(ConceptCnn& net, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_net: cannot open " + path);
    for (auto* p : net.params())
        in.read(reinterpret_cast<char*>(p->w.ptr()), std::streamsize(p->w.size() * sizeof(real)));
    if (!in) throw std::runtime_error("load_net: truncated file " + path);
}
}  // namespace detail

inline void ClassifierTriple::save(const std::string& dir) const {
    std::filesystem::create_directories(dir);
    detail::save_net(*back_shape, dir + "/clf_back_shape.bin");
    detail::save_net(*front_shape, dir + "/clf_front_shape.bin");
    detail::save_net(*color_pair, dir + "/clf_color_pair.bin");
    nlohmann::json j;
    j["validation_accuracy"] = validation_accuracy;
    j["data_hash"] = data_hash;
    std::ofstream out(dir + "/classifiers.json");
    out << j.dump(2) << "\n";
}

inline ClassifierTriple ClassifierTriple::load(const std::string& dir) {
    ClassifierTriple t(0);
    detail::load_net(*t.back_shape, dir + "/clf_back_shape.bin");
    detail::load_net(*t.front_shape, dir + "/clf_front_shape.bin");
    detail::load_net(*t.color_pair, dir + "/clf_color_pair.bin");
    std::ifstream in(dir + "/classifiers.json");
    if (in) {
        nlohmann::json j = nlohmann::json::parse(in);
        t.validation_accuracy = j.value("validation_accuracy", 0.0);
        t.data_hash = j.value("data_hash", std::string());
    }
    return t;
}

}  // namespace concept_reach
