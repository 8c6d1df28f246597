#pragma once

// Experiment harness: builds (dataset -> model -> classifiers -> vectors ->
// samples -> verdicts) pipelines for the six experiment families and appends
// ReachabilityResult records to the results store.

#include <algorithm>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "classifier.hpp"
#include "concepts.hpp"
#include "datagen.hpp"
#include "diffusion.hpp"
#include "stats.hpp"
#include "steering.hpp"
#include "store.hpp"

namespace concept_reach {

enum class Family { Baseline, Scarcity, Underspec, Bias, Removal, NormDiag };

inline std::string to_string(Family f) {
    switch (f) {
        case Family::Baseline: return "baseline";
        case Family::Scarcity: return "scarcity";
        case Family::Underspec: return "underspec";
        case Family::Bias: return "bias";
        case Family::Removal: return "removal";
        case Family::NormDiag: return "norm_diag";
    }
    throw std::logic_error("unknown family");
}

inline Family family_from_string(const std::string& s) {
    for (Family f : {Family::Baseline, Family::Scarcity, Family::Underspec, Family::Bias,
                     Family::Removal, Family::NormDiag})
        if (to_string(f) == s) return f;
    throw std::invalid_argument("unknown experiment family: " + s);
}

enum class Method { Prompting, PromptSteering, HSteering };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::Prompting: return "prompting";
        case Method::PromptSteering: return "prompt_steering";
        case Method::HSteering: return "h_steering";
    }
    throw std::logic_error("unknown method");
}

struct ExperimentPlan {
    Family family = Family::Baseline;
    std::vector<Method> methods{Method::Prompting, Method::PromptSteering, Method::HSteering};
    std::vector<uint64_t> seeds{0, 1, 2, 3};
    int targets_per_group = 3;             // baseline: cap per Hamming-distance group
    uint64_t target_pick_seed = 20240614;  // fixed so reruns are comparable
    bool full_prompt_variant = false;      // underspec: y_s spells out all factors
    bool second_tie_variant = false;       // bias: tie (c2=red, s2=triangle) instead
};

// Everything an experiment run needs, bundled so tests can shrink every knob.
struct HarnessContext {
    RunConfig run = RunConfig::defaults(Profile::Smoke);
    TrainConfig train;  // includes the U-net architecture
    VectorOptConfig steer;
    RenderParams render;
    int sample_batch = 16;
    std::function<void(const std::string&)> log;  // optional progress sink

    void say(const std::string& msg) const {
        if (log) log(msg);
    }
};

namespace harness_detail {

inline std::string digest_verdicts(const std::vector<Verdict>& vs) {
    std::string s;
    for (const auto& v : vs) {
        if (v.incomplete)
            s += "X;";
        else
            s += v.predicted->key() + ";";
    }
    return sha256_hex(s).substr(0, 16);
}

// Uniform pick of k distinct tuples (or fewer if the pool is smaller).
inline std::vector<ConceptTuple> pick_tuples(const std::vector<ConceptTuple>& pool, size_t k,
                                             uint64_t seed) {
    std::vector<ConceptTuple> v = pool;
    Rng rng(seed);
    for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.uniform_int(i)]);
    if (v.size() > k) v.erase(v.begin() + long(k), v.end());
    return v;
}

inline std::string factor_value_name(FactorName f, uint8_t value) {
    return is_color_factor(f) ? to_string(static_cast<Color>(value))
                              : to_string(static_cast<Shape>(value));
}

inline bool mask_specifies(const SpecificationMask& m, FactorName f) {
    switch (f) {
        case FactorName::BackColor: return m.c1;
        case FactorName::BackShape: return m.s1;
        case FactorName::FrontColor: return m.c2;
        case FactorName::FrontShape: return m.s2;
    }
    throw std::logic_error("bad FactorName");
}

}  // namespace harness_detail

class Harness {
  public:
    explicit Harness(HarnessContext ctx) : ctx_(std::move(ctx)), idx_(ctx_.run.root) {}

    const ArtifactIndex& index() const { return idx_; }

    // --- pipeline stages (all content-addressed and idempotent) -------------

    DatasetManifest ensure_dataset(const DatasetSpec& spec) {
        std::string h = spec_hash_of(spec);
        std::string dir = idx_.dataset_dir(h);
        FileLock lock(idx_.lock_path("dataset:" + h));
        if (!ctx_.run.force && std::filesystem::exists(dir + "/manifest.jsonl"))
            return DatasetManifest::load(dir);
        ctx_.say("materializing dataset " + h.substr(0, 16));
        return materialize(spec, dir, ctx_.render);
    }

    std::shared_ptr<DiffusionModel> ensure_model(const DatasetSpec& spec,
                                                 const DatasetManifest& manifest, uint64_t seed) {
        std::string h = spec_hash_of(spec);
        std::string key = h.substr(0, 16) + "/" + std::to_string(seed);
        if (auto it = model_cache_.find(key); it != model_cache_.end()) return it->second;

        std::string dir = idx_.checkpoint_dir(h, seed);
        FileLock lock(idx_.lock_path("checkpoint:" + key));
        std::shared_ptr<DiffusionModel> model;
        if (!ctx_.run.force && std::filesystem::exists(dir + "/model.json")) {
            model = std::make_shared<DiffusionModel>(DiffusionModel::load(dir));
        } else {
            ctx_.say("training model " + key);
            TrainConfig tc = ctx_.train;
            tc.epochs = ctx_.run.train_epochs;
            model = std::make_shared<DiffusionModel>(train(manifest, tc, seed));
            model->save(dir);
        }
        model_cache_[key] = model;
        return model;
    }

    std::shared_ptr<ClassifierTriple> ensure_classifiers(const DatasetSpec& balanced_spec,
                                                         DiffusionModel* model, uint64_t seed) {
        std::string h = spec_hash_of(balanced_spec);
        std::string key = h.substr(0, 16) + "/" + std::to_string(seed);
        if (auto it = clf_cache_.find(key); it != clf_cache_.end()) return it->second;

        std::string dir = idx_.classifier_dir(h, seed);
        FileLock lock(idx_.lock_path("classifier:" + key));
        std::shared_ptr<ClassifierTriple> triple;
        if (!ctx_.run.force && std::filesystem::exists(dir + "/classifiers.json")) {
            triple = std::make_shared<ClassifierTriple>(ClassifierTriple::load(dir));
        } else {
            ctx_.say("training classifiers " + key);
            DatasetManifest man = ensure_dataset(balanced_spec);
            std::vector<LabeledImage> generated;
            if (model) {
                // label model samples with the prompted tuple
                auto tuples = harness_detail::pick_tuples(enumerate_valid_tuples(), 12,
                                                          hash_str(seed, "clf_gen"));
                for (const auto& t : tuples) {
                    uint64_t sseed = hash_str(seed, "clf_gen:" + t.key());
                    auto imgs = sample(*model, caption_of(t), 4, sseed, nullptr, ctx_.sample_batch);
                    for (auto& img : imgs) generated.emplace_back(std::move(img), t);
                }
            }
            ClassifierTrainConfig ccfg;
            ccfg.epochs = ctx_.run.classifier_epochs;
            ccfg.allow_clean_only = (model == nullptr);
            triple =
                std::make_shared<ClassifierTriple>(train_classifiers(man, generated, ccfg, seed));
            triple->save(dir);
        }
        clf_cache_[key] = triple;
        return triple;
    }

    SteeringVector ensure_vector(DiffusionModel& model, const std::string& ckpt_hash,
                                 const DatasetManifest* manifest, SteeringSpace space,
                                 const ConceptTuple& target, const std::string& y_s,
                                 uint64_t seed) {
        std::string stem = idx_.vector_path(ckpt_hash + ":" + std::to_string(seed),
                                            to_string(space), target.key(), y_s);
        FileLock lock(idx_.lock_path("vector:" + stem));
        if (!ctx_.run.force && std::filesystem::exists(stem + ".json"))
            return SteeringVector::load(stem);

        ctx_.say("optimizing " + std::string(to_string(space)) + " vector toward " + target.key());
        uint64_t vseed = hash_str(seed, "steer:" + target.key() + "|" + y_s);
        ConceptImageSet z = build_concept_set(manifest, target, ctx_.run.concept_set_size,
                                              Rng(vseed).substream("zset"), true, ctx_.render);
        VectorOptConfig vc = ctx_.steer;
        vc.steps = ctx_.run.steer_steps;
        SteeringVector vec = optimize_vector(model, space, y_s, z, vc, vseed);
        std::filesystem::create_directories(std::filesystem::path(stem).parent_path());
        vec.save(stem);
        return vec;
    }

    // --- evaluation ----------------------------------------------------------

    ReachabilityResult evaluate(DiffusionModel& model, ClassifierTriple& clfs, Method method,
                                const ConceptTuple& target, const std::string& y_s,
                                const DatasetManifest* manifest, const std::string& spec_hash,
                                uint64_t seed, const nlohmann::json& extra,
                                std::vector<Verdict>* verdicts_out = nullptr) {
        std::string prompt = y_s;
        std::optional<SteeringVector> vec;
        Intervention iv;
        const Intervention* ivp = nullptr;
        if (method == Method::Prompting) {
            prompt = caption_of(target);  // y_e: full description of the target
        } else {
            SteeringSpace space = method == Method::PromptSteering ? SteeringSpace::PromptSpace
                                                                   : SteeringSpace::HSpace;
            vec = ensure_vector(model, spec_hash.substr(0, 16), manifest, space, target, y_s,
                                seed);
            iv = vec->to_intervention();
            ivp = &iv;
        }

        uint64_t eseed =
            hash_str(seed, "eval:" + to_string(method) + "|" + target.key() + "|" + y_s);
        auto imgs = sample(model, prompt, ctx_.run.eval_samples, eseed, ivp, ctx_.sample_batch);

        std::vector<Verdict> verdicts;
        double acc = reachability(clfs, imgs, target, &verdicts);

        ReachabilityResult r;
        r.family = family_name_;
        r.spec_hash = spec_hash;
        r.model_seed = seed;
        r.method = to_string(method);
        r.target_key = target.key();
        r.y_s = y_s;
        r.n = int(imgs.size());
        r.matched = int(std::lround(acc * double(imgs.size())));
        r.accuracy = double(r.matched) / double(r.n);
        r.verdicts_digest = harness_detail::digest_verdicts(verdicts);
        r.extra = extra;
        if (vec) {
            r.steer_final_loss = double(vec->diagnostics.final_loss);
            r.steer_l2_norm = double(vec->diagnostics.l2_norm);
        }
        if (verdicts_out) *verdicts_out = std::move(verdicts);
        return r;
    }

    // --- experiment families -------------------------------------------------

    std::vector<ReachabilityResult> run_family(const ExperimentPlan& plan) {
        family_name_ = to_string(plan.family);
        ResultsStore store(idx_.results_dir(family_name_));
        existing_ = load_existing_keys(store);
        std::vector<ReachabilityResult> out;
        switch (plan.family) {
            case Family::Baseline: out = run_baseline(plan, store); break;
            case Family::Scarcity: out = run_scarcity(plan, store); break;
            case Family::Underspec: out = run_underspec(plan, store); break;
            case Family::Bias: out = run_bias(plan, store); break;
            case Family::Removal: out = run_removal(plan, store); break;
            case Family::NormDiag: out = run_norm_diag(plan, store); break;
        }
        store.export_csv();
        return out;
    }

    // Norm/loss-vs-accuracy diagnostic over steering records.
    struct NormDiagReport {
        std::optional<double> spearman_norm_acc_h;
        std::optional<double> spearman_norm_acc_prompt;
        std::optional<double> spearman_loss_acc_h;
        int points_h = 0, points_prompt = 0;
    };

    static NormDiagReport norm_diag_from(const std::vector<ReachabilityResult>& results) {
        NormDiagReport rep;
        std::vector<double> norm_h, acc_h, loss_h, norm_p, acc_p;
        for (const auto& r : results) {
            if (!r.steer_l2_norm) continue;
            if (r.method == "h_steering") {
                norm_h.push_back(*r.steer_l2_norm);
                acc_h.push_back(r.accuracy);
                if (r.steer_final_loss) loss_h.push_back(*r.steer_final_loss);
            } else if (r.method == "prompt_steering") {
                norm_p.push_back(*r.steer_l2_norm);
                acc_p.push_back(r.accuracy);
            }
        }
        rep.points_h = int(norm_h.size());
        rep.points_prompt = int(norm_p.size());
        rep.spearman_norm_acc_h = spearman(norm_h, acc_h);
        rep.spearman_norm_acc_prompt = spearman(norm_p, acc_p);
        if (loss_h.size() == acc_h.size() && !loss_h.empty())
            rep.spearman_loss_acc_h = spearman(loss_h, acc_h);
        return rep;
    }

    static const ConceptTuple& baseline_start_tuple() {
        static const ConceptTuple t(Color::Green, Shape::Triangle, Color::Red, Shape::Triangle);
        return t;
    }

  private:
    using Key = std::string;

    static Key result_key(const ReachabilityResult& r) {
        nlohmann::json ax;  // idempotence key covers only the sweep axes
        if (!r.extra.is_null())
            for (const auto& k : {"distance", "p", "factor", "value", "mask_level", "full_prompt",
                                  "injection", "probe", "second_tie", "removed"})
                if (r.extra.contains(k)) ax[k] = r.extra[k];
        return r.method + "|" + r.target_key + "|" + r.y_s + "|" + std::to_string(r.model_seed) +
               "|" + ax.dump();
    }

    std::map<Key, ReachabilityResult> load_existing_keys(const ResultsStore& store) const {
        std::map<Key, ReachabilityResult> keys;
        if (!ctx_.run.force)
            for (const auto& r : store.load_all()) keys.emplace(result_key(r), r);
        return keys;
    }

    void emit(ResultsStore& store, std::vector<ReachabilityResult>& out, ReachabilityResult r) {
        if (existing_.emplace(result_key(r), r).second) store.append(r);
        out.push_back(std::move(r));
    }

    // On resume, previously computed rows are replayed into `out` rather than
    // recomputed, so run_family returns the complete family either way.
    bool already_done(const ReachabilityResult& probe,
                      std::vector<ReachabilityResult>& out) const {
        auto it = existing_.find(result_key(probe));
        if (it == existing_.end()) return false;
        out.push_back(it->second);
        return true;
    }

    // Evaluate (methods x seeds) for one (spec, target, y_s) cell.
    void run_cell(const ExperimentPlan& plan, ResultsStore& store,
                  std::vector<ReachabilityResult>& out, const DatasetSpec& spec,
                  const DatasetSpec& clf_spec, const ConceptTuple& target, const std::string& y_s,
                  const nlohmann::json& extra) {
        std::string h = spec_hash_of(spec);
        for (uint64_t seed : plan.seeds) {
            for (Method m : plan.methods) {
                ReachabilityResult probe;
                probe.method = to_string(m);
                probe.target_key = target.key();
                probe.y_s = y_s;
                probe.model_seed = seed;
                probe.extra = extra;
                if (already_done(probe, out)) continue;

                DatasetManifest man = ensure_dataset(spec);
                auto model = ensure_model(spec, man, seed);
                auto clfs = ensure_classifiers(clf_spec, model.get(), seed);
                emit(store, out, evaluate(*model, *clfs, m, target, y_s, &man, h, seed, extra));
            }
        }
    }

    DatasetSpec balanced_spec() const {
        return DatasetSpec::balanced(ctx_.run.target_total, ctx_.run.seeds.front());
    }

    std::vector<ReachabilityResult> run_baseline(const ExperimentPlan& plan, ResultsStore& store) {
        std::vector<ReachabilityResult> out;
        DatasetSpec spec = balanced_spec();
        const ConceptTuple& start = baseline_start_tuple();
        std::string y_s = caption_of(start);

        std::map<int, std::vector<ConceptTuple>> groups;
        for (const auto& t : enumerate_valid_tuples()) groups[start.distance(t)].push_back(t);
        for (auto& [dist, pool] : groups) {
            auto targets = harness_detail::pick_tuples(
                pool, size_t(plan.targets_per_group),
                hash_combine(plan.target_pick_seed, uint64_t(dist)));
            for (const auto& target : targets) {
                nlohmann::json extra{{"distance", dist}};
                run_cell(plan, store, out, spec, spec, target, y_s, extra);
            }
        }
        return out;
    }

    std::vector<ReachabilityResult> run_scarcity(const ExperimentPlan& plan, ResultsStore& store) {
        std::vector<ReachabilityResult> out;
        const ConceptTuple target(Color::Red, Shape::Triangle, Color::Green, Shape::Square);
        const std::string y_s = caption_of(target);
        const std::vector<double> grid{1.0 / 3.0, 0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.0};
        const std::vector<FactorValue> reductions{
            FactorValue::of(FactorName::BackColor, Color::Red),
            FactorValue::of(FactorName::BackShape, Shape::Triangle),
            FactorValue::of(FactorName::FrontColor, Color::Green),
            FactorValue::of(FactorName::FrontShape, Shape::Square),
        };
        DatasetSpec base = balanced_spec();
        for (const auto& fv : reductions) {
            for (double p : grid) {
                DatasetSpec spec = apply_scarcity(base, fv, p);
                nlohmann::json extra{
                    {"factor", to_string(fv.factor)},
                    {"value", harness_detail::factor_value_name(fv.factor, fv.value)},
                    {"p", p}};
                if (p == 0.0) extra["ood_class"] = to_string(classify_ood(target, spec));
                run_cell(plan, store, out, spec, base, target, y_s, extra);
            }
        }
        return out;
    }

    std::vector<ReachabilityResult> run_underspec(const ExperimentPlan& plan,
                                                  ResultsStore& store) {
        std::vector<ReachabilityResult> out;
        auto targets =
            harness_detail::pick_tuples(enumerate_valid_tuples(), 10, plan.target_pick_seed);
        DatasetSpec base = balanced_spec();
        const auto& masks = constructible_masks();
        for (size_t level = 0; level < masks.size(); ++level) {
            const auto& mask = masks[level];
            DatasetSpec spec = base;
            spec.mask = mask;
            for (const auto& target : targets) {
                std::string y_s =
                    plan.full_prompt_variant ? caption_of(target) : caption_of(target, mask);
                nlohmann::json extra{{"mask_level", int(level)},
                                     {"mask", mask.str()},
                                     {"full_prompt", plan.full_prompt_variant}};
                std::string h = spec_hash_of(spec);
                for (uint64_t seed : plan.seeds)
                    for (Method m : plan.methods) {
                        ReachabilityResult probe;
                        probe.method = to_string(m);
                        probe.target_key = target.key();
                        probe.y_s = y_s;
                        probe.model_seed = seed;
                        probe.extra = extra;
                        if (already_done(probe, out)) continue;

                        DatasetManifest man = ensure_dataset(spec);
                        auto model = ensure_model(spec, man, seed);
                        auto clfs = ensure_classifiers(base, model.get(), seed);
                        std::vector<Verdict> verdicts;
                        ReachabilityResult r = evaluate(*model, *clfs, m, target, y_s, &man, h,
                                                        seed, extra, &verdicts);
                        annotate_factor_breakdown(r, verdicts, target, mask);
                        emit(store, out, std::move(r));
                    }
            }
        }
        return out;
    }

    // Factor-resolved breakdown: per factor, accuracy restricted to that
    // factor, and for removed factors the distribution of generated values
    // (plus the catch-all X bucket for incomplete images).
    static void annotate_factor_breakdown(ReachabilityResult& r,
                                          const std::vector<Verdict>& verdicts,
                                          const ConceptTuple& target,
                                          const SpecificationMask& mask) {
        nlohmann::json per_factor, removed_dist;
        const std::array<FactorName, 4> factors{FactorName::BackColor, FactorName::BackShape,
                                                FactorName::FrontColor, FactorName::FrontShape};
        int incomplete = 0;
        for (const auto& v : verdicts) incomplete += v.incomplete;
        for (FactorName f : factors) {
            int correct = 0;
            std::map<std::string, int> dist;
            for (const auto& v : verdicts) {
                if (v.incomplete) continue;
                uint8_t got = v.predicted->at(f);
                correct += (got == target.at(f));
                ++dist[harness_detail::factor_value_name(f, got)];
            }
            per_factor[to_string(f)] =
                verdicts.empty() ? 0.0 : double(correct) / double(verdicts.size());
            if (!harness_detail::mask_specifies(mask, f)) {
                nlohmann::json d;
                for (const auto& [name, count] : dist) d[name] = count;
                d["X"] = incomplete;
                removed_dist[to_string(f)] = d;
            }
        }
        r.extra["factor_accuracy"] = per_factor;
        if (!removed_dist.is_null()) r.extra["removed_factor_distribution"] = removed_dist;
    }

    std::vector<ReachabilityResult> run_bias(const ExperimentPlan& plan, ResultsStore& store) {
        std::vector<ReachabilityResult> out;
        DatasetSpec base = balanced_spec();
        const std::vector<long> injections{0, 10, 50, 100, 500, 1000};

        // tie: c1=blue <=> s1=circle (variant: c2=red <=> s2=triangle)
        FactorValue tie_color =
            plan.second_tie_variant ? FactorValue::of(FactorName::FrontColor, Color::Red)
                                    : FactorValue::of(FactorName::BackColor, Color::Blue);
        FactorValue tie_shape =
            plan.second_tie_variant ? FactorValue::of(FactorName::FrontShape, Shape::Triangle)
                                    : FactorValue::of(FactorName::BackShape, Shape::Circle);

        // 6 probe targets: 3 with the tied colour but a different shape in the
        // tied slot, 3 with the tied shape but a different colour.
        std::vector<ConceptTuple> color_only, shape_only;
        for (const auto& t : enumerate_valid_tuples()) {
            bool has_color = t.at(tie_color.factor) == tie_color.value;
            bool has_shape = t.at(tie_shape.factor) == tie_shape.value;
            if (has_color && !has_shape) color_only.push_back(t);
            if (!has_color && has_shape) shape_only.push_back(t);
        }
        auto probes = harness_detail::pick_tuples(color_only, 3, plan.target_pick_seed);
        for (auto& t : harness_detail::pick_tuples(shape_only, 3, plan.target_pick_seed + 1))
            probes.push_back(t);

        for (long inj : injections) {
            if (inj > base.target_total) continue;  // smoke-scale guard
            DatasetSpec spec = apply_bias(base, tie_color, tie_shape, inj);
            for (const auto& target : probes) {
                bool color_probe = t_at(target, tie_color);
                nlohmann::json extra{{"injection", inj},
                                     {"probe", color_probe ? "color_only" : "shape_only"},
                                     {"second_tie", plan.second_tie_variant}};
                if (inj == 0) extra["ood_class"] = to_string(classify_ood(target, spec));
                run_cell(plan, store, out, spec, base, target, caption_of(target), extra);
            }
        }
        return out;
    }

    static bool t_at(const ConceptTuple& t, const FactorValue& fv) {
        return t.at(fv.factor) == fv.value;
    }

    std::vector<ReachabilityResult> run_removal(const ExperimentPlan& plan, ResultsStore& store) {
        std::vector<ReachabilityResult> out;
        DatasetSpec base = balanced_spec();
        const std::vector<ConceptTuple> targets{
            ConceptTuple(Color::Green, Shape::Triangle, Color::Blue, Shape::Square),
            ConceptTuple(Color::Red, Shape::Circle, Color::Blue, Shape::Triangle),
            ConceptTuple(Color::Red, Shape::Square, Color::Green, Shape::Circle),
        };
        for (const auto& target : targets) {
            DatasetSpec spec = apply_removal(base, target);
            // multiple starting prompts: the target's own description and the
            // baseline family's fixed starting prompt
            std::vector<std::string> starts{caption_of(target),
                                            caption_of(baseline_start_tuple())};
            for (const auto& y_s : starts) {
                nlohmann::json extra{{"removed", target.key()},
                                     {"ood_class", to_string(classify_ood(target, spec))}};
                run_cell(plan, store, out, spec, base, target, y_s, extra);
            }
        }
        return out;
    }

    // NormDiag reuses baseline records: it re-reads the baseline store, emits
    // one summary row per steering space, and stores the scatter in `extra`.
    std::vector<ReachabilityResult> run_norm_diag(const ExperimentPlan& plan,
                                                  ResultsStore& store) {
        ResultsStore baseline_store(idx_.results_dir("baseline"));
        auto baseline = baseline_store.load_all();
        if (baseline.empty())
            throw IntegrityError("norm_diag requires completed baseline results; run the "
                                 "baseline family first");
        NormDiagReport rep = norm_diag_from(baseline);

        std::vector<ReachabilityResult> out;
        for (const auto& method : {std::string("h_steering"), std::string("prompt_steering")}) {
            nlohmann::json scatter = nlohmann::json::array();
            long matched = 0, n = 0;
            for (const auto& r : baseline) {
                if (r.method != method || !r.steer_l2_norm) continue;
                scatter.push_back({{"norm", *r.steer_l2_norm},
                                   {"loss", r.steer_final_loss ? *r.steer_final_loss : 0.0},
                                   {"accuracy", r.accuracy},
                                   {"seed", r.model_seed}});
                matched += r.matched;
                n += r.n;
            }
            if (n == 0) continue;
            ReachabilityResult r;
            r.family = family_name_;
            r.spec_hash = baseline.front().spec_hash;
            r.model_seed = plan.seeds.empty() ? 0 : plan.seeds.front();
            r.method = method;
            r.target_key = "pooled";
            r.y_s = caption_of(baseline_start_tuple());
            r.n = int(n);
            r.matched = int(matched);
            r.accuracy = double(matched) / double(n);
            auto sp =
                method == "h_steering" ? rep.spearman_norm_acc_h : rep.spearman_norm_acc_prompt;
            r.extra = {{"scatter", scatter},
                       {"spearman_norm_accuracy", sp ? nlohmann::json(*sp) : nlohmann::json()}};
            if (method == "h_steering" && rep.spearman_loss_acc_h)
                r.extra["spearman_loss_accuracy"] = *rep.spearman_loss_acc_h;
            emit(store, out, std::move(r));
        }
        return out;
    }

    HarnessContext ctx_;
    ArtifactIndex idx_;
    std::string family_name_;
    std::map<Key, ReachabilityResult> existing_;
    std::map<std::string, std::shared_ptr<DiffusionModel>> model_cache_;
    std::map<std::string, std::shared_ptr<ClassifierTriple>> clf_cache_;
};

// ---------------------------------------------------------------------------
// Plotting: deterministic SVG line chart + companion CSV per family.
// ---------------------------------------------------------------------------

struct PlotError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace harness_detail {

struct Series {
    std::string label;
    std::vector<std::pair<double, double>> points;  // (x, accuracy)
};

inline std::string svg_chart(const std::vector<Series>& series, const std::string& title,
                             const std::string& x_label, bool threshold_rule) {
    const double W = 640, H = 420, ml = 60, mr = 20, mt = 40, mb = 50;
    double xmin = 1e300, xmax = -1e300;
    for (const auto& s : series)
        for (auto [x, y] : s.points) {
            (void)y;
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
        }
    if (xmin >= xmax) {
        xmin -= 0.5;
        xmax += 0.5;
    }
    auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (W - ml - mr); };
    auto py = [&](double y) { return H - mb - y * (H - mt - mb); };
    const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};

    std::ostringstream svg;
    svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
    svg << "<rect width='100%' height='100%' fill='white'/>\n";
    svg << "<text x='" << W / 2 << "' y='24' text-anchor='middle' font-size='16'>" << title
        << "</text>\n";
    svg << "<line x1='" << ml << "' y1='" << H - mb << "' x2='" << W - mr << "' y2='" << H - mb
        << "' stroke='black'/>\n";
    svg << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << H - mb
        << "' stroke='black'/>\n";
    for (int i = 0; i <= 5; ++i) {
        double y = i / 5.0;
        svg << "<text x='" << ml - 8 << "' y='" << py(y) + 4
            << "' text-anchor='end' font-size='11'>" << y << "</text>\n";
    }
    svg << "<text x='" << W / 2 << "' y='" << H - 12 << "' text-anchor='middle' font-size='12'>"
        << x_label << "</text>\n";
    if (threshold_rule && 0.01 >= xmin && 0.01 <= xmax)
        svg << "<line x1='" << px(0.01) << "' y1='" << mt << "' x2='" << px(0.01) << "' y2='"
            << H - mb << "' stroke='red' stroke-dasharray='6,4'/>\n";
    int ci = 0;
    for (const auto& s : series) {
        const char* col = colors[ci % 6];
        std::ostringstream path;
        for (size_t i = 0; i < s.points.size(); ++i)
            path << (i ? " L" : "M") << px(s.points[i].first) << " " << py(s.points[i].second);
        svg << "<path d='" << path.str() << "' fill='none' stroke='" << col
            << "' stroke-width='2'/>\n";
        for (auto [x, y] : s.points)
            svg << "<circle cx='" << px(x) << "' cy='" << py(y) << "' r='3' fill='" << col
                << "'/>\n";
        svg << "<text x='" << W - mr - 150 << "' y='" << mt + 16 * (ci + 1) << "' fill='" << col
            << "' font-size='12'>" << s.label << "</text>\n";
        ++ci;
    }
    svg << "</svg>\n";
    return svg.str();
}

}  // namespace harness_detail

// Renders accuracy as a function of the family's sweep axis, one series per
// method, pooled over seeds/targets at each grid point. Writes figure.svg and
// figure.csv (sorted, hence byte-identical across reruns).
inline void plot_family(const std::vector<ReachabilityResult>& results, Family family,
                        const std::string& out_dir) {
    if (results.empty()) throw PlotError("plot: no results for family " + to_string(family));
    std::string x_key, x_label;
    bool threshold = false;
    switch (family) {
        case Family::Baseline:
            x_key = "distance";
            x_label = "concepts changed";
            break;
        case Family::Scarcity:
            x_key = "p";
            x_label = "block probability p";
            threshold = true;
            break;
        case Family::Underspec:
            x_key = "mask_level";
            x_label = "mask level";
            break;
        case Family::Bias:
            x_key = "injection";
            x_label = "injected images";
            break;
        case Family::Removal:
            x_key = "";
            x_label = "removal targets (pooled)";
            break;
        case Family::NormDiag:
            x_key = "";
            x_label = "vector norm";
            break;
    }

    // (method, x) -> [sum matched, sum n]
    std::map<std::string, std::map<double, std::pair<long, long>>> acc;
    for (const auto& r : results) {
        double x = 0;
        if (family == Family::Removal) {
            x = 0;  // single pooled point per method
        } else if (family == Family::NormDiag) {
            if (!r.steer_l2_norm) continue;
            x = *r.steer_l2_norm;
        } else {
            if (r.extra.is_null() || !r.extra.contains(x_key))
                throw PlotError("plot: result record missing column '" + x_key + "'");
            x = r.extra[x_key].get<double>();
        }
        auto& cell = acc[r.method][x];
        cell.first += r.matched;
        cell.second += r.n;
    }

    std::filesystem::create_directories(out_dir);
    std::ofstream csv(out_dir + "/figure.csv", std::ios::trunc);
    csv << "method," << (x_key.empty() ? "x" : x_key) << ",accuracy,n\n";
    std::vector<harness_detail::Series> series;
    for (const auto& [method, pts] : acc) {
        harness_detail::Series s;
        s.label = method;
        for (const auto& [x, cell] : pts) {
            double a = cell.second ? double(cell.first) / double(cell.second) : 0.0;
            s.points.push_back({x, a});
            csv << method << "," << x << "," << a << "," << cell.second << "\n";
        }
        series.push_back(std::move(s));
    }
    std::ofstream svg(out_dir + "/figure.svg", std::ios::trunc);
    svg << harness_detail::svg_chart(series, "reachability: " + to_string(family), x_label,
                                     threshold);
}

}  // namespace concept_reach
