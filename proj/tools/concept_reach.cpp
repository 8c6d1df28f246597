// concept-reach: command-line surface over the dataset / training / steering /
// evaluation pipeline. Exit codes: 0 success, 2 config error, 3 integrity
// error.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "concept_reach/harness.hpp"

namespace cr = concept_reach;
namespace fs = std::filesystem;

namespace {

struct GlobalOpts {
    std::string config_file;
    std::string profile = "smoke";
    std::optional<uint64_t> seed;
    bool force = false;
};

cr::RunConfig load_run_config(const GlobalOpts& g) {
    cr::RunConfig cfg = g.config_file.empty()
                            ? cr::RunConfig::defaults(cr::profile_from_string(g.profile))
                            : cr::RunConfig::from_file(g.config_file);
    if (g.seed) cfg.seeds = {*g.seed};
    cfg.force = g.force;
    return cfg;
}

cr::HarnessContext make_context(const cr::RunConfig& cfg) {
    cr::HarnessContext ctx;
    ctx.run = cfg;
    ctx.train.epochs = cfg.train_epochs;
    ctx.log = [](const std::string& msg) { std::cerr << "[concept-reach] " << msg << "\n"; };
    return ctx;
}

cr::DatasetSpec load_spec(const std::string& path, const cr::RunConfig& cfg) {
    if (path.empty()) return cr::DatasetSpec::balanced(cfg.target_total, cfg.seeds.front());
    std::ifstream in(path);
    if (!in) throw cr::ConfigError("cannot open spec file: " + path);
    return cr::DatasetSpec::from_json(nlohmann::json::parse(in));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"concept reachability laboratory"};
    app.require_subcommand(1);

    GlobalOpts g;
    app.add_option("--config", g.config_file, "run configuration file (json)");
    app.add_option("--profile", g.profile, "scale profile: paper|smoke")
        ->check(CLI::IsMember({"paper", "smoke"}));
    app.add_option("--seed", g.seed, "override the seed list with a single seed");
    app.add_flag("--force", g.force, "recompute artifacts even when cached");

    std::string spec_file, space = "prompt", target_key, y_s, prompt, images_dir, family_name,
                vector_stem, out_dir;
    int n_samples = 16;

    auto* gen = app.add_subcommand("gen-data", "materialize a dataset from a spec");
    gen->add_option("--spec", spec_file, "dataset spec json (default: balanced)");

    auto* train_cmd = app.add_subcommand("train", "train a diffusion model");
    train_cmd->add_option("--spec", spec_file, "dataset spec json (default: balanced)");

    auto* clf = app.add_subcommand("train-classifiers", "train the evaluation classifiers");
    clf->add_option("--spec", spec_file, "balanced dataset spec json");
    bool clean_only = false;
    clf->add_flag("--clean-only", clean_only, "train on rendered images only (no model samples)");

    auto* steer = app.add_subcommand("steer", "optimize a steering vector");
    steer->add_option("--spec", spec_file, "dataset spec json (default: balanced)");
    steer->add_option("--space", space, "prompt|h")->check(CLI::IsMember({"prompt", "h"}));
    steer->add_option("--target", target_key, "target tuple key c1:s1:c2:s2")->required();
    steer->add_option("--ys", y_s, "starting prompt (default: target description)");

    auto* smp = app.add_subcommand("sample", "sample images from a trained model");
    smp->add_option("--spec", spec_file, "dataset spec json (default: balanced)");
    smp->add_option("--prompt", prompt, "conditioning prompt")->required();
    smp->add_option("-n", n_samples, "number of images");
    smp->add_option("--vector", vector_stem, "steering vector stem (no extension)");
    smp->add_option("--out", out_dir, "output directory (default: under the artifact root)");

    auto* ev = app.add_subcommand("eval", "classify a directory of images against a target");
    ev->add_option("--images", images_dir, "directory of png files")->required();
    ev->add_option("--target", target_key, "target tuple key c1:s1:c2:s2")->required();
    ev->add_option("--spec", spec_file, "balanced spec used for the classifiers");

    auto* exp = app.add_subcommand("experiment", "run an experiment family");
    exp->add_option("family", family_name,
                    "baseline|scarcity|underspec|bias|removal|norm_diag")
        ->required();

    auto* ver = app.add_subcommand("verify", "integrity-check the artifact root");

    auto* plt = app.add_subcommand("plot", "render figures for a completed family");
    plt->add_option("family", family_name, "experiment family")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        cr::RunConfig cfg = load_run_config(g);
        cr::HarnessContext ctx = make_context(cfg);
        cr::Harness harness(ctx);
        uint64_t seed = cfg.seeds.front();

        if (gen->parsed()) {
            cr::DatasetSpec spec = load_spec(spec_file, cfg);
            cr::DatasetManifest man = harness.ensure_dataset(spec);
            std::cout << man.root << "\n";
        } else if (train_cmd->parsed()) {
            cr::DatasetSpec spec = load_spec(spec_file, cfg);
            cr::DatasetManifest man = harness.ensure_dataset(spec);
            harness.ensure_model(spec, man, seed);
            std::cout << harness.index().checkpoint_dir(cr::spec_hash_of(spec), seed) << "\n";
        } else if (clf->parsed()) {
            cr::DatasetSpec spec = load_spec(spec_file, cfg);
            std::shared_ptr<cr::DiffusionModel> model;
            if (!clean_only) {
                cr::DatasetManifest man = harness.ensure_dataset(spec);
                model = harness.ensure_model(spec, man, seed);
            }
            auto triple = harness.ensure_classifiers(spec, model.get(), seed);
            std::cout << harness.index().classifier_dir(cr::spec_hash_of(spec), seed)
                      << "\nvalidation_accuracy=" << triple->validation_accuracy << "\n";
        } else if (steer->parsed()) {
            cr::DatasetSpec spec = load_spec(spec_file, cfg);
            cr::ConceptTuple target = cr::ConceptTuple::from_key(target_key);
            if (y_s.empty()) y_s = cr::caption_of(target);
            cr::DatasetManifest man = harness.ensure_dataset(spec);
            auto model = harness.ensure_model(spec, man, seed);
            cr::SteeringSpace sp =
                space == "h" ? cr::SteeringSpace::HSpace : cr::SteeringSpace::PromptSpace;
            cr::SteeringVector vec =
                harness.ensure_vector(*model, cr::spec_hash_of(spec).substr(0, 16), &man, sp,
                                      target, y_s, seed);
            std::cout << "final_loss=" << vec.diagnostics.final_loss
                      << " l2_norm=" << vec.diagnostics.l2_norm << "\n";
        } else if (smp->parsed()) {
            cr::DatasetSpec spec = load_spec(spec_file, cfg);
            cr::DatasetManifest man = harness.ensure_dataset(spec);
            auto model = harness.ensure_model(spec, man, seed);
            std::optional<cr::SteeringVector> vec;
            cr::Intervention iv;
            const cr::Intervention* ivp = nullptr;
            if (!vector_stem.empty()) {
                vec = cr::SteeringVector::load(vector_stem);
                iv = vec->to_intervention();
                ivp = &iv;
            }
            auto imgs = cr::sample(*model, prompt, n_samples, seed, ivp, ctx.sample_batch);
            std::string dir = out_dir.empty()
                                  ? harness.index().sample_dir(
                                        cr::sha256_hex(prompt + "|" + std::to_string(seed))
                                            .substr(0, 16))
                                  : out_dir;
            fs::create_directories(dir);
            for (size_t i = 0; i < imgs.size(); ++i)
                cr::write_png(imgs[i], dir + "/" + std::to_string(i) + ".png");
            std::cout << dir << "\n";
        } else if (ev->parsed()) {
            cr::ConceptTuple target = cr::ConceptTuple::from_key(target_key);
            cr::DatasetSpec spec = load_spec(spec_file, cfg);
            auto triple = harness.ensure_classifiers(spec, nullptr, seed);
            std::vector<cr::Image> imgs;
            std::vector<fs::path> files;
            for (const auto& e : fs::directory_iterator(images_dir))
                if (e.path().extension() == ".png") files.push_back(e.path());
            std::sort(files.begin(), files.end());
            for (const auto& f : files) imgs.push_back(cr::read_png(f.string()));
            if (imgs.empty()) throw cr::ConfigError("eval: no png files in " + images_dir);
            double acc = cr::reachability(*triple, imgs, target);
            long matched = std::lround(acc * double(imgs.size()));
            nlohmann::json j{{"target", target.key()},
                             {"n", imgs.size()},
                             {"matched", matched},
                             {"accuracy", double(matched) / double(imgs.size())}};
            std::cout << j.dump() << "\n";
        } else if (exp->parsed()) {
            cr::ExperimentPlan plan;
            plan.family = cr::family_from_string(family_name);
            plan.seeds = cfg.seeds;
            auto results = harness.run_family(plan);
            cr::plot_family(results, plan.family,
                            harness.index().results_dir(family_name) + "/figures");
            std::cout << harness.index().results_dir(family_name) << "/results.jsonl ("
                      << results.size() << " records)\n";
        } else if (ver->parsed()) {
            cr::VerifyReport rep = cr::verify_root(cfg.root);
            std::cout << "checked " << rep.artifacts_checked << " artifacts\n";
            for (const auto& p : rep.problems) std::cout << "PROBLEM: " << p << "\n";
            if (!rep.ok) return 3;
            std::cout << "ok\n";
        } else if (plt->parsed()) {
            cr::Family fam = cr::family_from_string(family_name);
            cr::ResultsStore store(cr::ArtifactIndex(cfg.root).results_dir(family_name));
            auto results = store.load_all();
            cr::plot_family(results, fam, cr::ArtifactIndex(cfg.root).results_dir(family_name) +
                                              "/figures");
            std::cout << "figures written\n";
        }
        return 0;
    } catch (const cr::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const cr::IntegrityError& e) {
        std::cerr << "integrity error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
